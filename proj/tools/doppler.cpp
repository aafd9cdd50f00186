// doppler: offline diffusion-option planning for LTL tasks.
//   gen-data  generate a non-expert maze dataset
//   train     train the trajectory denoiser and the option critics
//   eval      run receding-horizon evaluation and emit reports
//   check     run the fast invariant self-test suite

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include <CLI11.hpp>

#include "doppler/config.hpp"
#include "doppler/pipeline.hpp"
#include "doppler/planner.hpp"
#include "doppler/selfcheck.hpp"
#include "doppler/svg.hpp"

namespace fs = std::filesystem;
using namespace doppler;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir = "out";
  uint64_t seed = 0;
  bool seed_set = false;
  int threads = 0;
};

config::RunConfig resolve_config(const CommonOpts& opts) {
  config::RunConfig cfg =
      opts.config_path.empty() ? config::RunConfig{} : config::load_config(opts.config_path);
  if (opts.seed_set) cfg.seed = opts.seed;
  if (opts.threads > 0) cfg.threads = opts.threads;
  set_max_threads(cfg.threads);
  return cfg;
}

void write_resolved(const config::RunConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  config::save_config(cfg, out_dir + "/config.resolved.toml");
}

int cmd_gen_data(const CommonOpts& opts) {
  const config::RunConfig cfg = resolve_config(opts);
  write_resolved(cfg, opts.out_dir);
  const maze::MazeSpec spec = pipeline::maze_from_config(cfg);
  maze::DatasetGenConfig gen;
  gen.episodes = cfg.dataset.episodes;
  gen.horizon = cfg.dataset.horizon;
  gen.waypoint_tol = cfg.dataset.waypoint_tol;
  gen.waypoint_max_steps = cfg.dataset.waypoint_max_steps;
  gen.noise_scale = cfg.dataset.noise_scale;
  const maze::EpisodeDataset ds = maze::generate_dataset(spec, cfg.seed, gen);
  const std::string path = opts.out_dir + "/dataset.bin";
  maze::save_dataset(ds, path);
  std::printf("wrote %s (%zu episodes x %d steps)\n", path.c_str(), ds.episodes.size(),
              gen.horizon);
  return 0;
}

int cmd_train(const CommonOpts& opts, const std::string& data_path) {
  const config::RunConfig cfg = resolve_config(opts);
  write_resolved(cfg, opts.out_dir);
  const maze::EpisodeDataset ds = maze::load_dataset(data_path);
  pipeline::train_pipeline(cfg, ds, opts.out_dir, true);
  std::printf("checkpoints written under %s\n", opts.out_dir.c_str());
  return 0;
}

struct EvalOpts {
  std::string data_path;
  std::string models_dir;
  std::string tasks_str;
  int sample_tasks = 0;
  int depth = 0;
  bool heldout = false;
  bool ablate = false;
  bool perturb = false;
  bool plots = false;
  bool plan_only = false;
};

void verify_critic_checkpoint(const ParamStore<float>& store,
                              const optioncritic::CriticSystem<float>& sys) {
  const std::string w0 = "q1/mlp/w0";
  if (!store.has(w0)) throw Error("critic checkpoint missing '" + w0 + "'");
  const auto& shape = store.at(w0).shape;
  if (shape.size() != 2 || shape[1] != sys.input_dim())
    throw Error("critic checkpoint input width " + std::to_string(shape[1]) +
                " does not match config (" + std::to_string(sys.input_dim()) + ")");
}

void verify_denoiser_checkpoint(const ParamStore<float>& store,
                                const diffusion::DenoiserModel<float>& model) {
  const std::string w0 = model.mlp.w_name(0);
  if (!store.has(w0)) throw Error("denoiser checkpoint missing '" + w0 + "'");
  const auto& shape = store.at(w0).shape;
  if (shape.size() != 2 || shape[1] != static_cast<size_t>(model.input_dim()))
    throw Error("denoiser checkpoint input width " + std::to_string(shape[1]) +
                " does not match config (" + std::to_string(model.input_dim()) + ")");
}

int cmd_eval(const CommonOpts& opts, const EvalOpts& ev) {
  config::RunConfig cfg = resolve_config(opts);
  if (ev.sample_tasks > 0) cfg.eval.tasks = ev.sample_tasks;
  if (ev.depth > 0) cfg.eval.task_depth = ev.depth;
  if (ev.perturb) cfg.eval.perturb = true;
  write_resolved(cfg, opts.out_dir);

  const maze::EpisodeDataset ds = maze::load_dataset(ev.data_path);
  const maze::MazeSpec& spec = ds.spec;
  const maze::NormStats stats = ds.require_stats();
  const auto layout = pipeline::layout_from_config(cfg);
  const auto sched = pipeline::schedule_from_config(cfg);
  const auto model = pipeline::denoiser_from_config(cfg);
  const auto sys = pipeline::critic_from_config(cfg, stats, spec.num_props());

  const std::string models = ev.models_dir.empty() ? opts.out_dir : ev.models_dir;
  const ParamStore<float> den_store = load_checkpoint(models + "/denoiser.ckpt");
  const ParamStore<float> critic_store = load_checkpoint(models + "/critic.ckpt");
  verify_denoiser_checkpoint(den_store, model);
  verify_critic_checkpoint(critic_store, sys);

  // task set
  std::vector<ltl::Formula> tasks;
  std::string task_label = "training";
  if (!ev.tasks_str.empty()) {
    std::istringstream ts(ev.tasks_str);
    std::string item;
    while (std::getline(ts, item, ';')) {
      item = config::detail::trim(item);
      if (!item.empty()) tasks.push_back(ltl::parse(item, spec.num_props()));
    }
    task_label = "explicit";
  } else if (ev.heldout) {
    const auto train_tasks = pipeline::sample_task_set(cfg.seed, 1, cfg.eval.tasks,
                                                       cfg.eval.task_depth, spec.num_props());
    std::set<std::string> exclude;
    for (const auto& t : train_tasks) exclude.insert(ltl::canonical_str(t));
    tasks = pipeline::sample_task_set(cfg.seed, 2, cfg.eval.heldout_tasks, cfg.eval.task_depth,
                                      spec.num_props(), exclude);
    task_label = "heldout";
  } else {
    tasks = pipeline::sample_task_set(cfg.seed, 1, cfg.eval.tasks, cfg.eval.task_depth,
                                      spec.num_props());
  }
  if (tasks.empty()) throw Error("no tasks to evaluate");
  const auto starts = pipeline::sample_starts(spec, cfg.seed + (ev.heldout ? 77 : 0),
                                              tasks.size(), cfg.eval.starts,
                                              cfg.eval.fixed_start);

  std::vector<std::string> methods;
  if (ev.ablate)
    methods = {"diversity", "none", "q"};
  else
    methods = {cfg.planner.guidance};

  const planner::QFactory q_factory = pipeline::make_q_factory(critic_store, sys);
  std::ofstream csv(opts.out_dir + "/eval_rows.csv");
  csv << planner::eval_csv_header() << "\n";
  nlohmann::json summary = nlohmann::json::array();

  for (const std::string& method : methods) {
    diffusion::GuidanceMode mode;
    if (method == "diversity")
      mode = diffusion::GuidanceMode::Diversity;
    else if (method == "none")
      mode = diffusion::GuidanceMode::None;
    else if (method == "q")
      mode = diffusion::GuidanceMode::QGuidance;
    else
      throw Error("unknown guidance method '" + method + "'");
    const planner::ProposerFn proposer = pipeline::make_planner_proposer(
        den_store, model, sched, stats, spec.max_force, mode, cfg.diffusion.zeta0,
        cfg.diffusion.ridge, &critic_store, &sys);

    planner::EvalConfig ecfg;
    ecfg.method = method;
    ecfg.seed = cfg.seed;
    ecfg.rollout.m_proposals = cfg.planner.proposals;
    ecfg.rollout.budget = cfg.planner.budget;
    ecfg.rollout.perturb = cfg.eval.perturb;
    const planner::EvalResult res =
        planner::evaluate_suite(spec, tasks, starts, proposer, q_factory, ecfg);
    for (const auto& row : res.rows) csv << planner::to_csv_row(row) << "\n";
    nlohmann::json agg = planner::to_json(res.aggregate);
    agg["tasks"] = task_label;
    if (ev.plan_only) {
      // open-loop planning satisfaction: chain from predicted states, no env
      const planner::LabelFn label = [&spec](const maze::State& s, const maze::Action& a) {
        return maze::label_as<double, ltl::TruthAssignment>(spec, s, a);
      };
      int sat = 0, total = 0;
      for (size_t t = 0; t < tasks.size(); ++t)
        for (size_t s = 0; s < starts[t].size(); ++s) {
          planner::RolloutConfig rc = ecfg.rollout;
          rc.key = optioncritic::splitmix64_key(cfg.seed ^ 0xbeefull, t + 1, s + 1);
          const auto q = q_factory();
          sat += planner::plan_only(starts[t][s], tasks[t], proposer, q, label, rc) ==
                 ltl::Verdict::Satisfied;
          ++total;
        }
      agg["plan_only_satisfaction_rate"] = 100.0 * sat / std::max(total, 1);
    }
    summary.push_back(agg);
    std::printf("%-10s sat %5.1f%% (se %.1f)  fail %4.1f%%  plan-sat %5.1f%%  steps %6.1f\n",
                method.c_str(), res.aggregate.satisfaction_rate, res.aggregate.satisfaction_se,
                res.aggregate.failure_rate, res.aggregate.planning_satisfaction_rate,
                res.aggregate.mean_successful_steps);

    if (ev.plots) {
      const std::string plot_dir = opts.out_dir + "/plots";
      fs::create_directories(plot_dir);
      planner::RolloutConfig rc = ecfg.rollout;
      rc.key = optioncritic::splitmix64_key(cfg.seed, 1, 1);
      const auto q = q_factory();
      const auto episode = planner::rollout(spec, starts[0][0], tasks[0], proposer, q, rc);
      svg::write_maze_trace(spec, episode.states, episode.perturb_steps,
                            plot_dir + "/" + method + "_task0.svg");
      // trace dump in the dataset format for replay
      maze::EpisodeDataset dump;
      dump.spec = spec;
      maze::Episode te;
      for (const auto& s : episode.states)
        te.states.push_back({float(s.x), float(s.y), float(s.vx), float(s.vy)});
      for (const auto& a : episode.actions) te.actions.push_back({float(a.fx), float(a.fy)});
      dump.episodes.push_back(te);
      if (!te.actions.empty()) {
        dump.stats = maze::compute_stats(dump.episodes);
        dump.has_stats = true;
      }
      maze::save_dataset(dump, plot_dir + "/" + method + "_task0.traj");
    }
  }
  std::ofstream js(opts.out_dir + "/summary.json");
  js << summary.dump(2) << "\n";
  return 0;
}

int cmd_check(const CommonOpts& opts) {
  const config::RunConfig cfg = resolve_config(opts);
  const auto results = selfcheck::run_all(cfg);
  bool all = true;
  for (const auto& r : results) {
    std::printf("[%s] %-24s %s\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    all = all && r.pass;
  }
  std::printf("%zu checks, %s\n", results.size(), all ? "all passed" : "FAILURES present");
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"diffusion-option planner for LTL tasks"};
  app.require_subcommand(1);

  CommonOpts common;
  EvalOpts ev;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "config file (TOML subset)");
    sub->add_option("--out", common.out_dir, "output directory");
    sub->add_option("--seed", common.seed, "seed override")->each([&](const std::string&) {
      common.seed_set = true;
    });
    sub->add_option("--threads", common.threads, "worker thread cap");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a non-expert dataset");
  add_common(gen);

  CLI::App* train = app.add_subcommand("train", "train denoiser and critics");
  add_common(train);
  train->add_option("--data", ev.data_path, "dataset file")->required();

  CLI::App* eval = app.add_subcommand("eval", "evaluate the planner");
  add_common(eval);
  eval->add_option("--data", ev.data_path, "dataset file")->required();
  eval->add_option("--models", ev.models_dir, "checkpoint directory (default --out)");
  eval->add_option("--tasks", ev.tasks_str, "semicolon-separated LTL task list");
  eval->add_option("--sample-tasks", ev.sample_tasks, "number of sampled tasks");
  eval->add_option("--depth", ev.depth, "max Until-sampler depth");
  eval->add_flag("--heldout", ev.heldout, "evaluate held-out tasks (disjoint from training)");
  eval->add_flag("--ablate", ev.ablate, "run diversity / none / q-guidance sweep");
  eval->add_flag("--perturb", ev.perturb, "inject one mid-episode teleport per rollout");
  eval->add_flag("--plots", ev.plots, "emit SVG trajectory plots and trace dumps");
  eval->add_flag("--plan-only", ev.plan_only,
                 "also report open-loop plan-only satisfaction (no env stepping)");

  CLI::App* check = app.add_subcommand("check", "run the fast self-test suite");
  add_common(check);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(common);
    if (train->parsed()) return cmd_train(common, ev.data_path);
    if (eval->parsed()) return cmd_eval(common, ev);
    if (check->parsed()) return cmd_check(common);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
