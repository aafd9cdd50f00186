#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "doppler/config.hpp"
#include "doppler/diffusion.hpp"
#include "doppler/ltl.hpp"
#include "doppler/maze.hpp"
#include "doppler/optioncritic.hpp"
#include "doppler/planner.hpp"

namespace doppler::pipeline {

using config::RunConfig;
using diffusion::NoiseSchedule;
using diffusion::TrajLayout;
using maze::EpisodeDataset;
using maze::MazeSpec;
using maze::State;
using optioncritic::CriticSystem;
using optioncritic::OptionTraj;

// ---------------------------------------------------------------------------
// Config-derived objects

inline MazeSpec maze_from_config(const RunConfig& cfg) {
  MazeSpec spec;
  if (!cfg.env.walls.empty()) {
    std::vector<std::string> rows;
    std::string row;
    for (char c : cfg.env.walls) {
      if (c == '|') {
        rows.push_back(row);
        row.clear();
      } else {
        row.push_back(c);
      }
    }
    if (!row.empty()) rows.push_back(row);
    spec = maze::maze_from_rows(rows);
    std::istringstream rs(cfg.env.regions);
    std::string item;
    while (std::getline(rs, item, ',')) {
      maze::Region r;
      if (std::sscanf(item.c_str(), "%d:%d:%d:%lf", &r.prop, &r.cx, &r.cy, &r.half_width) != 4)
        throw Error("bad region spec '" + item + "'");
      spec.regions.push_back(r);
    }
  } else {
    spec = maze::default_maze();
  }
  spec.dt = cfg.env.dt;
  spec.damping = cfg.env.damping;
  spec.max_force = cfg.env.max_force;
  spec.max_speed = cfg.env.max_speed;
  spec.pd_kp = cfg.env.pd_kp;
  spec.pd_kd = cfg.env.pd_kd;
  spec.validate();
  return spec;
}

inline TrajLayout layout_from_config(const RunConfig& cfg) {
  TrajLayout l;
  l.k = cfg.diffusion.horizon;
  l.state_dim = 4;
  l.action_dim = 2;
  return l;
}

inline NoiseSchedule schedule_from_config(const RunConfig& cfg) {
  NoiseSchedule s = cfg.diffusion.beta_min > 0 && cfg.diffusion.beta_max > 0
                        ? NoiseSchedule::linear(cfg.diffusion.steps, cfg.diffusion.beta_min,
                                                cfg.diffusion.beta_max)
                        : NoiseSchedule::default_linear(cfg.diffusion.steps);
  s.validate();
  return s;
}

inline diffusion::DenoiserModel<float> denoiser_from_config(const RunConfig& cfg) {
  return diffusion::DenoiserModel<float>::make(layout_from_config(cfg), cfg.diffusion.hidden,
                                               cfg.diffusion.depth, cfg.diffusion.time_embed);
}

inline CriticSystem<float> critic_from_config(const RunConfig& cfg,
                                              const maze::NormStats& stats, int num_props) {
  return CriticSystem<float>::make(layout_from_config(cfg), stats, num_props,
                                   cfg.critic.hidden, cfg.critic.depth, cfg.critic.embed_dim,
                                   cfg.critic.rgc_rounds);
}

// ---------------------------------------------------------------------------
// Dataset segment plumbing

struct SegmentIndexer {
  int episodes = 0;
  int offsets = 0;  // valid offsets per episode

  static SegmentIndexer of(const EpisodeDataset& ds, int k) {
    SegmentIndexer ix;
    ix.episodes = static_cast<int>(ds.episodes.size());
    if (ix.episodes == 0) throw Error("dataset is empty");
    const int n = static_cast<int>(ds.episodes[0].actions.size());
    ix.offsets = n - k;  // rows 0..k use actions off..off+k
    if (ix.offsets < 1) throw Error("episodes shorter than the option horizon");
    return ix;
  }
};

// Normalized (k+1)-row segment plus the clean conditioning state, for
// denoiser training.
inline diffusion::SegmentSource<float> make_segment_source(const EpisodeDataset& ds,
                                                           const TrajLayout& layout) {
  const SegmentIndexer ix = SegmentIndexer::of(ds, layout.k);
  const maze::NormStats stats = ds.require_stats();
  return [&ds, ix, stats, layout](Rng& rng, float* row, float* cond) {
    const auto& ep = ds.episodes[rng.uniform_int(ix.episodes)];
    const int off = static_cast<int>(rng.uniform_int(ix.offsets));
    const int rd = layout.row_dim();
    for (int t = 0; t <= layout.k; ++t) {
      const maze::StateF& s = ep.states[off + t];
      const maze::ActionF& a = ep.actions[off + t];
      const double sv[6] = {s.x, s.y, s.vx, s.vy, a.fx, a.fy};
      for (int c = 0; c < 6; ++c)
        row[t * rd + c] = static_cast<float>((sv[c] - stats.mean[c]) / stats.scale[c]);
    }
    for (int c = 0; c < 4; ++c) cond[c] = row[c];
  };
}

// World-unit segments for critic training.
inline optioncritic::SegmentSampler make_segment_sampler(const EpisodeDataset& ds,
                                                         const TrajLayout& layout) {
  const SegmentIndexer ix = SegmentIndexer::of(ds, layout.k);
  return [&ds, ix, layout](Rng& rng) {
    const auto& ep = ds.episodes[rng.uniform_int(ix.episodes)];
    const int off = static_cast<int>(rng.uniform_int(ix.offsets));
    optioncritic::Segment seg;
    const maze::StateF& s0 = ep.states[off];
    seg.s0 = State{s0.x, s0.y, s0.vx, s0.vy};
    seg.o.actions.resize(layout.k);
    seg.o.states.resize(layout.k);
    for (int t = 0; t < layout.k; ++t) {
      seg.o.actions[t] = maze::Action{ep.actions[off + t].fx, ep.actions[off + t].fy};
      const maze::StateF& st = ep.states[off + t + 1];
      seg.o.states[t] = State{st.x, st.y, st.vx, st.vy};
    }
    return seg;
  };
}

// ---------------------------------------------------------------------------
// Diffusion-backed option proposers

inline OptionTraj option_from_row(const float* row, const TrajLayout& layout,
                                  const maze::NormStats& stats, double max_force) {
  OptionTraj o;
  o.actions.resize(layout.k);
  o.states.resize(layout.k);
  const int rd = layout.row_dim();
  auto denorm = [&](int col, double v) { return v * stats.scale[col] + stats.mean[col]; };
  for (int t = 0; t < layout.k; ++t) {
    // clamp to the actuation limits the environment enforces anyway
    o.actions[t].fx = std::clamp(denorm(4, row[t * rd + 4]), -max_force, max_force);
    o.actions[t].fy = std::clamp(denorm(5, row[t * rd + 5]), -max_force, max_force);
    const float* next = row + (t + 1) * rd;
    o.states[t] = State{denorm(0, next[0]), denorm(1, next[1]), denorm(2, next[2]),
                        denorm(3, next[3])};
  }
  return o;
}

inline std::vector<std::pair<int, float>> condition_for(const State& s,
                                                        const maze::NormStats& stats) {
  const double v[4] = {s.x, s.y, s.vx, s.vy};
  std::vector<std::pair<int, float>> cond;
  cond.reserve(4);
  for (int c = 0; c < 4; ++c)
    cond.emplace_back(c, static_cast<float>((v[c] - stats.mean[c]) / stats.scale[c]));
  return cond;
}

// Proposer with a fixed guidance mode (none or diversity); the formula is
// irrelevant for these modes, which also makes proposals cacheable during
// critic training.
inline optioncritic::ProposerFn make_proposer(const ParamStore<float>& store,
                                              const diffusion::DenoiserModel<float>& model,
                                              const NoiseSchedule& sched,
                                              const maze::NormStats& stats, double max_force,
                                              diffusion::GuidanceMode mode, double zeta0,
                                              double ridge) {
  const TrajLayout layout = model.layout;
  return [&store, model, sched, stats, max_force, mode, zeta0, ridge, layout](
             const State& s, int m, uint64_t key) {
    const auto cond = condition_for(s, stats);
    Tensor<float> cond_row({size_t(1), size_t(4)});
    for (int c = 0; c < 4; ++c) cond_row[c] = cond[c].second;
    diffusion::GuidanceConfig<float> g;
    g.mode = mode;
    g.zeta0 = zeta0;
    g.ridge = ridge;
    Tensor<float> batch = diffusion::sample_batch<float>(
        sched, model.bind(store, cond_row), m, layout.dim(), cond, g, key);
    std::vector<OptionTraj> out;
    out.reserve(m);
    for (int i = 0; i < m; ++i)
      out.push_back(option_from_row(batch.row_ptr(i), layout, stats, max_force));
    return out;
  };
}

// Planner-facing adapter; Q-guidance needs the active formula so the critic
// gradient can be taken at <s, phi>.
inline planner::ProposerFn make_planner_proposer(const ParamStore<float>& den_store,
                                                 const diffusion::DenoiserModel<float>& model,
                                                 const NoiseSchedule& sched,
                                                 const maze::NormStats& stats, double max_force,
                                                 diffusion::GuidanceMode mode, double zeta0,
                                                 double ridge,
                                                 const ParamStore<float>* critic_store = nullptr,
                                                 const CriticSystem<float>* sys = nullptr) {
  if (mode != diffusion::GuidanceMode::QGuidance) {
    auto base = make_proposer(den_store, model, sched, stats, max_force, mode, zeta0, ridge);
    return [base](const State& s, const ltl::Formula&, int m, uint64_t key) {
      return base(s, m, key);
    };
  }
  if (!critic_store || !sys) throw Error("q-guidance proposer needs a critic");
  const TrajLayout layout = model.layout;
  return [&den_store, model, sched, stats, max_force, zeta0, ridge, layout, critic_store, sys](
             const State& s, const ltl::Formula& phi, int m, uint64_t key) {
    const auto cond = condition_for(s, stats);
    Tensor<float> cond_row({size_t(1), size_t(4)});
    for (int c = 0; c < 4; ++c) cond_row[c] = cond[c].second;

    optioncritic::GraphCache graphs(sys->num_props);
    Tensor<float> embed = rgc_forward(*critic_store, sys->rgc[0], graphs.get(phi));
    const size_t in_dim = sys->input_dim();
    const size_t ed = sys->embed_dim();
    const int rd = layout.row_dim();

    diffusion::GuidanceConfig<float> g;
    g.mode = diffusion::GuidanceMode::QGuidance;
    g.zeta0 = zeta0;
    g.ridge = ridge;
    // gradient of Q(<s,phi>, o) with respect to each chain's Tweedie
    // estimate; option entries are a reordering of the trajectory entries
    g.q_grad = [critic_store, sys, embed, cond_row, layout, in_dim, ed, rd](
                   const Tensor<float>& tw, Tensor<float>& grad) {
      const size_t M = tw.rows();
      Tensor<float> in({M, in_dim});
      for (size_t mrow = 0; mrow < M; ++mrow) {
        float* row = in.row_ptr(mrow);
        for (int c = 0; c < 4; ++c) row[c] = cond_row[c];
        const float* traj = tw.row_ptr(mrow);
        float* opt = row + layout.state_dim;
        for (int t = 0; t < layout.k; ++t) {
          opt[t * rd + 0] = traj[t * rd + 4];
          opt[t * rd + 1] = traj[t * rd + 5];
          for (int c = 0; c < 4; ++c) opt[t * rd + layout.action_dim + c] = traj[(t + 1) * rd + c];
        }
        std::copy(embed.data.begin(), embed.data.end(), row + in_dim - ed);
      }
      MlpTape<float> tape;
      Tensor<float> q = mlp_forward(*critic_store, sys->mlp[0], in, &tape);
      (void)q;
      Tensor<float> dy({M, size_t(1)});
      dy.fill(1.0f);
      Grads scratch;
      Tensor<float> din;
      mlp_backward(*critic_store, sys->mlp[0], tape, dy, scratch, &din);
      grad.shape = {M, static_cast<size_t>(layout.dim())};
      grad.data.assign(M * layout.dim(), 0.0f);
      for (size_t mrow = 0; mrow < M; ++mrow) {
        const float* drow = din.row_ptr(mrow) + layout.state_dim;
        float* gt = grad.row_ptr(mrow);
        for (int t = 0; t < layout.k; ++t) {
          gt[t * rd + 4] += drow[t * rd + 0];
          gt[t * rd + 5] += drow[t * rd + 1];
          for (int c = 0; c < 4; ++c) gt[(t + 1) * rd + c] += drow[t * rd + layout.action_dim + c];
        }
      }
    };
    Tensor<float> batch = diffusion::sample_batch<float>(
        sched, model.bind(den_store, cond_row), m, layout.dim(), cond, g, key);
    std::vector<OptionTraj> out;
    out.reserve(m);
    for (int i = 0; i < m; ++i)
      out.push_back(option_from_row(batch.row_ptr(i), layout, stats, max_force));
    return out;
  };
}

inline planner::QFactory make_q_factory(const ParamStore<float>& store,
                                        const CriticSystem<float>& sys) {
  return [&store, &sys]() -> planner::QValueFn {
    auto graphs = std::make_shared<optioncritic::GraphCache>(sys.num_props);
    return [&store, &sys, graphs](const State& s, const ltl::Formula& phi, const OptionTraj& o) {
      return optioncritic::critic_value(store, sys, 0, *graphs, phi, s, o);
    };
  };
}

// ---------------------------------------------------------------------------
// Task and start sampling

inline std::vector<ltl::Formula> sample_task_set(uint64_t seed, uint64_t stream, int count,
                                                 int max_depth, int num_props,
                                                 const std::set<std::string>& exclude = {}) {
  std::vector<ltl::Formula> tasks;
  std::set<std::string> seen = exclude;
  Rng rng = Rng::derive(seed, 0x7a5cull, stream);
  int attempts = 0;
  while (static_cast<int>(tasks.size()) < count) {
    if (++attempts > count * 1000) throw Error("sample_task_set: cannot find distinct tasks");
    const int depth = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(max_depth)));
    ltl::Formula f = ltl::sample_until_task(rng, depth, num_props);
    const std::string key = ltl::canonical_str(f);
    if (seen.count(key)) continue;
    seen.insert(key);
    tasks.push_back(f);
  }
  return tasks;
}

inline std::vector<std::vector<State>> sample_starts(const MazeSpec& spec, uint64_t seed,
                                                     size_t tasks, int per_task,
                                                     const std::string& fixed = "") {
  std::vector<std::vector<State>> starts(tasks);
  if (!fixed.empty()) {
    State s;
    if (std::sscanf(fixed.c_str(), "%lf,%lf", &s.x, &s.y) != 2)
      throw Error("bad fixed start '" + fixed + "' (expected x,y)");
    for (auto& v : starts) v.assign(static_cast<size_t>(per_task), s);
    return starts;
  }
  const auto cells = spec.free_cells();
  for (size_t t = 0; t < tasks; ++t) {
    Rng rng = Rng::derive(seed, 0x57a7ull, t);
    for (int i = 0; i < per_task; ++i)
      starts[t].push_back(maze::random_free_state<double>(spec, rng, cells));
  }
  return starts;
}

// ---------------------------------------------------------------------------
// Closure over the task set

inline ltl::ProgressionClosure closure_of_tasks(const std::vector<ltl::Formula>& tasks,
                                                int num_props, size_t max_size = 4096) {
  std::vector<ltl::Formula> seeds;
  seeds.reserve(tasks.size());
  for (const auto& t : tasks) seeds.push_back(ltl::canonical(t));
  return ltl::closure(seeds, num_props, max_size);
}

// ---------------------------------------------------------------------------
// Training orchestration (shared by the CLI and the acceptance suite)

struct TrainArtifacts {
  ParamStore<float> denoiser;
  ParamStore<float> critic;
  std::vector<ltl::Formula> tasks;
  ltl::ProgressionClosure closure;
};

inline void append_jsonl(const std::string& path, const nlohmann::json& j) {
  std::ofstream os(path, std::ios::app);
  os << j.dump() << "\n";
}

// Trains (or resumes) the denoiser, then the critics, writing checkpoints and
// line-delimited JSON logs under out_dir.
inline TrainArtifacts train_pipeline(const RunConfig& cfg, const EpisodeDataset& ds,
                                     const std::string& out_dir, bool verbose = false) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const MazeSpec& spec = ds.spec;
  const TrajLayout layout = layout_from_config(cfg);
  const NoiseSchedule sched = schedule_from_config(cfg);
  const auto model = denoiser_from_config(cfg);

  TrainArtifacts art;
  art.tasks = sample_task_set(cfg.seed, 1, cfg.eval.tasks, cfg.eval.task_depth,
                              spec.num_props());
  art.closure = closure_of_tasks(art.tasks, spec.num_props());

  const std::string den_path = out_dir + "/denoiser.ckpt";
  const std::string critic_path = out_dir + "/critic.ckpt";
  const std::string log_path = out_dir + "/train_log.jsonl";

  // denoiser
  if (fs::exists(den_path)) {
    art.denoiser = load_checkpoint(den_path);
  } else {
    Rng rng = Rng::derive(cfg.seed, 0x1417ull);
    model.init(art.denoiser, rng);
  }
  const uint64_t den_target = static_cast<uint64_t>(cfg.diffusion.train_steps);
  if (art.denoiser.step < den_target) {
    diffusion::DenoiserTrainConfig dcfg;
    dcfg.batches = static_cast<int>(den_target - art.denoiser.step);
    dcfg.batch_size = cfg.diffusion.batch_size;
    dcfg.lr = cfg.diffusion.lr;
    dcfg.seed = cfg.seed;
    auto source = make_segment_source(ds, layout);
    train_denoiser(art.denoiser, model, sched, source, dcfg, [&](int, double loss) {
      nlohmann::json j{{"phase", "denoiser"}, {"step", art.denoiser.step}, {"loss", loss}};
      append_jsonl(log_path, j);
      if (verbose) std::fprintf(stderr, "[denoiser] step %llu loss %.5f\n",
                                static_cast<unsigned long long>(art.denoiser.step), loss);
    });
    save_checkpoint(art.denoiser, den_path);
  }

  // critics
  const maze::NormStats stats = ds.require_stats();
  CriticSystem<float> sys = critic_from_config(cfg, stats, spec.num_props());
  if (fs::exists(critic_path)) {
    art.critic = load_checkpoint(critic_path);
  } else {
    Rng rng = Rng::derive(cfg.seed, 0xc417ull);
    sys.init(art.critic, rng);
  }
  const uint64_t critic_target = static_cast<uint64_t>(cfg.critic.steps);
  if (art.critic.step < critic_target) {
    optioncritic::CriticTrainConfig ccfg;
    ccfg.gamma = cfg.critic.gamma;
    ccfg.batch = cfg.critic.batch;
    ccfg.steps = cfg.critic.steps;
    ccfg.proposals = cfg.critic.proposals;
    ccfg.target_period = cfg.critic.target_period;
    ccfg.polyak = cfg.critic.polyak;
    ccfg.lr = cfg.critic.lr;
    ccfg.target_noise = cfg.critic.target_noise;
    ccfg.noise_clip = cfg.critic.noise_clip;
    ccfg.pool = cfg.critic.pool;
    ccfg.seed = cfg.seed;
    auto sampler = make_segment_sampler(ds, layout);
    auto proposer = make_proposer(art.denoiser, model, sched, stats, spec.max_force,
                                  diffusion::GuidanceMode::Diversity, cfg.diffusion.zeta0,
                                  cfg.diffusion.ridge);
    optioncritic::StepFn env_step = [&spec](const State& s, const maze::Action& a) {
      return maze::step<double>(spec, s, a);
    };
    optioncritic::LabelFn label = [&spec](const State& s, const maze::Action& a) {
      return maze::label_as<double, ltl::TruthAssignment>(spec, s, a);
    };
    train_critics(sampler, art.closure, proposer, env_step, label, ccfg, sys, art.critic,
                  [&](const optioncritic::CriticLogEntry& e) {
                    nlohmann::json j{{"phase", "critic"},
                                     {"step", e.step},
                                     {"loss1", e.loss1},
                                     {"loss2", e.loss2},
                                     {"mean_target", e.mean_target}};
                    append_jsonl(log_path, j);
                    if (verbose)
                      std::fprintf(stderr, "[critic] step %llu loss %.5f/%.5f target %.4f\n",
                                   static_cast<unsigned long long>(e.step), e.loss1, e.loss2,
                                   e.mean_target);
                  });
    save_checkpoint(art.critic, critic_path);
  }
  return art;
}

}  // namespace doppler::pipeline
