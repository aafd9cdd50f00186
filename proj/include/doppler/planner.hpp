#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "doppler/ltl.hpp"
#include "doppler/maze.hpp"
#include "doppler/optioncritic.hpp"

#include <json.hpp>

namespace doppler::planner {

using maze::Action;
using maze::State;
using optioncritic::LabelFn;
using optioncritic::OptionTraj;

using QValueFn = std::function<double(const State&, const ltl::Formula&, const OptionTraj&)>;

// Option proposer at plan time. The formula argument matters only for
// Q-guided sampling; diversity and unguided proposals ignore it.
using ProposerFn =
    std::function<std::vector<OptionTraj>(const State&, const ltl::Formula&, int, uint64_t)>;

struct PlanEpisodeResult {
  ltl::Verdict outcome = ltl::Verdict::Undetermined;
  int steps_to_satisfaction = -1;        // env steps executed when satisfied
  std::vector<State> states;             // executed states, s_0 first
  std::vector<Action> actions;           // executed actions
  std::vector<OptionTraj> plan;          // chosen options, in order
  std::vector<State> plan_states;        // state each option was planned from
  std::vector<ltl::Formula> formula_trace;  // formula after each option
  std::vector<int> perturb_steps;        // env step indices of teleports
};

// Sample M options at s, return the one with the highest Q; ties break toward
// the lowest batch index.
inline OptionTraj plan_step(const State& s, const ltl::Formula& phi, const ProposerFn& proposer,
                            const QValueFn& q, int m_proposals, uint64_t key) {
  if (ltl::is_resolved(phi)) throw Error("plan_step: formula already resolved");
  std::vector<OptionTraj> options = proposer(s, phi, m_proposals, key);
  if (options.empty()) throw Error("plan_step: proposer returned no options");
  size_t best = 0;
  double best_q = q(s, phi, options[0]);
  for (size_t m = 1; m < options.size(); ++m) {
    const double qm = q(s, phi, options[m]);
    if (qm > best_q) {
      best_q = qm;
      best = m;
    }
  }
  return options[best];
}

struct RolloutConfig {
  int m_proposals = 8;
  int budget = 600;          // env step budget T
  bool perturb = false;      // single teleport in [T/4, T/2]
  double perturb_min_dist = 2.0;
  uint64_t key = 0;          // rng stream for this episode
};

// Closed-loop receding-horizon execution. Options run open-loop for their k
// actions through the true dynamics; the formula progresses on every executed
// label and the next option is planned from the actual resulting state.
inline PlanEpisodeResult rollout(const maze::MazeSpec& spec, const State& s0,
                                 const ltl::Formula& phi0, const ProposerFn& proposer,
                                 const QValueFn& q, const RolloutConfig& cfg) {
  ltl::Formula phi = ltl::canonical(phi0);
  if (ltl::is_resolved(phi)) throw Error("rollout: task formula is already resolved");

  Rng rng = Rng::derive(cfg.key, 0x5011ull);
  int perturb_at = -1;
  if (cfg.perturb) {
    const int lo = cfg.budget / 4, hi = cfg.budget / 2;
    perturb_at = lo + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(hi - lo + 1)));
  }

  PlanEpisodeResult res;
  State s = s0;
  res.states.push_back(s);
  int steps = 0;
  uint64_t plan_counter = 0;

  while (steps < cfg.budget && !ltl::is_resolved(phi)) {
    OptionTraj opt = plan_step(s, phi, proposer, q,
                               cfg.m_proposals, Rng::derive(cfg.key, 0x9a11ull, plan_counter).next_u64());
    ++plan_counter;
    res.plan.push_back(opt);
    res.plan_states.push_back(s);

    for (int t = 0; t < opt.k() && steps < cfg.budget; ++t) {
      if (steps == perturb_at) {
        s = maze::perturb(spec, s, rng, cfg.perturb_min_dist);
        res.perturb_steps.push_back(steps);
        res.states.back() = s;  // teleports replace the pre-step state
      }
      const Action a = opt.actions[t];
      const ltl::TruthAssignment sigma =
          maze::label_as<double, ltl::TruthAssignment>(spec, s, a);
      s = maze::step<double>(spec, s, a);
      ++steps;
      res.states.push_back(s);
      res.actions.push_back(a);
      phi = ltl::progress(sigma, phi);
      if (ltl::is_resolved(phi)) break;  // no env steps after resolution
    }
    res.formula_trace.push_back(phi);
  }

  if (ltl::is_true(phi)) {
    res.outcome = ltl::Verdict::Satisfied;
    res.steps_to_satisfaction = steps;
  } else if (ltl::is_false(phi)) {
    res.outcome = ltl::Verdict::Falsified;
  } else {
    res.outcome = ltl::Verdict::Undetermined;
  }
  return res;
}

// Verdict on the *predicted* trajectory: concatenate the chosen options'
// predicted states in order and evaluate the labels they would produce.
inline ltl::Verdict planning_satisfaction(const std::vector<OptionTraj>& plan,
                                          const std::vector<State>& plan_states,
                                          const ltl::Formula& phi0, const LabelFn& label) {
  ltl::Formula phi = ltl::canonical(phi0);
  for (size_t n = 0; n < plan.size(); ++n) {
    const State* s = &plan_states[n];
    for (int t = 0; t < plan[n].k(); ++t) {
      if (ltl::is_resolved(phi)) break;
      phi = ltl::progress(label(*s, plan[n].actions[t]), phi);
      s = &plan[n].states[t];
    }
  }
  if (ltl::is_true(phi)) return ltl::Verdict::Satisfied;
  if (ltl::is_false(phi)) return ltl::Verdict::Falsified;
  return ltl::Verdict::Undetermined;
}

// Open-loop variant: plan a sequence of options chaining from predicted end
// states without touching the environment.
inline ltl::Verdict plan_only(const State& s0, const ltl::Formula& phi0,
                              const ProposerFn& proposer, const QValueFn& q, const LabelFn& label,
                              const RolloutConfig& cfg) {
  ltl::Formula phi = ltl::canonical(phi0);
  if (ltl::is_resolved(phi)) throw Error("plan_only: task formula is already resolved");
  State s = s0;
  int steps = 0;
  uint64_t plan_counter = 0;
  while (steps < cfg.budget && !ltl::is_resolved(phi)) {
    OptionTraj opt = plan_step(s, phi, proposer, q, cfg.m_proposals,
                               Rng::derive(cfg.key, 0x91a2ull, plan_counter).next_u64());
    ++plan_counter;
    const State* cur = &s;
    for (int t = 0; t < opt.k() && steps < cfg.budget; ++t) {
      if (ltl::is_resolved(phi)) break;
      phi = ltl::progress(label(*cur, opt.actions[t]), phi);
      cur = &opt.states[t];
      ++steps;
    }
    s = opt.terminal_state();
  }
  if (ltl::is_true(phi)) return ltl::Verdict::Satisfied;
  if (ltl::is_false(phi)) return ltl::Verdict::Falsified;
  return ltl::Verdict::Undetermined;
}

// ---------------------------------------------------------------------------
// Evaluation suite

struct EvalEpisodeRow {
  std::string method;
  int task = 0;
  int start = 0;
  ltl::Verdict rollout_outcome = ltl::Verdict::Undetermined;
  ltl::Verdict planning_outcome = ltl::Verdict::Undetermined;
  int steps = -1;
  bool perturbed = false;
};

struct EvalAggregate {
  std::string method;
  int episodes = 0;
  double satisfaction_rate = 0;   // percent
  double satisfaction_se = 0;
  double failure_rate = 0;        // percent (falsified)
  double failure_se = 0;
  double planning_satisfaction_rate = 0;
  double mean_successful_steps = 0;  // over satisfied episodes
  double successful_steps_se = 0;
};

struct EvalResult {
  std::vector<EvalEpisodeRow> rows;
  EvalAggregate aggregate;
};

inline EvalAggregate aggregate_rows(const std::string& method,
                                    const std::vector<EvalEpisodeRow>& rows) {
  EvalAggregate a;
  a.method = method;
  a.episodes = static_cast<int>(rows.size());
  if (rows.empty()) return a;
  const double n = static_cast<double>(rows.size());
  double sat = 0, fail = 0, plan_sat = 0;
  std::vector<double> steps_ok;
  for (const auto& r : rows) {
    sat += r.rollout_outcome == ltl::Verdict::Satisfied;
    fail += r.rollout_outcome == ltl::Verdict::Falsified;
    plan_sat += r.planning_outcome == ltl::Verdict::Satisfied;
    if (r.rollout_outcome == ltl::Verdict::Satisfied) steps_ok.push_back(r.steps);
  }
  const double p_sat = sat / n, p_fail = fail / n;
  a.satisfaction_rate = 100.0 * p_sat;
  a.satisfaction_se = 100.0 * std::sqrt(p_sat * (1 - p_sat) / n);
  a.failure_rate = 100.0 * p_fail;
  a.failure_se = 100.0 * std::sqrt(p_fail * (1 - p_fail) / n);
  a.planning_satisfaction_rate = 100.0 * plan_sat / n;
  if (!steps_ok.empty()) {
    double mean = 0;
    for (double s : steps_ok) mean += s;
    mean /= static_cast<double>(steps_ok.size());
    double var = 0;
    for (double s : steps_ok) var += (s - mean) * (s - mean);
    var = steps_ok.size() > 1 ? var / static_cast<double>(steps_ok.size() - 1) : 0.0;
    a.mean_successful_steps = mean;
    a.successful_steps_se = std::sqrt(var / static_cast<double>(steps_ok.size()));
  }
  return a;
}

struct EvalConfig {
  RolloutConfig rollout;
  uint64_t seed = 1;
  std::string method = "diversity";
};

// Fresh Q evaluator per episode so per-episode caches stay thread-local.
using QFactory = std::function<QValueFn()>;

inline EvalResult evaluate_suite(const maze::MazeSpec& spec,
                                 const std::vector<ltl::Formula>& tasks,
                                 const std::vector<std::vector<State>>& starts,
                                 const ProposerFn& proposer, const QFactory& make_q,
                                 const EvalConfig& cfg) {
  if (tasks.empty()) throw Error("evaluate_suite: no tasks given");
  if (starts.size() != tasks.size()) throw Error("evaluate_suite: starts/tasks mismatch");
  const LabelFn label = [&spec](const State& s, const Action& a) {
    return maze::label_as<double, ltl::TruthAssignment>(spec, s, a);
  };

  std::vector<std::pair<int, int>> jobs;
  for (size_t t = 0; t < tasks.size(); ++t)
    for (size_t s = 0; s < starts[t].size(); ++s) jobs.emplace_back(int(t), int(s));

  EvalResult out;
  out.rows.resize(jobs.size());
  parallel_for(jobs.size(), [&](size_t j) {
    const auto [task_id, start_id] = jobs[j];
    RolloutConfig rc = cfg.rollout;
    rc.key = optioncritic::splitmix64_key(cfg.seed, static_cast<uint64_t>(task_id) + 1,
                                          static_cast<uint64_t>(start_id) + 1);
    const QValueFn q = make_q();
    const PlanEpisodeResult r =
        rollout(spec, starts[task_id][start_id], tasks[task_id], proposer, q, rc);
    EvalEpisodeRow row;
    row.method = cfg.method;
    row.task = task_id;
    row.start = start_id;
    row.rollout_outcome = r.outcome;
    row.planning_outcome = planning_satisfaction(r.plan, r.plan_states, tasks[task_id], label);
    row.steps = r.steps_to_satisfaction;
    row.perturbed = !r.perturb_steps.empty();
    out.rows[j] = row;
  });
  out.aggregate = aggregate_rows(cfg.method, out.rows);
  return out;
}

// ---------------------------------------------------------------------------
// Report emission

inline std::string eval_csv_header() {
  return "method,task,start,outcome,planning_outcome,steps,perturbed";
}

inline std::string to_csv_row(const EvalEpisodeRow& r) {
  return r.method + "," + std::to_string(r.task) + "," + std::to_string(r.start) + "," +
         ltl::to_string(r.rollout_outcome) + "," + ltl::to_string(r.planning_outcome) + "," +
         std::to_string(r.steps) + "," + (r.perturbed ? "1" : "0");
}

inline nlohmann::json to_json(const EvalAggregate& a) {
  nlohmann::json j;
  j["method"] = a.method;
  j["episodes"] = a.episodes;
  j["satisfaction_rate"] = a.satisfaction_rate;
  j["satisfaction_se"] = a.satisfaction_se;
  j["failure_rate"] = a.failure_rate;
  j["failure_se"] = a.failure_se;
  j["planning_satisfaction_rate"] = a.planning_satisfaction_rate;
  j["mean_successful_steps"] = a.mean_successful_steps;
  j["successful_steps_se"] = a.successful_steps_se;
  return j;
}

}  // namespace doppler::planner
