#include <doctest.h>

#include "doppler/planner.hpp"

using namespace doppler;
using namespace doppler::planner;
using ltl::canonical;
using ltl::parse;

namespace {

// option that replays fixed actions through the true dynamics from s
OptionTraj pd_option(const maze::MazeSpec& spec, const State& s, double tx, double ty, int k) {
  OptionTraj o;
  State cur = s;
  for (int t = 0; t < k; ++t) {
    Action a{spec.pd_kp * (tx - cur.x) - spec.pd_kd * cur.vx,
             spec.pd_kp * (ty - cur.y) - spec.pd_kd * cur.vy};
    a.fx = std::clamp(a.fx, -spec.max_force, spec.max_force);
    a.fy = std::clamp(a.fy, -spec.max_force, spec.max_force);
    cur = maze::step<double>(spec, cur, a);
    o.actions.push_back(a);
    o.states.push_back(cur);
  }
  return o;
}

// proposer steering every option toward one region center
ProposerFn toward_region(const maze::MazeSpec& spec, int region, int k) {
  const auto& r = spec.regions[region];
  const double tx = r.cx + 0.5, ty = r.cy + 0.5;
  return [&spec, tx, ty, k](const State& s, const ltl::Formula&, int m, uint64_t) {
    std::vector<OptionTraj> out;
    for (int i = 0; i < m; ++i) out.push_back(pd_option(spec, s, tx, ty, k));
    return out;
  };
}

const QValueFn zero_q = [](const State&, const ltl::Formula&, const OptionTraj&) {
  return 0.0;
};

}  // namespace

TEST_CASE("plan_step: argmax selection and tie breaking") {
  maze::MazeSpec spec = maze::default_maze();
  const State s{2.5, 1.5, 0, 0};
  const auto phi = canonical(parse("F p0", 6));

  // proposer labels options by their first action's magnitude
  ProposerFn proposer = [&spec](const State& st, const ltl::Formula&, int m, uint64_t) {
    std::vector<OptionTraj> out;
    for (int i = 0; i < m; ++i) {
      OptionTraj o;
      o.actions.push_back(Action{0.1 * i, 0});
      o.states.push_back(maze::step<double>(spec, st, o.actions[0]));
      out.push_back(o);
    }
    return out;
  };

  // M = 1 returns the sole sample
  auto only = plan_step(s, phi, proposer, zero_q, 1, 0);
  CHECK(only.actions[0].fx == 0.0);

  // argmax picks the second of (0.2, 0.7)
  QValueFn q = [](const State&, const ltl::Formula&, const OptionTraj& o) {
    return o.actions[0].fx < 0.05 ? 0.2 : 0.7;
  };
  auto best = plan_step(s, phi, proposer, q, 2, 0);
  CHECK(best.actions[0].fx == doctest::Approx(0.1));

  // adding a constant to Q leaves the choice unchanged
  QValueFn q_shift = [&q](const State& st, const ltl::Formula& f, const OptionTraj& o) {
    return q(st, f, o) + 123.0;
  };
  auto best2 = plan_step(s, phi, proposer, q_shift, 2, 0);
  CHECK(best2.actions[0].fx == doctest::Approx(0.1));

  // exact ties break toward the lowest index
  auto tie = plan_step(s, phi, proposer, zero_q, 4, 0);
  CHECK(tie.actions[0].fx == 0.0);

  // resolved formulas are rejected
  CHECK_THROWS_AS(plan_step(s, ltl::f_true(), proposer, zero_q, 1, 0), Error);
}

TEST_CASE("rollout: resolved task input is a precondition error") {
  maze::MazeSpec spec = maze::default_maze();
  RolloutConfig cfg;
  CHECK_THROWS_AS(rollout(spec, State{2.5, 1.5, 0, 0}, ltl::f_true(),
                          toward_region(spec, 0, 8), zero_q, cfg),
                  Error);
}

TEST_CASE("rollout: start inside the reach region satisfies at the first step") {
  maze::MazeSpec spec = maze::default_maze();
  const auto& r1 = spec.regions[1];
  const State s0{r1.cx + 0.5, r1.cy + 0.5, 0, 0};
  const auto task = canonical(parse("!p0 U p1", 6));
  RolloutConfig cfg;
  cfg.m_proposals = 2;
  cfg.budget = 100;
  auto res = rollout(spec, s0, task, toward_region(spec, 3, 8), zero_q, cfg);
  CHECK(res.outcome == ltl::Verdict::Satisfied);
  CHECK(res.steps_to_satisfaction == 1);
  CHECK(res.actions.size() == 1);  // no env steps after resolution
}

TEST_CASE("rollout: reaches a region under a steering proposer; budget monotone") {
  maze::MazeSpec spec = maze::default_maze();
  const State s0{5.5, 4.5, 0, 0};
  const auto task = canonical(parse("F p1", 6));  // region 1 at (5.5, 1.5)
  auto proposer = toward_region(spec, 1, 8);

  std::vector<int> budgets = {10, 40, 120, 400};
  int prev_sat = 0;
  for (int budget : budgets) {
    RolloutConfig cfg;
    cfg.m_proposals = 2;
    cfg.budget = budget;
    auto res = rollout(spec, s0, task, proposer, zero_q, cfg);
    const int sat = res.outcome == ltl::Verdict::Satisfied ? 1 : 0;
    CHECK(sat >= prev_sat);  // absorbing outcomes: more budget never hurts
    prev_sat = sat;
    // the executed trace agrees with the recorded outcome
    std::vector<ltl::TruthAssignment> labels;
    for (size_t t = 0; t < res.actions.size(); ++t)
      labels.push_back(
          maze::label_as<double, ltl::TruthAssignment>(spec, res.states[t], res.actions[t]));
    CHECK(ltl::evaluate_trace(labels, task) == res.outcome);
  }
  CHECK(prev_sat == 1);  // the largest budget suffices
}

TEST_CASE("rollout: replanning starts from the executed state") {
  maze::MazeSpec spec = maze::default_maze();
  const State s0{1.5, 1.5, 0, 0};
  const auto task = canonical(parse("F p3", 6));
  std::vector<State> seen;
  ProposerFn recording = [&](const State& s, const ltl::Formula&, int m, uint64_t) {
    seen.push_back(s);
    std::vector<OptionTraj> out;
    for (int i = 0; i < m; ++i) out.push_back(pd_option(spec, s, 3.5, 1.5, 4));
    return out;
  };
  RolloutConfig cfg;
  cfg.m_proposals = 1;
  cfg.budget = 20;  // five options of four steps
  auto res = rollout(spec, s0, task, recording, zero_q, cfg);
  REQUIRE(seen.size() == res.plan.size());
  for (size_t n = 0; n < seen.size(); ++n) {
    // the state each option was planned from is the actual executed state
    CHECK(seen[n].x == res.states[n * 4].x);
    CHECK(seen[n].y == res.states[n * 4].y);
    CHECK(seen[n].x == res.plan_states[n].x);
  }
}

TEST_CASE("rollout: perturbation events are recorded and outcomes stay consistent") {
  maze::MazeSpec spec = maze::default_maze();
  const State s0{1.5, 1.5, 0, 0};
  const auto task = canonical(parse("F p3", 6));
  RolloutConfig cfg;
  cfg.m_proposals = 1;
  cfg.budget = 120;
  cfg.perturb = true;
  cfg.key = 5;
  // parked proposer: the agent only moves if teleported
  ProposerFn parked = [&spec](const State& s, const ltl::Formula&, int m, uint64_t) {
    std::vector<OptionTraj> out;
    for (int i = 0; i < m; ++i) {
      OptionTraj o;
      for (int t = 0; t < 8; ++t) {
        o.actions.push_back(Action{0, 0});
        o.states.push_back(s);
      }
      out.push_back(o);
    }
    return out;
  };
  auto res = rollout(spec, s0, task, parked, zero_q, cfg);
  REQUIRE(res.perturb_steps.size() == 1);
  CHECK(res.perturb_steps[0] >= cfg.budget / 4);
  CHECK(res.perturb_steps[0] <= cfg.budget / 2);
  // outcome matches the executed labels including the teleport
  std::vector<ltl::TruthAssignment> labels;
  for (size_t t = 0; t < res.actions.size(); ++t)
    labels.push_back(
        maze::label_as<double, ltl::TruthAssignment>(spec, res.states[t], res.actions[t]));
  CHECK(ltl::evaluate_trace(labels, task) == res.outcome);
}

TEST_CASE("planning_satisfaction: predicted success can diverge from execution") {
  maze::MazeSpec spec = maze::default_maze();
  const auto label = [&spec](const State& s, const Action& a) {
    return maze::label_as<double, ltl::TruthAssignment>(spec, s, a);
  };
  const auto task = canonical(parse("F p5", 6));  // region 5 at (3.5, 2.5)
  const State s0{3.5, 1.5, 0, 0};

  // optimistic proposer: predicted states sweep through region 5 while the
  // actions do nothing, so execution never moves
  ProposerFn optimistic = [&](const State& s, const ltl::Formula&, int m, uint64_t) {
    std::vector<OptionTraj> out;
    for (int i = 0; i < m; ++i) {
      OptionTraj o;
      for (int t = 0; t < 6; ++t) {
        o.actions.push_back(Action{0, 0});
        o.states.push_back(State{3.5, 2.5, 0, 0});
      }
      out.push_back(o);
    }
    return out;
  };
  RolloutConfig cfg;
  cfg.m_proposals = 1;
  cfg.budget = 30;
  auto res = rollout(spec, s0, task, optimistic, zero_q, cfg);
  CHECK(res.outcome == ltl::Verdict::Undetermined);
  CHECK(planning_satisfaction(res.plan, res.plan_states, task, label) ==
        ltl::Verdict::Satisfied);

  // consistent proposer and deterministic execution: planning equals rollout
  auto honest = toward_region(spec, 5, 8);
  auto res2 = rollout(spec, s0, task, honest, zero_q, cfg);
  CHECK(res2.outcome == ltl::Verdict::Satisfied);
  CHECK(planning_satisfaction(res2.plan, res2.plan_states, task, label) == res2.outcome);

  // open-loop plan-only mode chains predicted states without the env
  CHECK(plan_only(s0, task, honest, zero_q, label, cfg) == ltl::Verdict::Satisfied);
  CHECK(plan_only(s0, task, optimistic, zero_q, label, cfg) == ltl::Verdict::Satisfied);

  // empty plan: undetermined
  CHECK(planning_satisfaction({}, {}, task, label) == ltl::Verdict::Undetermined);
}

TEST_CASE("evaluate_suite: aggregation, determinism, empty-task guard") {
  maze::MazeSpec spec = maze::default_maze();
  const auto task = canonical(parse("!p0 U p1", 6));
  const auto& r1 = spec.regions[1];
  // every episode starts inside the reach region: satisfied in exactly 1 step
  std::vector<std::vector<State>> starts{{State{r1.cx + 0.5, r1.cy + 0.5, 0, 0},
                                          State{r1.cx + 0.4, r1.cy + 0.6, 0, 0}}};
  auto proposer = toward_region(spec, 3, 8);
  QFactory qf = []() { return zero_q; };
  EvalConfig cfg;
  cfg.rollout.m_proposals = 2;
  cfg.rollout.budget = 50;

  auto res = evaluate_suite(spec, {task}, starts, proposer, qf, cfg);
  CHECK(res.aggregate.episodes == 2);
  CHECK(res.aggregate.satisfaction_rate == 100.0);
  CHECK(res.aggregate.failure_rate == 0.0);
  CHECK(res.aggregate.mean_successful_steps == doctest::Approx(1.0));

  auto res2 = evaluate_suite(spec, {task}, starts, proposer, qf, cfg);
  for (size_t i = 0; i < res.rows.size(); ++i) {
    CHECK(res.rows[i].rollout_outcome == res2.rows[i].rollout_outcome);
    CHECK(res.rows[i].steps == res2.rows[i].steps);
  }

  CHECK_THROWS_AS(evaluate_suite(spec, {}, {}, proposer, qf, cfg), Error);
}
