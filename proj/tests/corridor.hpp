#pragma once

// Five-cell corridor: a fully enumerable product MDP used to check the
// offline TD training against exact value iteration. States are cell centers
// x in {0..4} (y and velocities pinned to zero), the two fixed options are
// two sign-moves left or right, and the labels are p0 = leftmost cell,
// p1 = rightmost cell.

#include <map>
#include <vector>

#include "doppler/ltl.hpp"
#include "doppler/maze.hpp"
#include "doppler/optioncritic.hpp"

namespace corridor {

using doppler::Rng;
using doppler::ltl::Formula;
using doppler::ltl::ProgressionClosure;
using doppler::ltl::TruthAssignment;
using doppler::maze::Action;
using doppler::maze::State;
using doppler::optioncritic::OptionTraj;
using doppler::optioncritic::Segment;

inline constexpr int kCells = 5;
inline constexpr int kOptionLen = 2;
inline constexpr double kGamma = 0.99;

inline State make_state(int cell) { return State{static_cast<double>(cell), 0, 0, 0}; }
inline int cell_of(const State& s) { return static_cast<int>(std::lround(s.x)); }

inline State env_step(const State& s, const Action& a) {
  int cell = cell_of(s);
  if (a.fx > 0.5) cell += 1;
  if (a.fx < -0.5) cell -= 1;
  cell = std::clamp(cell, 0, kCells - 1);
  return make_state(cell);
}

inline TruthAssignment label(const State& s, const Action&) {
  TruthAssignment sigma(0, 2);
  if (cell_of(s) == 0) sigma.set(0, true);
  if (cell_of(s) == kCells - 1) sigma.set(1, true);
  return sigma;
}

// option d = -1 (left) or +1 (right), rolled through the dynamics
inline OptionTraj make_option(const State& s, int d) {
  OptionTraj o;
  State cur = s;
  for (int t = 0; t < kOptionLen; ++t) {
    const Action a{static_cast<double>(d), 0.0};
    cur = env_step(cur, a);
    o.actions.push_back(a);
    o.states.push_back(cur);
  }
  return o;
}

inline std::vector<OptionTraj> propose(const State& s, int /*m*/, uint64_t /*key*/) {
  return {make_option(s, -1), make_option(s, +1)};
}

inline Segment sample_segment(Rng& rng) {
  const int cell = static_cast<int>(rng.uniform_int(kCells));
  const int dir = rng.uniform_int(2) ? 1 : -1;
  Segment seg;
  seg.s0 = make_state(cell);
  seg.o = make_option(seg.s0, dir);
  return seg;
}

inline ProgressionClosure make_closure() {
  using namespace doppler::ltl;
  return doppler::ltl::closure(
      {canonical(parse("F p1", 2)), canonical(parse("!p0 U p1", 2))}, 2);
}

// hand-set normalization: the corridor never exercises y or the velocities,
// so unit scales keep the critic inputs sane
inline doppler::maze::NormStats stats() {
  doppler::maze::NormStats st;
  st.mean = {2.0, 0, 0, 0, 0, 0};
  st.scale = {1.5, 1, 1, 1, 1, 1};
  return st;
}

// Exact Q* by value iteration over the enumerated product MDP (Bellman form
// with the option-level discount gamma^k and absorbing resolved formulas).
struct ViKey {
  int cell, phi, dir;  // dir 0 = left, 1 = right
  bool operator<(const ViKey& o) const {
    return std::tie(cell, phi, dir) < std::tie(o.cell, o.phi, o.dir);
  }
};

inline std::map<ViKey, double> value_iteration(const ProgressionClosure& cl,
                                               double tol = 1e-12) {
  std::map<ViKey, double> q;
  for (int c = 0; c < kCells; ++c)
    for (int f = 0; f < static_cast<int>(cl.size()); ++f)
      for (int d = 0; d < 2; ++d) q[{c, f, d}] = 0.0;

  const double gamma_k = std::pow(kGamma, kOptionLen);
  for (int iter = 0; iter < 100000; ++iter) {
    double delta = 0.0;
    for (auto& [key, value] : q) {
      const State s = make_state(key.cell);
      const OptionTraj o = make_option(s, key.dir == 0 ? -1 : 1);
      const auto outcome =
          doppler::optioncritic::option_reward(label, s, cl.at(key.phi), o, kGamma);
      double y = outcome.r;
      if (!doppler::ltl::is_resolved(outcome.phi_k)) {
        const int phik = cl.id_of(outcome.phi_k);
        const int cellk = cell_of(o.terminal_state());
        y += gamma_k * std::max(q[{cellk, phik, 0}], q[{cellk, phik, 1}]);
      }
      delta = std::max(delta, std::abs(y - value));
      value = y;
    }
    if (delta < tol) break;
  }
  return q;
}

}  // namespace corridor
