#pragma once

#include <algorithm>
#include <functional>
#include <vector>

#include "doppler/ltl.hpp"

namespace doppler::ltl_oracle {

// Independent finite-trace semantics: three-valued evaluation by direct
// recursion over subformulas and trace positions. Deliberately shares no code
// with the progression path; it exists to cross-check it.

enum class Tri : int { False = 0, Unknown = 1, True = 2 };

inline Tri not3(Tri a) {
  if (a == Tri::True) return Tri::False;
  if (a == Tri::False) return Tri::True;
  return Tri::Unknown;
}
inline Tri and3(Tri a, Tri b) { return static_cast<Tri>(std::min(static_cast<int>(a), static_cast<int>(b))); }
inline Tri or3(Tri a, Tri b) { return static_cast<Tri>(std::max(static_cast<int>(a), static_cast<int>(b))); }

// Value of f at position t of the finite trace. Positions at or beyond the
// end know nothing about atoms; the Until tail beyond the end is unknown.
inline Tri tri_eval(const std::vector<ltl::TruthAssignment>& trace, size_t t,
                    const ltl::Formula& f) {
  using ltl::Kind;
  switch (f->kind) {
    case Kind::True: return Tri::True;
    case Kind::False: return Tri::False;
    case Kind::Atom:
      if (t >= trace.size()) return Tri::Unknown;
      return trace[t].get(f->atom) ? Tri::True : Tri::False;
    case Kind::Not: return not3(tri_eval(trace, t, f->left));
    case Kind::And: return and3(tri_eval(trace, t, f->left), tri_eval(trace, t, f->right));
    case Kind::Or: return or3(tri_eval(trace, t, f->left), tri_eval(trace, t, f->right));
    case Kind::Next:
      if (t >= trace.size()) {
        // only constants can resolve past the end
        const Tri v = tri_eval(trace, t + 1, f->left);
        return v;
      }
      return tri_eval(trace, t + 1, f->left);
    case Kind::Until: {
      const Tri now_rhs = tri_eval(trace, t, f->right);
      const Tri now_lhs = tri_eval(trace, t, f->left);
      const Tri tail = t < trace.size() ? tri_eval(trace, t + 1, f) : Tri::Unknown;
      return or3(now_rhs, and3(now_lhs, tail));
    }
    case Kind::Eventually:
      throw Error("tri_eval: formula must be desugared");
  }
  return Tri::Unknown;
}

inline ltl::Verdict verdict(const std::vector<ltl::TruthAssignment>& trace,
                            const ltl::Formula& f) {
  switch (tri_eval(trace, 0, f)) {
    case Tri::True: return ltl::Verdict::Satisfied;
    case Tri::False: return ltl::Verdict::Falsified;
    default: return ltl::Verdict::Undetermined;
  }
}

// All desugared formulas up to the given AST depth (leaves have depth 1) over
// |P| propositions. Grows fast; meant for small exhaustive sweeps.
inline std::vector<ltl::Formula> enumerate_formulas(int max_depth, int num_props) {
  using namespace ltl;
  std::vector<std::vector<Formula>> by_depth(static_cast<size_t>(max_depth) + 1);
  by_depth[1].push_back(f_true());
  by_depth[1].push_back(f_false());
  for (int p = 0; p < num_props; ++p) by_depth[1].push_back(f_atom(p));
  std::vector<Formula> upto = by_depth[1];
  for (int d = 2; d <= max_depth; ++d) {
    std::vector<Formula> strictly_smaller;  // depth <= d-2
    for (int e = 1; e <= d - 2; ++e)
      strictly_smaller.insert(strictly_smaller.end(), by_depth[e].begin(), by_depth[e].end());
    for (const Formula& c : by_depth[d - 1]) {
      by_depth[d].push_back(f_not(c));
      by_depth[d].push_back(f_next(c));
    }
    // binary nodes of depth exactly d: at least one child of depth d-1
    for (const Formula& l : by_depth[d - 1])
      for (const Formula& r : strictly_smaller) {
        by_depth[d].push_back(f_and(l, r));
        by_depth[d].push_back(f_or(l, r));
        by_depth[d].push_back(f_until(l, r));
        by_depth[d].push_back(f_and(r, l));
        by_depth[d].push_back(f_or(r, l));
        by_depth[d].push_back(f_until(r, l));
      }
    for (const Formula& l : by_depth[d - 1])
      for (const Formula& r : by_depth[d - 1]) {
        by_depth[d].push_back(f_and(l, r));
        by_depth[d].push_back(f_or(l, r));
        by_depth[d].push_back(f_until(l, r));
      }
    upto.insert(upto.end(), by_depth[d].begin(), by_depth[d].end());
  }
  return upto;
}

// All truth-assignment traces of exactly the given length.
inline void for_each_trace(int length, int num_props,
                           const std::function<void(const std::vector<ltl::TruthAssignment>&)>& fn) {
  const uint64_t sigmas = uint64_t(1) << num_props;
  std::vector<ltl::TruthAssignment> trace(static_cast<size_t>(length),
                                          ltl::TruthAssignment(0, num_props));
  std::function<void(int)> rec = [&](int pos) {
    if (pos == length) {
      fn(trace);
      return;
    }
    for (uint64_t bits = 0; bits < sigmas; ++bits) {
      trace[static_cast<size_t>(pos)] = ltl::TruthAssignment(bits, num_props);
      rec(pos + 1);
    }
  };
  rec(0);
}

}  // namespace doppler::ltl_oracle
