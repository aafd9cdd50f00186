#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "doppler/common.hpp"
#include "doppler/graph.hpp"
#include "doppler/rng.hpp"

namespace doppler::ltl {

// Co-safe LTL over a finite proposition set. Formulas are immutable shared
// trees; every operation here is a pure function, safe to call concurrently.

enum class Kind : uint8_t { True, False, Atom, Not, And, Or, Next, Until, Eventually };

struct FormulaNode;
using Formula = std::shared_ptr<const FormulaNode>;

struct FormulaNode {
  Kind kind;
  int atom = -1;  // valid iff kind == Atom
  Formula left, right;
};

inline Formula make(Kind k, Formula l = nullptr, Formula r = nullptr, int atom = -1) {
  auto n = std::make_shared<FormulaNode>();
  n->kind = k;
  n->atom = atom;
  n->left = std::move(l);
  n->right = std::move(r);
  return n;
}

inline Formula f_true() {
  static const Formula t = make(Kind::True);
  return t;
}
inline Formula f_false() {
  static const Formula f = make(Kind::False);
  return f;
}
inline Formula f_atom(int p) { return make(Kind::Atom, nullptr, nullptr, p); }
inline Formula f_not(Formula c) { return make(Kind::Not, std::move(c)); }
inline Formula f_and(Formula l, Formula r) { return make(Kind::And, std::move(l), std::move(r)); }
inline Formula f_or(Formula l, Formula r) { return make(Kind::Or, std::move(l), std::move(r)); }
inline Formula f_next(Formula c) { return make(Kind::Next, std::move(c)); }
inline Formula f_until(Formula l, Formula r) {
  return make(Kind::Until, std::move(l), std::move(r));
}
inline Formula f_eventually(Formula c) { return make(Kind::Eventually, std::move(c)); }

inline bool is_true(const Formula& f) { return f->kind == Kind::True; }
inline bool is_false(const Formula& f) { return f->kind == Kind::False; }
inline bool is_resolved(const Formula& f) { return is_true(f) || is_false(f); }

// ---------------------------------------------------------------------------
// Printing. Binary operators are always parenthesized, so print output
// reparses to a structurally equal tree regardless of precedence.

inline std::string print(const Formula& f) {
  auto wrap = [](const Formula& c) {
    const std::string s = print(c);
    switch (c->kind) {
      case Kind::True:
      case Kind::False:
      case Kind::Atom:
      case Kind::Not:
        return s;
      default:
        return "(" + s + ")";
    }
  };
  switch (f->kind) {
    case Kind::True: return "true";
    case Kind::False: return "false";
    case Kind::Atom: return "p" + std::to_string(f->atom);
    case Kind::Not: return "!" + wrap(f->left);
    case Kind::Next: return "X " + wrap(f->left);
    case Kind::Eventually: return "F " + wrap(f->left);
    case Kind::And: return "(" + print(f->left) + " & " + print(f->right) + ")";
    case Kind::Or: return "(" + print(f->left) + " | " + print(f->right) + ")";
    case Kind::Until: return "(" + print(f->left) + " U " + print(f->right) + ")";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Parser. Grammar (highest to lowest binding): ! > X,F > & > | > U.
// U is right-associative; & and | are left-associative. Atoms are p0..p{n-1}.

struct ParseError : Error {
  size_t offset;
  ParseError(const std::string& msg, size_t off)
      : Error(msg + " at offset " + std::to_string(off)), offset(off) {}
};

namespace detail {

struct Parser {
  const std::string& text;
  size_t pos = 0;
  int num_props;

  void skip_ws() {
    while (pos < text.size() && (text[pos] == ' ' || text[pos] == '\t' || text[pos] == '\n'))
      ++pos;
  }

  bool eat(char c) {
    skip_ws();
    if (pos < text.size() && text[pos] == c) {
      ++pos;
      return true;
    }
    return false;
  }

  // keyword followed by a non-identifier character
  bool eat_word(const char* w) {
    skip_ws();
    const size_t len = std::strlen(w);
    if (text.compare(pos, len, w) != 0) return false;
    const size_t end = pos + len;
    if (end < text.size() && (std::isalnum(static_cast<unsigned char>(text[end])) || text[end] == '_'))
      return false;
    pos = end;
    return true;
  }

  Formula parse_until() {
    Formula lhs = parse_or();
    skip_ws();
    if (eat_word("U")) {
      Formula rhs = parse_until();  // right-associative
      return f_until(std::move(lhs), std::move(rhs));
    }
    return lhs;
  }

  Formula parse_or() {
    Formula lhs = parse_and();
    while (true) {
      skip_ws();
      if (!eat('|')) return lhs;
      lhs = f_or(std::move(lhs), parse_and());
    }
  }

  Formula parse_and() {
    Formula lhs = parse_unary();
    while (true) {
      skip_ws();
      if (!eat('&')) return lhs;
      lhs = f_and(std::move(lhs), parse_unary());
    }
  }

  Formula parse_unary() {
    skip_ws();
    if (eat('!')) return f_not(parse_unary());
    if (eat_word("X")) return f_next(parse_unary());
    if (eat_word("F")) return f_eventually(parse_unary());
    return parse_primary();
  }

  Formula parse_primary() {
    skip_ws();
    if (pos >= text.size()) throw ParseError("expected formula, found end of input", pos);
    if (eat('(')) {
      Formula f = parse_until();
      if (!eat(')')) throw ParseError("expected ')'", pos);
      return f;
    }
    if (eat_word("true")) return f_true();
    if (eat_word("false")) return f_false();
    if (text[pos] == 'p' && pos + 1 < text.size() &&
        std::isdigit(static_cast<unsigned char>(text[pos + 1]))) {
      const size_t start = pos;
      ++pos;
      long idx = 0;
      while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) {
        idx = idx * 10 + (text[pos] - '0');
        if (idx > 1'000'000) throw ParseError("atom index out of range", start);
        ++pos;
      }
      if (idx >= num_props)
        throw ParseError("unknown atom p" + std::to_string(idx) + " (|P| = " +
                             std::to_string(num_props) + ")",
                         start);
      return f_atom(static_cast<int>(idx));
    }
    throw ParseError("unexpected character '" + std::string(1, text[pos]) + "'", pos);
  }
};

}  // namespace detail

inline Formula parse(const std::string& text, int num_props) {
  detail::Parser p{text, 0, num_props};
  Formula f = p.parse_until();
  p.skip_ws();
  if (p.pos != text.size()) throw ParseError("trailing input", p.pos);
  return f;
}

// ---------------------------------------------------------------------------
// Desugaring and canonicalization.
//
// desugar rewrites F phi into (true U phi); Or stays primitive since its
// progression rule follows directly. canonical() additionally applies the
// fixed simplification ruleset: constant folding plus flattening of And/Or
// with duplicate removal and a deterministic child order. Nothing stronger
// (no BDDs), so canonical forms stay predictable.

inline Formula desugar(const Formula& f) {
  switch (f->kind) {
    case Kind::True:
    case Kind::False:
    case Kind::Atom:
      return f;
    case Kind::Not: return f_not(desugar(f->left));
    case Kind::Next: return f_next(desugar(f->left));
    case Kind::Eventually: return f_until(f_true(), desugar(f->left));
    case Kind::And: return f_and(desugar(f->left), desugar(f->right));
    case Kind::Or: return f_or(desugar(f->left), desugar(f->right));
    case Kind::Until: return f_until(desugar(f->left), desugar(f->right));
  }
  return f;
}

inline std::string canonical_key(const Formula& f);

// Smart constructors: given canonical children, produce the canonical node.
inline Formula mk_not(const Formula& c) {
  if (is_true(c)) return f_false();
  if (is_false(c)) return f_true();
  return f_not(c);
}

inline Formula mk_next(const Formula& c) {
  if (is_resolved(c)) return c;
  return f_next(c);
}

namespace detail {

inline void flatten(Kind k, const Formula& f, std::vector<Formula>& out) {
  if (f->kind == k) {
    flatten(k, f->left, out);
    flatten(k, f->right, out);
  } else {
    out.push_back(f);
  }
}

inline Formula rebuild(Kind k, std::vector<Formula>& kids) {
  // sort by canonical key, drop duplicates, right-nest
  std::vector<std::pair<std::string, Formula>> keyed;
  keyed.reserve(kids.size());
  for (auto& c : kids) keyed.emplace_back(canonical_key(c), c);
  std::sort(keyed.begin(), keyed.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  keyed.erase(std::unique(keyed.begin(), keyed.end(),
                          [](const auto& a, const auto& b) { return a.first == b.first; }),
              keyed.end());
  Formula acc = keyed.back().second;
  for (size_t i = keyed.size() - 1; i-- > 0;)
    acc = make(k, keyed[i].second, acc);
  return acc;
}

}  // namespace detail

inline Formula mk_and(const Formula& l, const Formula& r) {
  if (is_false(l) || is_false(r)) return f_false();
  if (is_true(l)) return r;
  if (is_true(r)) return l;
  std::vector<Formula> kids;
  detail::flatten(Kind::And, l, kids);
  detail::flatten(Kind::And, r, kids);
  return detail::rebuild(Kind::And, kids);
}

inline Formula mk_or(const Formula& l, const Formula& r) {
  if (is_true(l) || is_true(r)) return f_true();
  if (is_false(l)) return r;
  if (is_false(r)) return l;
  std::vector<Formula> kids;
  detail::flatten(Kind::Or, l, kids);
  detail::flatten(Kind::Or, r, kids);
  return detail::rebuild(Kind::Or, kids);
}

inline Formula mk_until(const Formula& l, const Formula& r) {
  if (is_true(r)) return r;   // phi U true = true
  if (is_false(l)) return r;  // false U psi = psi
  // note: (phi U false) is NOT folded to false; a finite prefix never
  // witnesses the falsification, so the formula must stay undetermined
  return f_until(l, r);
}

inline Formula canonical(const Formula& f) {
  switch (f->kind) {
    case Kind::True:
    case Kind::False:
    case Kind::Atom:
      return f;
    case Kind::Not: return mk_not(canonical(f->left));
    case Kind::Next: return mk_next(canonical(f->left));
    case Kind::Eventually: return mk_until(f_true(), canonical(f->left));
    case Kind::And: return mk_and(canonical(f->left), canonical(f->right));
    case Kind::Or: return mk_or(canonical(f->left), canonical(f->right));
    case Kind::Until: return mk_until(canonical(f->left), canonical(f->right));
  }
  return f;
}

// Canonical serialization: printed canonical form, fully parenthesized.
// Bit-exact across platforms; equality of canonical forms equals equality
// of these strings.
inline std::string canonical_key(const Formula& f) { return print(f); }

inline std::string canonical_str(const Formula& f) { return print(canonical(f)); }

inline bool structurally_equal(const Formula& a, const Formula& b) {
  if (a == b) return true;
  if (a->kind != b->kind || a->atom != b->atom) return false;
  if (bool(a->left) != bool(b->left) || bool(a->right) != bool(b->right)) return false;
  if (a->left && !structurally_equal(a->left, b->left)) return false;
  if (a->right && !structurally_equal(a->right, b->right)) return false;
  return true;
}

inline bool canonically_equal(const Formula& a, const Formula& b) {
  return canonical_str(a) == canonical_str(b);
}

// ---------------------------------------------------------------------------
// Truth assignments and progression.

struct TruthAssignment {
  uint64_t bits = 0;
  int n = 0;

  TruthAssignment() = default;
  TruthAssignment(uint64_t b, int size) : bits(b), n(size) {}
  static TruthAssignment of(int size, std::initializer_list<int> true_props) {
    TruthAssignment t{0, size};
    for (int p : true_props) t.bits |= (uint64_t(1) << p);
    return t;
  }
  bool get(int p) const { return (bits >> p) & 1; }
  void set(int p, bool v) {
    if (v)
      bits |= (uint64_t(1) << p);
    else
      bits &= ~(uint64_t(1) << p);
  }
};

// One-step progression. Expects a desugared formula (no F nodes); the result
// is canonical whenever the input is.
inline Formula progress(const TruthAssignment& sigma, const Formula& f) {
  switch (f->kind) {
    case Kind::True: return f_true();
    case Kind::False: return f_false();
    case Kind::Atom: return sigma.get(f->atom) ? f_true() : f_false();
    case Kind::Not: return mk_not(progress(sigma, f->left));
    case Kind::And: return mk_and(progress(sigma, f->left), progress(sigma, f->right));
    case Kind::Or: return mk_or(progress(sigma, f->left), progress(sigma, f->right));
    case Kind::Next: return f->left;
    case Kind::Until:
      return mk_or(progress(sigma, f->right), mk_and(progress(sigma, f->left), f));
    case Kind::Eventually:
      throw Error("progress: formula must be desugared (found F)");
  }
  return f;
}

// Left fold of progress; true/false are fixed points, so stop there early.
template <typename Seq>
Formula progress_trace(const Seq& trace, Formula f) {
  for (const TruthAssignment& sigma : trace) {
    if (is_resolved(f)) return f;
    f = progress(sigma, f);
  }
  return f;
}

enum class Verdict : uint8_t { Satisfied, Falsified, Undetermined };

inline const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::Satisfied: return "satisfied";
    case Verdict::Falsified: return "falsified";
    default: return "undetermined";
  }
}

template <typename Seq>
Verdict evaluate_trace(const Seq& trace, const Formula& f) {
  const Formula g = progress_trace(trace, f);
  if (is_true(g)) return Verdict::Satisfied;
  if (is_false(g)) return Verdict::Falsified;
  return Verdict::Undetermined;
}

// ---------------------------------------------------------------------------
// Progression closure.

struct ClosureOverflow : Error {
  explicit ClosureOverflow(size_t limit)
      : Error("progression closure exceeds max size " + std::to_string(limit) +
              " (formula outside the intended co-safe fragment?)") {}
};

struct ProgressionClosure {
  std::vector<Formula> formulas;                  // canonical, insertion order
  std::unordered_map<std::string, int> index;     // canonical string -> id
  int num_props = 0;

  int id_of(const Formula& f) const {
    auto it = index.find(canonical_str(f));
    return it == index.end() ? -1 : it->second;
  }
  const Formula& at(int id) const { return formulas[static_cast<size_t>(id)]; }
  size_t size() const { return formulas.size(); }
};

// BFS over all 2^|P| assignments until fixpoint. Seeds first, then discovery
// order; True/False are always included (False acts as the absorbing
// falsified label even when unreachable from the seeds).
inline ProgressionClosure closure(const std::vector<Formula>& seeds, int num_props,
                                  size_t max_size = 4096) {
  ProgressionClosure cl;
  cl.num_props = num_props;
  auto insert = [&](const Formula& f) -> bool {
    const std::string key = print(f);  // f already canonical
    if (cl.index.count(key)) return false;
    if (cl.formulas.size() + 1 > max_size) throw ClosureOverflow(max_size);
    cl.index.emplace(key, static_cast<int>(cl.formulas.size()));
    cl.formulas.push_back(f);
    return true;
  };
  for (const Formula& s : seeds) insert(canonical(s));
  const uint64_t num_sigma = uint64_t(1) << num_props;
  for (size_t i = 0; i < cl.formulas.size(); ++i) {
    const Formula f = cl.formulas[i];
    if (is_resolved(f)) continue;
    for (uint64_t bits = 0; bits < num_sigma; ++bits)
      insert(progress(TruthAssignment(bits, num_props), f));
  }
  insert(f_true());
  insert(f_false());
  return cl;
}

// ---------------------------------------------------------------------------
// Task sampler: nested avoid/reach template
//   !a1 U (b1 & (!a2 U (b2 & ...)))
// with all atoms pairwise distinct.

inline Formula sample_until_task(Rng& rng, int depth, int num_props) {
  if (depth < 1) throw Error("sample_until_task: depth must be >= 1");
  if (num_props < 2 * depth)
    throw Error("sample_until_task: need at least " + std::to_string(2 * depth) +
                " propositions for depth " + std::to_string(depth));
  // partial Fisher-Yates draw of 2*depth distinct atoms
  std::vector<int> pool(num_props);
  for (int i = 0; i < num_props; ++i) pool[i] = i;
  std::vector<int> picks;
  for (int i = 0; i < 2 * depth; ++i) {
    const size_t j = i + rng.uniform_int(num_props - i);
    std::swap(pool[i], pool[j]);
    picks.push_back(pool[i]);
  }
  Formula f = f_until(f_not(f_atom(picks[2 * depth - 2])), f_atom(picks[2 * depth - 1]));
  for (int d = depth - 2; d >= 0; --d)
    f = f_until(f_not(f_atom(picks[2 * d])), f_and(f_atom(picks[2 * d + 1]), f));
  return f;
}

// ---------------------------------------------------------------------------
// Graph view for the formula encoder: one node per AST node in deterministic
// pre-order; features are kind one-hot (8 desugared kinds) plus atom one-hot.

inline constexpr int kNumGraphKinds = 8;

inline LabeledGraph formula_to_graph(const Formula& f, int num_props) {
  LabeledGraph g;
  g.feat_dim = kNumGraphKinds + num_props;

  struct Walker {
    LabeledGraph& g;
    int num_props;
    int visit(const Formula& node) {
      const int id = g.num_nodes++;
      g.feats.resize(static_cast<size_t>(g.num_nodes) * g.feat_dim, 0.0f);
      float* row = g.feats.data() + static_cast<size_t>(id) * g.feat_dim;
      if (node->kind == Kind::Eventually)
        throw Error("formula_to_graph: formula must be desugared");
      row[static_cast<int>(node->kind)] = 1.0f;
      if (node->kind == Kind::Atom) row[kNumGraphKinds + node->atom] = 1.0f;
      g.add_edge(id, id, EdgeType::SelfLoop);
      if (node->left) {
        const int c = visit(node->left);
        g.add_edge(c, id, EdgeType::LeftChild);
        g.add_edge(id, c, EdgeType::Parent);
      }
      if (node->right) {
        const int c = visit(node->right);
        g.add_edge(c, id, EdgeType::RightChild);
        g.add_edge(id, c, EdgeType::Parent);
      }
      return id;
    }
  };
  Walker w{g, num_props};
  w.visit(f);
  return g;
}

}  // namespace doppler::ltl
