#include <doctest.h>

#include <functional>
#include <set>

#include "doppler/ltl.hpp"
#include "doppler/ltl_oracle.hpp"

using namespace doppler;
using namespace doppler::ltl;

namespace {

TruthAssignment sig(std::initializer_list<int> props, int n = 6) {
  return TruthAssignment::of(n, props);
}

}  // namespace

TEST_CASE("parse: figure formula") {
  const Formula f = parse("!p3 U (p0 & (!p1 U p4))", 6);
  REQUIRE(f->kind == Kind::Until);
  CHECK(f->left->kind == Kind::Not);
  CHECK(f->left->left->atom == 3);
  CHECK(f->right->kind == Kind::And);
  CHECK(f->right->left->atom == 0);
  const Formula inner = f->right->right;
  CHECK(inner->kind == Kind::Until);
  CHECK(inner->left->left->atom == 1);
  CHECK(inner->right->atom == 4);
}

TEST_CASE("parse: literals and errors") {
  CHECK(is_true(parse("true", 2)));
  CHECK(is_false(parse("false", 2)));

  CHECK_THROWS_AS(parse("p0 U", 2), ParseError);
  try {
    parse("p0 U", 2);
  } catch (const ParseError& e) {
    CHECK(e.offset == 4);
  }
  // unknown atom: index beyond |P|
  CHECK_THROWS_AS(parse("p7", 3), ParseError);
  CHECK_THROWS_AS(parse("p0 & ", 2), ParseError);
  CHECK_THROWS_AS(parse("(p0", 2), ParseError);
  CHECK_THROWS_AS(parse("p0 p1", 2), ParseError);
}

TEST_CASE("parse: precedence and associativity") {
  // U binds loosest and is right-associative
  const Formula f = parse("p0 U p1 U p2", 3);
  CHECK(f->kind == Kind::Until);
  CHECK(f->right->kind == Kind::Until);
  // ! > X,F > & > |
  const Formula g = parse("!p0 & p1 | X p2", 3);
  CHECK(g->kind == Kind::Or);
  CHECK(g->left->kind == Kind::And);
  CHECK(g->left->left->kind == Kind::Not);
  CHECK(g->right->kind == Kind::Next);
}

TEST_CASE("print/parse round trip") {
  const char* samples[] = {
      "!p3 U (p0 & (!p1 U p4))", "F p0",         "X (p0 | p1)", "true",
      "((p0 & p1) & p2) U false", "!(p0 U p1)",  "F F p1",      "p0 | (p1 & !p2)",
  };
  for (const char* s : samples) {
    const Formula f = parse(s, 6);
    const Formula g = parse(print(f), 6);
    CHECK(structurally_equal(f, g));
  }
}

TEST_CASE("print/parse round trip on sampled formulas") {
  Rng rng(404);
  for (int i = 0; i < 200; ++i) {
    const int depth = 1 + static_cast<int>(rng.uniform_int(3));
    const Formula f = sample_until_task(rng, depth, 8);
    CHECK(structurally_equal(parse(print(f), 8), f));
    const Formula c = canonical(f);
    CHECK(canonical_str(parse(print(c), 8)) == canonical_str(c));
  }
}

TEST_CASE("desugar") {
  // F phi = true U phi
  const Formula f = desugar(parse("F p0", 2));
  REQUIRE(f->kind == Kind::Until);
  CHECK(is_true(f->left));
  CHECK(f->right->atom == 0);

  CHECK(is_true(desugar(parse("true", 2))));

  const Formula g = desugar(parse("F (F p1)", 2));
  REQUIRE(g->kind == Kind::Until);
  REQUIRE(g->right->kind == Kind::Until);
  CHECK(is_true(g->right->left));
  CHECK(g->right->right->atom == 1);
}

TEST_CASE("progress: single step examples") {
  // satisfying the Until's right side short-circuits
  const Formula f = canonical(parse("!p1 U p4", 6));
  CHECK(is_true(progress(sig({4}), f)));

  CHECK(is_true(progress(sig({}), f_true())));
  CHECK(is_true(progress(sig({0, 1, 2}), f_true())));

  // avoidance violated while the target is still false
  const Formula g = canonical(parse("!p3 U p0", 6));
  CHECK(is_false(progress(sig({3}), g)));

  // no relevant proposition: formula persists
  CHECK(canonically_equal(progress(sig({}), g), g));
}

TEST_CASE("progress_trace") {
  const Formula fp0 = canonical(parse("F p0", 2));
  std::vector<TruthAssignment> tr = {sig({}, 2), sig({0}, 2)};
  CHECK(is_true(progress_trace(tr, fp0)));

  // single step case equals progress
  const Formula g = canonical(parse("!p0 U p1", 2));
  std::vector<TruthAssignment> one = {sig({1}, 2)};
  CHECK(canonically_equal(progress_trace(one, g), progress(sig({1}, 2), g)));

  // false is absorbing regardless of suffix
  const Formula h = canonical(parse("!p3 U p0", 6));
  std::vector<TruthAssignment> bad = {sig({3}), sig({0}), sig({0})};
  CHECK(is_false(progress_trace(bad, h)));
}

TEST_CASE("evaluate_trace verdicts") {
  const Formula fp0 = canonical(parse("F p0", 2));
  CHECK(evaluate_trace(std::vector<TruthAssignment>{sig({0}, 2)}, fp0) == Verdict::Satisfied);

  CHECK(evaluate_trace(std::vector<TruthAssignment>{}, fp0) == Verdict::Undetermined);
  CHECK(evaluate_trace(std::vector<TruthAssignment>{}, f_true()) == Verdict::Satisfied);

  const Formula g = canonical(parse("!p1 U p2", 3));
  std::vector<TruthAssignment> tr = {sig({1}, 3), sig({2}, 3)};
  CHECK(evaluate_trace(tr, g) == Verdict::Falsified);
}

TEST_CASE("closure: examples") {
  // {F p0} -> {F p0, true} plus the false sink
  auto cl = closure({canonical(parse("F p0", 2))}, 2);
  CHECK(cl.size() == 3);
  CHECK(cl.id_of(f_true()) >= 0);
  CHECK(cl.id_of(f_false()) >= 0);
  CHECK(canonically_equal(cl.at(0), parse("F p0", 2)));

  auto trivial = closure({f_true()}, 2);
  CHECK(trivial.size() == 2);
}

TEST_CASE("closure: figure formula has exactly the hand-derived members") {
  const Formula phi = canonical(parse("!p3 U (p0 & (!p1 U p4))", 5));
  const Formula inner = canonical(parse("!p1 U p4", 5));
  auto cl = closure({phi}, 5);
  REQUIRE(cl.size() == 5);
  CHECK(cl.id_of(phi) >= 0);
  CHECK(cl.id_of(inner) >= 0);
  CHECK(cl.id_of(canonical(f_or(inner, phi))) >= 0);
  CHECK(cl.id_of(f_true()) >= 0);
  CHECK(cl.id_of(f_false()) >= 0);
}

TEST_CASE("closure: re-closure is the identity") {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const Formula f = sample_until_task(rng, 2, 6);
    auto cl = closure({canonical(f)}, 6);
    auto recl = closure(cl.formulas, 6);
    REQUIRE(recl.size() == cl.size());
    for (const auto& g : cl.formulas) CHECK(recl.id_of(g) >= 0);
  }
}

TEST_CASE("closure: overflow guard") {
  std::vector<Formula> seeds = {canonical(parse("!p0 U (p1 & (!p2 U (p3 & (!p4 U p5))))", 6))};
  CHECK_THROWS_AS(closure(seeds, 6, 3), ClosureOverflow);
}

TEST_CASE("sample_until_task") {
  Rng rng(42);
  const Formula f = sample_until_task(rng, 2, 6);
  REQUIRE(f->kind == Kind::Until);
  CHECK(f->left->kind == Kind::Not);
  CHECK(f->right->kind == Kind::And);
  CHECK(f->right->right->kind == Kind::Until);

  // depth 1: !a U b with a != b
  Rng rng1(43);
  const Formula g = sample_until_task(rng1, 1, 6);
  REQUIRE(g->kind == Kind::Until);
  CHECK(g->left->left->atom != g->right->atom);

  // determinism under a fixed seed
  Rng a(42), b(42);
  CHECK(canonical_str(sample_until_task(a, 2, 6)) == canonical_str(sample_until_task(b, 2, 6)));

  // all atoms pairwise distinct at depth 3
  Rng rng3(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Formula h = sample_until_task(rng3, 3, 6);
    std::set<int> atoms;
    std::function<void(const Formula&)> walk = [&](const Formula& n) {
      if (n->kind == Kind::Atom) atoms.insert(n->atom);
      if (n->left) walk(n->left);
      if (n->right) walk(n->right);
    };
    walk(h);
    CHECK(atoms.size() == 6);
  }

  Rng rng4(1);
  CHECK_THROWS_AS(sample_until_task(rng4, 4, 6), Error);
}

TEST_CASE("formula_to_graph") {
  // single atom: one node, one self-loop
  auto g1 = formula_to_graph(f_atom(0), 3);
  CHECK(g1.num_nodes == 1);
  CHECK(g1.edges[int(EdgeType::SelfLoop)].size() == 1);
  CHECK(g1.edges[int(EdgeType::LeftChild)].empty());

  // Until(true, p0): 3 nodes, 1 left-child, 1 right-child, 2 parents, 3 loops
  auto g3 = formula_to_graph(canonical(parse("F p0", 3)), 3);
  CHECK(g3.num_nodes == 3);
  CHECK(g3.edges[int(EdgeType::LeftChild)].size() == 1);
  CHECK(g3.edges[int(EdgeType::RightChild)].size() == 1);
  CHECK(g3.edges[int(EdgeType::Parent)].size() == 2);
  CHECK(g3.edges[int(EdgeType::SelfLoop)].size() == 3);

  // structurally equal formulas give identical graphs
  auto a = formula_to_graph(canonical(parse("!p0 U (p1 & (!p2 U p0))", 3)), 3);
  auto b = formula_to_graph(canonical(parse("!p0 U (p1 & (!p2 U p0))", 3)), 3);
  CHECK(a == b);
}

TEST_CASE("progression fixed points") {
  for (uint64_t bits = 0; bits < 4; ++bits) {
    CHECK(is_true(progress(TruthAssignment(bits, 2), f_true())));
    CHECK(is_false(progress(TruthAssignment(bits, 2), f_false())));
  }
}

TEST_CASE("progress_trace fold composition") {
  Rng rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    const Formula f = canonical(sample_until_task(rng, 2, 4));
    std::vector<TruthAssignment> t1, t2;
    for (int i = 0; i < 3; ++i) t1.emplace_back(rng.uniform_int(16), 4);
    for (int i = 0; i < 3; ++i) t2.emplace_back(rng.uniform_int(16), 4);
    std::vector<TruthAssignment> t12 = t1;
    t12.insert(t12.end(), t2.begin(), t2.end());
    CHECK(canonically_equal(progress_trace(t12, f), progress_trace(t2, progress_trace(t1, f))));
  }
}

TEST_CASE("progression agrees with independent finite-trace semantics (reduced sweep)") {
  // reduced bounds here; the full depth-3 length-5 sweep is an acceptance
  // criterion
  const int num_props = 2;
  auto formulas = ltl_oracle::enumerate_formulas(2, num_props);
  for (const auto& f : formulas) {
    const Formula c = canonical(f);
    for (int len = 0; len <= 3; ++len) {
      ltl_oracle::for_each_trace(len, num_props,
                                 [&](const std::vector<TruthAssignment>& tr) {
                                   CHECK(evaluate_trace(tr, c) == ltl_oracle::verdict(tr, f));
                                 });
    }
  }
}
