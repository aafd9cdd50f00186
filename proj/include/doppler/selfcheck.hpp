#pragma once

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "doppler/config.hpp"
#include "doppler/diffusion.hpp"
#include "doppler/ltl_oracle.hpp"
#include "doppler/maze.hpp"
#include "doppler/nn.hpp"
#include "doppler/pipeline.hpp"

namespace doppler::selfcheck {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace detail {

// central finite difference of a scalar function of a parameter vector
template <typename F>
double fd_max_rel_error(std::vector<double>& x, const std::vector<double>& grad, F&& f,
                        double eps = 1e-5) {
  double worst = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + eps;
    const double hi = f();
    x[i] = keep - eps;
    const double lo = f();
    x[i] = keep;
    const double fd = (hi - lo) / (2 * eps);
    const double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-6});
    worst = std::max(worst, std::abs(fd - grad[i]) / denom);
  }
  return worst;
}

}  // namespace detail

inline CheckResult check_ltl_oracle() {
  CheckResult r{"ltl-progression-oracle"};
  const int num_props = 2;
  auto formulas = ltl_oracle::enumerate_formulas(2, num_props);
  size_t mismatches = 0, total = 0;
  for (const auto& f : formulas) {
    for (int len = 0; len <= 3; ++len) {
      ltl_oracle::for_each_trace(len, num_props, [&](const std::vector<ltl::TruthAssignment>& tr) {
        ++total;
        if (ltl::evaluate_trace(tr, ltl::canonical(f)) != ltl_oracle::verdict(tr, f))
          ++mismatches;
      });
    }
  }
  r.pass = mismatches == 0;
  r.detail = std::to_string(total) + " cases, " + std::to_string(mismatches) + " mismatches";
  return r;
}

inline CheckResult check_closure_fixpoint() {
  CheckResult r{"ltl-closure-fixpoint"};
  const auto f = ltl::parse("!p3 U (p0 & (!p1 U p4))", 5);
  const auto cl = ltl::closure({ltl::canonical(f)}, 5);
  bool closed = true;
  for (const auto& g : cl.formulas)
    for (uint64_t bits = 0; bits < 32 && closed; ++bits)
      closed = cl.id_of(ltl::progress(ltl::TruthAssignment(bits, 5), g)) >= 0;
  const auto recl = ltl::closure(cl.formulas, 5);
  r.pass = closed && recl.size() == cl.size() && cl.size() == 5;
  r.detail = "size " + std::to_string(cl.size()) + (closed ? ", closed" : ", NOT closed");
  return r;
}

inline CheckResult check_mlp_gradients() {
  CheckResult r{"grad-mlp"};
  Rng rng(7);
  ParamStore<double> store;
  MlpSpec spec{"m/", {5, 8, 7, 3}};
  mlp_init(store, spec, rng, 1.0);
  Tensor<double> x({4, 5});
  for (auto& v : x.data) v = rng.normal();
  Tensor<double> w({4, 3});
  for (auto& v : w.data) v = rng.normal();
  auto loss = [&]() {
    Tensor<double> y = mlp_forward(store, spec, x);
    double s = 0;
    for (size_t i = 0; i < y.numel(); ++i) s += w.data[i] * y.data[i];
    return s;
  };
  MlpTape<double> tape;
  mlp_forward(store, spec, x, &tape);
  std::map<std::string, Tensor<double>> grads;
  Tensor<double> dx;
  mlp_backward(store, spec, tape, w, grads, &dx);
  double worst = 0;
  for (auto& [name, g] : grads)
    worst = std::max(worst, detail::fd_max_rel_error(store.at(name).data, g.data, loss));
  worst = std::max(worst, detail::fd_max_rel_error(x.data, dx.data, loss));
  r.pass = worst < 1e-4;
  r.detail = "max rel err " + std::to_string(worst);
  return r;
}

inline CheckResult check_rgc_gradients() {
  CheckResult r{"grad-rgc"};
  Rng rng(11);
  ParamStore<double> store;
  RgcSpec spec;
  spec.prefix = "g/";
  spec.feat_dim = static_cast<size_t>(ltl::kNumGraphKinds + 3);
  spec.embed_dim = 6;
  spec.rounds = 2;
  rgc_init(store, spec, rng);
  const auto f = ltl::canonical(ltl::parse("!p0 U (p1 & (!p2 U p0))", 3));
  const LabeledGraph g = ltl::formula_to_graph(f, 3);
  Tensor<double> w({size_t(1), spec.embed_dim});
  for (auto& v : w.data) v = rng.normal();
  auto loss = [&]() {
    Tensor<double> e = rgc_forward(store, spec, g);
    double s = 0;
    for (size_t i = 0; i < e.numel(); ++i) s += w.data[i] * e.data[i];
    return s;
  };
  RgcTape<double> tape;
  rgc_forward(store, spec, g, &tape);
  std::map<std::string, Tensor<double>> grads;
  rgc_backward(store, spec, tape, w, grads);
  double worst = 0;
  for (auto& [name, gr] : grads)
    worst = std::max(worst, detail::fd_max_rel_error(store.at(name).data, gr.data, loss));
  r.pass = worst < 1e-4;
  r.detail = "max rel err " + std::to_string(worst);
  return r;
}

inline CheckResult check_logdet_gradient() {
  CheckResult r{"grad-logdet"};
  Rng rng(13);
  const size_t M = 3, D = 10;
  const auto sched = diffusion::NoiseSchedule::default_linear(32);
  const int i = 20;
  Tensor<double> x({M, D}), eps({M, D});
  for (auto& v : x.data) v = rng.normal();
  for (auto& v : eps.data) v = rng.normal();
  auto tweedie_of = [&](const Tensor<double>& xi) {
    Tensor<double> tw({M, D});
    for (size_t m = 0; m < M; ++m)
      diffusion::tweedie_estimate(sched, xi.row_ptr(m), eps.row_ptr(m), D, i, tw.row_ptr(m));
    return tw;
  };
  auto logdet_of = [&]() {
    Tensor<double> tw = tweedie_of(x);
    Tensor<double> unused;
    return diffusion::logdet_similarity_grad(tw, 1e-3, {}, unused);
  };
  Tensor<double> tw = tweedie_of(x);
  Tensor<double> g;
  diffusion::logdet_similarity_grad(tw, 1e-3, {}, g);
  // chain through the (frozen-eps) Tweedie map
  const double inv_sa = 1.0 / std::sqrt(sched.alpha_bar(i));
  for (auto& v : g.data) v *= inv_sa;
  const double worst = detail::fd_max_rel_error(x.data, g.data, logdet_of);
  r.pass = worst < 1e-3;
  r.detail = "max rel err " + std::to_string(worst);
  return r;
}

inline CheckResult check_tweedie_inversion(const diffusion::NoiseSchedule& sched) {
  CheckResult r{"tweedie-inversion"};
  Rng rng(17);
  const size_t D = 24;
  std::vector<double> tau0(D), taui(D), eps(D), rec(D);
  for (auto& v : tau0) v = rng.normal() * 2.0;
  double worst = 0;
  for (int i = 1; i <= sched.N; ++i) {
    diffusion::forward_noise(sched, tau0.data(), D, i, rng, taui.data(), eps.data());
    diffusion::tweedie_estimate(sched, taui.data(), eps.data(), D, i, rec.data());
    for (size_t j = 0; j < D; ++j) worst = std::max(worst, std::abs(rec[j] - tau0[j]));
  }
  r.pass = worst < 1e-6;
  r.detail = "max |recovered - original| " + std::to_string(worst);
  return r;
}

inline CheckResult check_schedule(const diffusion::NoiseSchedule& sched) {
  CheckResult r{"schedule-sanity"};
  try {
    sched.validate();
    const double abn = sched.alpha_bar(sched.N);
    r.pass = abn < 0.01;
    r.detail = "alpha_bar(N) = " + std::to_string(abn);
  } catch (const Error& e) {
    r.pass = false;
    r.detail = e.what();
  }
  return r;
}

inline CheckResult check_env_collisions(const maze::MazeSpec& spec, int trials = 20000) {
  CheckResult r{"env-collision"};
  Rng rng(19);
  const auto cells = spec.free_cells();
  int violations = 0;
  for (int t = 0; t < trials; ++t) {
    maze::State s = maze::random_free_state<double>(spec, rng, cells);
    s.vx = rng.uniform(-spec.max_speed, spec.max_speed);
    s.vy = rng.uniform(-spec.max_speed, spec.max_speed);
    const maze::Action a{rng.uniform(-spec.max_force, spec.max_force),
                         rng.uniform(-spec.max_force, spec.max_force)};
    const maze::State n = maze::step<double>(spec, s, a);
    if (spec.wall_at_pos(n.x, n.y)) ++violations;
    const double sp = std::sqrt(n.vx * n.vx + n.vy * n.vy);
    if (sp > spec.max_speed + 1e-9) ++violations;
  }
  r.pass = violations == 0;
  r.detail = std::to_string(trials) + " transitions, " + std::to_string(violations) +
             " violations";
  return r;
}

inline CheckResult check_checkpoint_roundtrip() {
  CheckResult r{"checkpoint-roundtrip"};
  Rng rng(23);
  ParamStore<float> store;
  MlpSpec spec{"c/", {3, 4, 2}};
  mlp_init(store, spec, rng, 1.0);
  store.step = 41;
  const std::string path =
      (std::filesystem::temp_directory_path() / "doppler_selfcheck.ckpt").string();
  save_checkpoint(store, path);
  const ParamStore<float> loaded = load_checkpoint(path);
  r.pass = stores_equal(store, loaded);
  std::filesystem::remove(path);
  r.detail = r.pass ? "bitwise equal" : "mismatch after reload";
  return r;
}

inline std::vector<CheckResult> run_all(const config::RunConfig& cfg) {
  std::vector<CheckResult> out;
  diffusion::NoiseSchedule sched;
  bool sched_ok = true;
  try {
    sched = pipeline::schedule_from_config(cfg);
  } catch (const Error& e) {
    sched_ok = false;
    out.push_back({"schedule-sanity", false, e.what()});
  }
  out.push_back(check_ltl_oracle());
  out.push_back(check_closure_fixpoint());
  out.push_back(check_mlp_gradients());
  out.push_back(check_rgc_gradients());
  out.push_back(check_logdet_gradient());
  if (sched_ok) {
    out.push_back(check_tweedie_inversion(sched));
    out.push_back(check_schedule(sched));
  }
  out.push_back(check_env_collisions(pipeline::maze_from_config(cfg)));
  out.push_back(check_checkpoint_roundtrip());
  return out;
}

}  // namespace doppler::selfcheck
