#pragma once

#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "doppler/diffusion.hpp"
#include "doppler/ltl.hpp"
#include "doppler/maze.hpp"
#include "doppler/nn.hpp"

namespace doppler::optioncritic {

using maze::Action;
using maze::State;

// An option is a fixed-horizon trajectory of (action, next state) pairs. The
// initiation set is the whole state space, termination is deterministic after
// k steps, so neither is stored.
struct OptionTraj {
  std::vector<Action> actions;  // a_0 .. a_{k-1}
  std::vector<State> states;    // s_1 .. s_k

  int k() const { return static_cast<int>(actions.size()); }
  const State& terminal_state() const { return states.back(); }
};

using LabelFn = std::function<ltl::TruthAssignment(const State&, const Action&)>;
using StepFn = std::function<State(const State&, const Action&)>;

// ---------------------------------------------------------------------------
// Product-MDP rewards

// +1 when the formula resolves to true on this assignment, -1 when it
// resolves to false, 0 otherwise (including when already resolved).
struct StepReward {
  double r = 0.0;
  ltl::Formula next;
};

inline StepReward step_reward(const ltl::TruthAssignment& sigma, const ltl::Formula& phi) {
  StepReward out;
  out.next = ltl::progress(sigma, phi);
  if (ltl::is_true(out.next) && !ltl::is_true(phi))
    out.r = 1.0;
  else if (ltl::is_false(out.next) && !ltl::is_false(phi))
    out.r = -1.0;
  return out;
}

// Discounted sum of step rewards along the option; the progressed formula
// after the option's k labels comes back with it. Rewards are zero once the
// formula resolves, so at most one nonzero term occurs.
struct OptionOutcome {
  double r = 0.0;
  ltl::Formula phi_k;
};

inline OptionOutcome option_reward(const LabelFn& label, const State& s0,
                                   const ltl::Formula& phi, const OptionTraj& o, double gamma) {
  OptionOutcome out;
  out.phi_k = phi;
  double discount = 1.0;
  const State* s = &s0;
  for (int t = 0; t < o.k(); ++t) {
    if (ltl::is_resolved(out.phi_k)) break;
    const StepReward sr = step_reward(label(*s, o.actions[t]), out.phi_k);
    out.r += discount * sr.r;
    out.phi_k = sr.next;
    discount *= gamma;
    s = &o.states[t];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Transition tuples

struct TransitionTuple {
  State s0;
  int phi = -1;  // closure index
  OptionTraj o;
  double r = 0.0;
  State sk;
  int phi_k = -1;
  bool terminal = false;
};

struct Segment {
  State s0;
  OptionTraj o;
};

inline TransitionTuple build_tuple(const LabelFn& label, const ltl::ProgressionClosure& cl,
                                   const Segment& seg, int phi_id, double gamma) {
  if (seg.o.k() < 1) throw Error("build_tuple: segment too short");
  TransitionTuple t;
  t.s0 = seg.s0;
  t.phi = phi_id;
  t.o = seg.o;
  t.sk = seg.o.terminal_state();
  const OptionOutcome oc = option_reward(label, seg.s0, cl.at(phi_id), seg.o, gamma);
  t.r = oc.r;
  t.phi_k = cl.id_of(oc.phi_k);
  if (t.phi_k < 0) throw Error("build_tuple: progressed formula left the closure");
  t.terminal = ltl::is_resolved(oc.phi_k);
  return t;
}

// ---------------------------------------------------------------------------
// Critic: Q(<s, phi>, o) = MLP over [normalized s0 | flattened normalized
// option | graph embedding of phi]. Two online critics plus polyak targets,
// all in one ParamStore under the q1/ q2/ t1/ t2/ prefixes.

template <typename T>
struct CriticSystem {
  diffusion::TrajLayout layout;
  maze::NormStats stats;
  int num_props = 0;
  MlpSpec mlp[4];   // q1 q2 t1 t2
  RgcSpec rgc[4];

  static constexpr const char* kPrefix[4] = {"q1/", "q2/", "t1/", "t2/"};

  size_t embed_dim() const { return rgc[0].embed_dim; }
  size_t input_dim() const {
    return static_cast<size_t>(layout.state_dim) +
           static_cast<size_t>(layout.k) * layout.row_dim() + embed_dim();
  }

  static CriticSystem make(const diffusion::TrajLayout& layout, const maze::NormStats& stats,
                           int num_props, int hidden, int depth, int embed_dim, int rounds) {
    CriticSystem c;
    c.layout = layout;
    c.stats = stats;
    c.num_props = num_props;
    for (int i = 0; i < 4; ++i) {
      c.rgc[i].prefix = std::string(kPrefix[i]) + "rgc/";
      c.rgc[i].feat_dim = static_cast<size_t>(ltl::kNumGraphKinds + num_props);
      c.rgc[i].embed_dim = static_cast<size_t>(embed_dim);
      c.rgc[i].rounds = rounds;
      c.mlp[i].prefix = std::string(kPrefix[i]) + "mlp/";
      c.mlp[i].dims.push_back(c.input_dim());
      for (int l = 0; l < depth; ++l) c.mlp[i].dims.push_back(static_cast<size_t>(hidden));
      c.mlp[i].dims.push_back(1);
    }
    return c;
  }

  void init(ParamStore<T>& store, Rng& rng) const {
    for (int i = 0; i < 2; ++i) {
      mlp_init(store, mlp[i], rng);
      rgc_init(store, rgc[i], rng);
    }
    store.clone_prefix("q1/", "t1/");
    store.clone_prefix("q2/", "t2/");
  }

  // normalized start state into out[0..state_dim)
  void norm_state(const State& s, T* out) const {
    const double v[4] = {s.x, s.y, s.vx, s.vy};
    for (int c = 0; c < layout.state_dim; ++c)
      out[c] = static_cast<T>((v[c] - stats.mean[c]) / stats.scale[c]);
  }

  // flattened normalized option into out[0 .. k*row_dim)
  void norm_option(const OptionTraj& o, T* out) const {
    const int rd = layout.row_dim();
    for (int t = 0; t < o.k(); ++t) {
      const double a[2] = {o.actions[t].fx, o.actions[t].fy};
      for (int c = 0; c < layout.action_dim; ++c)
        out[t * rd + c] = static_cast<T>((a[c] - stats.mean[4 + c]) / stats.scale[4 + c]);
      const double sv[4] = {o.states[t].x, o.states[t].y, o.states[t].vx, o.states[t].vy};
      for (int c = 0; c < layout.state_dim; ++c)
        out[t * rd + layout.action_dim + c] =
            static_cast<T>((sv[c] - stats.mean[c]) / stats.scale[c]);
    }
  }
};

// Cached formula graphs keyed by canonical string.
class GraphCache {
 public:
  explicit GraphCache(int num_props) : num_props_(num_props) {}
  const LabeledGraph& get(const ltl::Formula& f) {
    const std::string key = ltl::canonical_str(f);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    return cache_.emplace(key, ltl::formula_to_graph(ltl::canonical(f), num_props_))
        .first->second;
  }

 private:
  int num_props_;
  std::unordered_map<std::string, LabeledGraph> cache_;
};

// Single Q evaluation in world units (used by the planner and tests; training
// batches the same assembly manually).
template <typename T>
double critic_value(const ParamStore<T>& store, const CriticSystem<T>& sys, int which,
                    GraphCache& graphs, const ltl::Formula& phi, const State& s,
                    const OptionTraj& o) {
  Tensor<T> embed = rgc_forward(store, sys.rgc[which], graphs.get(phi));
  Tensor<T> in({1, sys.input_dim()});
  T* row = in.row_ptr(0);
  sys.norm_state(s, row);
  sys.norm_option(o, row + sys.layout.state_dim);
  std::copy(embed.data.begin(), embed.data.end(),
            row + sys.input_dim() - sys.embed_dim());
  Tensor<T> out = mlp_forward(store, sys.mlp[which], in);
  return static_cast<double>(out[0]);
}

// ---------------------------------------------------------------------------
// Algorithm-1 style offline TD training with clipped double Q-learning,
// target smoothing and periodic polyak updates.

using SegmentSampler = std::function<Segment(Rng&)>;
// Proposes M candidate options at a state; rng_key keeps it deterministic.
using ProposerFn = std::function<std::vector<OptionTraj>(const State&, int, uint64_t)>;

struct CriticTrainConfig {
  double gamma = 0.99;
  int batch = 64;          // B
  int steps = 20000;       // E
  int proposals = 8;       // M target options per tuple
  int target_period = 2;   // e0
  double polyak = 0.005;   // lambda
  double lr = 3e-4;
  double target_noise = 0.1;   // sigma, in action units
  double noise_clip = 0.25;    // c, in action units
  int pool = 4096;             // pre-proposed segment pool size
  uint64_t seed = 1;
  int log_every = 200;
};

struct CriticLogEntry {
  uint64_t step;
  double loss1, loss2, mean_target;
};

inline uint64_t splitmix64_key(uint64_t seed, uint64_t a, uint64_t b) {
  uint64_t x = seed;
  splitmix64(x);
  x ^= a * 0x9e3779b97f4a7c15ull;
  splitmix64(x);
  x ^= b * 0xff51afd7ed558ccdull;
  return splitmix64(x);
}

namespace detail {

// The denoiser is frozen during critic training (Algorithm 1 trains only the
// critics), so target-option proposals depend only on s_k and the rng key.
// We draw a fixed uniform pool of segments once and pre-propose options for
// each; training then samples batches from the pool.
struct PoolEntry {
  Segment seg;
  std::vector<OptionTraj> proposals;
};

}  // namespace detail

template <typename T>
void train_critics(const SegmentSampler& sample_segment, const ltl::ProgressionClosure& cl,
                   const ProposerFn& proposer, const StepFn& env_step, const LabelFn& label,
                   const CriticTrainConfig& cfg, const CriticSystem<T>& sys,
                   ParamStore<T>& store,
                   const std::function<void(const CriticLogEntry&)>& on_log = {}) {
  const size_t B = static_cast<size_t>(cfg.batch);
  const size_t in_dim = sys.input_dim();
  const size_t ed = sys.embed_dim();
  const size_t opt_dim = in_dim - ed - sys.layout.state_dim;
  const double gamma_k = std::pow(cfg.gamma, sys.layout.k);
  GraphCache graphs(sys.num_props);

  // segment pool with pre-proposed target options
  std::vector<detail::PoolEntry> pool(static_cast<size_t>(cfg.pool));
  {
    Rng seg_rng = Rng::derive(cfg.seed, 0x9000ull);
    for (auto& e : pool) e.seg = sample_segment(seg_rng);
    parallel_for(pool.size(), [&](size_t i) {
      pool[i].proposals =
          proposer(pool[i].seg.o.terminal_state(), cfg.proposals,
                   splitmix64_key(cfg.seed, 0x9001ull, i));
    });
  }

  // closure embeddings are recomputed per step (the encoder trains too);
  // graphs are cached once
  std::vector<const LabeledGraph*> closure_graphs(cl.size());
  for (size_t i = 0; i < cl.size(); ++i) closure_graphs[i] = &graphs.get(cl.at(i));

  const uint64_t total = static_cast<uint64_t>(cfg.steps);
  while (store.step < total) {
    Rng rng = Rng::derive(cfg.seed, 0xc717ull, store.step);

    // assemble batch of tuples
    std::vector<const detail::PoolEntry*> entries(B);
    std::vector<TransitionTuple> tuples(B);
    for (size_t b = 0; b < B; ++b) {
      entries[b] = &pool[rng.uniform_int(pool.size())];
      const int phi_id = static_cast<int>(rng.uniform_int(cl.size()));
      tuples[b] = build_tuple(label, cl, entries[b]->seg, phi_id, cfg.gamma);
    }

    // --- target values ---------------------------------------------------
    // embeddings for phi_k under the target encoders
    auto embed_ids = [&](int which, const std::vector<int>& ids,
                         std::map<int, Tensor<T>>& out) {
      for (int id : ids)
        if (!out.count(id))
          out.emplace(id, rgc_forward(store, sys.rgc[which], *closure_graphs[id]));
    };
    std::vector<int> phik_ids;
    for (const auto& t : tuples)
      if (!t.terminal) phik_ids.push_back(t.phi_k);
    std::map<int, Tensor<T>> emb_t1, emb_t2;
    embed_ids(2, phik_ids, emb_t1);
    embed_ids(3, phik_ids, emb_t2);

    std::vector<double> targets(B, 0.0);
    std::vector<size_t> open;  // non-terminal tuple indices
    for (size_t b = 0; b < B; ++b) {
      targets[b] = tuples[b].r;
      if (!tuples[b].terminal) open.push_back(b);
    }

    if (!open.empty()) {
      const int M = cfg.proposals;
      // score all proposals with Q_t1 to pick the best per tuple
      Tensor<T> in({open.size() * M, in_dim});
      for (size_t r = 0; r < open.size(); ++r) {
        const auto& tup = tuples[open[r]];
        const auto& props = entries[open[r]]->proposals;
        const Tensor<T>& emb = emb_t1.at(tup.phi_k);
        for (int m = 0; m < M; ++m) {
          T* row = in.row_ptr(r * M + m);
          sys.norm_state(tup.sk, row);
          sys.norm_option(props[static_cast<size_t>(m) % props.size()],
                          row + sys.layout.state_dim);
          std::copy(emb.data.begin(), emb.data.end(), row + in_dim - ed);
        }
      }
      Tensor<T> scores = mlp_forward(store, sys.mlp[2], in);
      // best proposal per open tuple, then clipped-noise smoothed version
      Tensor<T> tin1({open.size(), in_dim}), tin2({open.size(), in_dim});
      for (size_t r = 0; r < open.size(); ++r) {
        int best = 0;
        for (int m = 1; m < M; ++m)
          if (scores[r * M + m] > scores[r * M + best]) best = m;
        const auto& tup = tuples[open[r]];
        OptionTraj noisy = entries[open[r]]->proposals[static_cast<size_t>(best) %
                                                       entries[open[r]]->proposals.size()];
        // noise the actions, then re-roll states through the dynamics so the
        // smoothed option stays consistent
        const State* s = &tup.sk;
        State cur = *s;
        for (int t = 0; t < noisy.k(); ++t) {
          double n1, n2;
          rng.normal_pair(n1, n2);
          noisy.actions[t].fx +=
              std::clamp(cfg.target_noise * n1, -cfg.noise_clip, cfg.noise_clip);
          noisy.actions[t].fy +=
              std::clamp(cfg.target_noise * n2, -cfg.noise_clip, cfg.noise_clip);
          cur = env_step(cur, noisy.actions[t]);
          noisy.states[t] = cur;
        }
        T* row1 = tin1.row_ptr(r);
        sys.norm_state(tup.sk, row1);
        sys.norm_option(noisy, row1 + sys.layout.state_dim);
        std::copy(emb_t1.at(tup.phi_k).data.begin(), emb_t1.at(tup.phi_k).data.end(),
                  row1 + in_dim - ed);
        T* row2 = tin2.row_ptr(r);
        std::copy(row1, row1 + in_dim - ed, row2);
        std::copy(emb_t2.at(tup.phi_k).data.begin(), emb_t2.at(tup.phi_k).data.end(),
                  row2 + in_dim - ed);
      }
      Tensor<T> y1 = mlp_forward(store, sys.mlp[2], tin1);
      Tensor<T> y2 = mlp_forward(store, sys.mlp[3], tin2);
      // optimal option values live in [-1, 1] (one +-1 event per episode at
      // most); projecting the bootstrap onto that range blocks pessimism
      // drift from the clipped double-Q minimum
      for (size_t r = 0; r < open.size(); ++r)
        targets[open[r]] +=
            gamma_k * std::clamp(std::min(double(y1[r]), double(y2[r])), -1.0, 1.0);
    }

    // --- online update ----------------------------------------------------
    // embeddings for phi under the online encoders, with tapes for backward
    std::map<int, RgcTape<T>> tape1, tape2;
    std::map<int, Tensor<T>> emb_q1, emb_q2;
    for (const auto& t : tuples) {
      if (!emb_q1.count(t.phi)) {
        RgcTape<T>& tp1 = tape1[t.phi];
        emb_q1.emplace(t.phi, rgc_forward(store, sys.rgc[0], *closure_graphs[t.phi], &tp1));
        RgcTape<T>& tp2 = tape2[t.phi];
        emb_q2.emplace(t.phi, rgc_forward(store, sys.rgc[1], *closure_graphs[t.phi], &tp2));
      }
    }
    Tensor<T> in1({B, in_dim}), in2({B, in_dim});
    for (size_t b = 0; b < B; ++b) {
      const auto& t = tuples[b];
      T* row = in1.row_ptr(b);
      sys.norm_state(t.s0, row);
      sys.norm_option(t.o, row + sys.layout.state_dim);
      std::copy(emb_q1.at(t.phi).data.begin(), emb_q1.at(t.phi).data.end(),
                row + in_dim - ed);
      T* row2 = in2.row_ptr(b);
      std::copy(row, row + in_dim - ed, row2);
      std::copy(emb_q2.at(t.phi).data.begin(), emb_q2.at(t.phi).data.end(),
                row2 + in_dim - ed);
    }

    Grads grads;
    double loss[2] = {0.0, 0.0};
    double mean_target = 0.0;
    for (double y : targets) mean_target += y / static_cast<double>(B);
    for (int j = 0; j < 2; ++j) {
      Tensor<T>& in = j == 0 ? in1 : in2;
      MlpTape<T> tape;
      Tensor<T> q = mlp_forward(store, sys.mlp[j], in, &tape);
      Tensor<T> dq({B, 1});
      for (size_t b = 0; b < B; ++b) {
        const double diff = double(q[b]) - targets[b];
        loss[j] += diff * diff / static_cast<double>(B);
        dq[b] = static_cast<T>(2.0 * diff / static_cast<double>(B));
      }
      Tensor<T> din;
      mlp_backward(store, sys.mlp[j], tape, dq, grads, &din);
      // route embedding gradients into the online encoders
      std::map<int, Tensor<T>> demb;
      for (size_t b = 0; b < B; ++b) {
        const int id = tuples[b].phi;
        auto it = demb.find(id);
        if (it == demb.end())
          it = demb.emplace(id, Tensor<T>({size_t(1), ed})).first;
        for (size_t c = 0; c < ed; ++c)
          it->second[c] += din.at2(b, in_dim - ed + c);
      }
      for (auto& [id, g] : demb)
        rgc_backward(store, sys.rgc[j], (j == 0 ? tape1 : tape2).at(id), g, grads);
    }
    if (!std::isfinite(loss[0]) || !std::isfinite(loss[1]))
      throw Error("train_critics: diverged at step " + std::to_string(store.step));

    adam_step(store, grads, cfg.lr);
    if (store.step % static_cast<uint64_t>(cfg.target_period) == 0) {
      polyak_blend(store, "q1/", "t1/", cfg.polyak);
      polyak_blend(store, "q2/", "t2/", cfg.polyak);
    }
    if (on_log && (store.step % static_cast<uint64_t>(cfg.log_every) == 0 ||
                   store.step == total))
      on_log({store.step, loss[0], loss[1], mean_target});
  }
}

}  // namespace doppler::optioncritic
