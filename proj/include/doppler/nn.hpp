#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "doppler/graph.hpp"
#include "doppler/tensor.hpp"

namespace doppler {

// ---------------------------------------------------------------------------
// Activation

template <typename T>
T softplus(T x) {
  if (x > T(20)) return x;
  if (x < T(-20)) return std::exp(x);
  return std::log1p(std::exp(x));
}

template <typename T>
T mish(T x) {
  return x * std::tanh(softplus(x));
}

template <typename T>
T mish_grad(T x) {
  const T t = std::tanh(softplus(x));
  const T sig = T(1) / (T(1) + std::exp(-x));
  return t + x * (T(1) - t * t) * sig;
}

// ---------------------------------------------------------------------------
// Feed-forward net: affine layers with Mish between them (none after the
// last). Parameters live in a ParamStore under "{prefix}w{l}" / "{prefix}b{l}".

struct MlpSpec {
  std::string prefix;
  std::vector<size_t> dims;  // in, hidden..., out

  size_t layers() const { return dims.size() - 1; }
  std::string w_name(size_t l) const { return prefix + "w" + std::to_string(l); }
  std::string b_name(size_t l) const { return prefix + "b" + std::to_string(l); }
};

// He-style init; the final layer is scaled down so fresh nets output near
// zero, which keeps both the epsilon head and untrained critics honest.
template <typename T>
void mlp_init(ParamStore<T>& store, const MlpSpec& spec, Rng& rng,
              double last_layer_scale = 1e-2) {
  for (size_t l = 0; l < spec.layers(); ++l) {
    const size_t fan_in = spec.dims[l], fan_out = spec.dims[l + 1];
    const double scale =
        std::sqrt(2.0 / static_cast<double>(fan_in)) * (l + 1 == spec.layers() ? last_layer_scale : 1.0);
    Tensor<T> w({fan_out, fan_in});
    for (auto& x : w.data) x = static_cast<T>(rng.normal() * scale);
    store.add(spec.w_name(l), std::move(w));
    store.add(spec.b_name(l), Tensor<T>({fan_out}));
  }
}

// Activations kept from forward, sufficient for exact reverse mode.
template <typename T>
struct MlpTape {
  std::vector<Tensor<T>> acts;  // acts[0] = input, acts[l] = layer-l output
  std::vector<Tensor<T>> pre;   // pre-activations per layer
};

template <typename T>
Tensor<T> mlp_forward(const ParamStore<T>& store, const MlpSpec& spec, const Tensor<T>& x,
                      MlpTape<T>* tape = nullptr) {
  if (x.cols() != spec.dims[0]) throw Error("mlp_forward: input width mismatch");
  if (tape) {
    tape->acts.assign(1, x);
    tape->pre.clear();
  }
  Tensor<T> a = x;
  for (size_t l = 0; l < spec.layers(); ++l) {
    const Tensor<T>& w = store.at(spec.w_name(l));
    const Tensor<T>& b = store.at(spec.b_name(l));
    Tensor<T> z;
    matmul_nt(a, w, z);
    for (size_t r = 0; r < z.rows(); ++r) {
      T* zr = z.row_ptr(r);
      for (size_t c = 0; c < z.cols(); ++c) zr[c] += b[c];
    }
    if (tape) tape->pre.push_back(z);
    if (l + 1 < spec.layers()) {
      for (auto& v : z.data) v = mish(v);
    }
    if (tape) tape->acts.push_back(z);
    a = std::move(z);
  }
  return a;
}

// Reverse pass. Accumulates parameter grads into `grads`; if dx is non-null
// it receives the gradient with respect to the input batch.
template <typename T>
void mlp_backward(const ParamStore<T>& store, const MlpSpec& spec, const MlpTape<T>& tape,
                  const Tensor<T>& dy, std::map<std::string, Tensor<T>>& grads,
                  Tensor<T>* dx = nullptr) {
  if (tape.acts.size() != spec.layers() + 1) throw Error("mlp_backward: tape mismatch");
  Tensor<T> dz = dy;
  for (size_t l = spec.layers(); l-- > 0;) {
    if (l + 1 < spec.layers()) {
      // dz currently holds dA for this layer's output; fold in Mish'
      const Tensor<T>& z = tape.pre[l];
      for (size_t i = 0; i < dz.numel(); ++i) dz.data[i] *= mish_grad(z.data[i]);
    }
    const Tensor<T>& a_prev = tape.acts[l];
    Tensor<T> dw;
    matmul_tn_acc(dz, a_prev, dw);
    accumulate_grad(grads, spec.w_name(l), dw);
    Tensor<T> db({spec.dims[l + 1]});
    for (size_t r = 0; r < dz.rows(); ++r) {
      const T* row = dz.row_ptr(r);
      for (size_t c = 0; c < dz.cols(); ++c) db[c] += row[c];
    }
    accumulate_grad(grads, spec.b_name(l), db);
    if (l > 0 || dx) {
      const Tensor<T>& w = store.at(spec.w_name(l));
      Tensor<T> da;
      matmul_nn(dz, w, da);
      if (l == 0) {
        if (dx) *dx = std::move(da);
        break;
      }
      dz = std::move(da);
    }
  }
}

// ---------------------------------------------------------------------------
// Sinusoidal timestep embedding (no parameters).

template <typename T>
void sinusoidal_embed(int step, size_t dim, T* out) {
  const size_t half = dim / 2;
  for (size_t j = 0; j < half; ++j) {
    const double freq =
        std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
    out[j] = static_cast<T>(std::sin(step * freq));
    out[half + j] = static_cast<T>(std::cos(step * freq));
  }
  if (dim % 2 == 1) out[dim - 1] = T(0);
}

// ---------------------------------------------------------------------------
// Relational message-passing encoder over labeled graphs. One shared set of
// per-edge-type weights applied for a fixed number of rounds, mean
// aggregation per type, Mish nonlinearity, mean-pool over nodes at the end.

struct RgcSpec {
  std::string prefix;
  size_t feat_dim = 0;
  size_t embed_dim = 32;
  int rounds = 3;

  std::string in_w() const { return prefix + "in_w"; }
  std::string in_b() const { return prefix + "in_b"; }
  std::string rel_w(int t) const { return prefix + "rel" + std::to_string(t) + "_w"; }
  std::string rel_b() const { return prefix + "rel_b"; }
};

template <typename T>
void rgc_init(ParamStore<T>& store, const RgcSpec& spec, Rng& rng) {
  auto init = [&](size_t rows, size_t cols) {
    Tensor<T> w({rows, cols});
    const double scale = std::sqrt(2.0 / static_cast<double>(cols));
    for (auto& x : w.data) x = static_cast<T>(rng.normal() * scale);
    return w;
  };
  store.add(spec.in_w(), init(spec.embed_dim, spec.feat_dim));
  store.add(spec.in_b(), Tensor<T>({spec.embed_dim}));
  for (int t = 0; t < kNumEdgeTypes; ++t)
    store.add(spec.rel_w(t), init(spec.embed_dim, spec.embed_dim));
  store.add(spec.rel_b(), Tensor<T>({spec.embed_dim}));
}

// Row-normalized adjacency per edge type (mean over in-neighbors).
template <typename T>
std::array<Tensor<T>, kNumEdgeTypes> rgc_adjacency(const LabeledGraph& g) {
  std::array<Tensor<T>, kNumEdgeTypes> adj;
  const size_t n = static_cast<size_t>(g.num_nodes);
  for (int t = 0; t < kNumEdgeTypes; ++t) {
    adj[t] = Tensor<T>({n, n});
    std::vector<int> indeg(n, 0);
    for (const auto& [u, v] : g.edges[t]) indeg[v]++;
    for (const auto& [u, v] : g.edges[t])
      adj[t].at2(v, u) += T(1) / static_cast<T>(indeg[v]);
  }
  return adj;
}

template <typename T>
struct RgcTape {
  std::array<Tensor<T>, kNumEdgeTypes> adj;
  Tensor<T> x;                      // node features
  Tensor<T> in_pre;                 // pre-activation of the input projection
  std::vector<Tensor<T>> h;         // h[0] after input proj, h[r] after round r
  std::vector<Tensor<T>> round_pre; // pre-activation per round
  std::vector<std::array<Tensor<T>, kNumEdgeTypes>> msgs;  // adj * h per round
};

// Returns the pooled embedding (1 x embed_dim tensor).
template <typename T>
Tensor<T> rgc_forward(const ParamStore<T>& store, const RgcSpec& spec, const LabeledGraph& g,
                      RgcTape<T>* tape = nullptr) {
  const size_t n = static_cast<size_t>(g.num_nodes);
  Tensor<T> x({n, spec.feat_dim});
  for (size_t i = 0; i < x.numel(); ++i) x.data[i] = static_cast<T>(g.feats[i]);

  auto adj = rgc_adjacency<T>(g);
  const Tensor<T>& win = store.at(spec.in_w());
  const Tensor<T>& bin = store.at(spec.in_b());
  Tensor<T> h;
  matmul_nt(x, win, h);
  for (size_t r = 0; r < n; ++r)
    for (size_t c = 0; c < spec.embed_dim; ++c) h.at2(r, c) += bin[c];
  if (tape) tape->in_pre = h;
  for (auto& v : h.data) v = mish(v);
  if (tape) {
    tape->adj = adj;
    tape->x = x;
    tape->h.assign(1, h);
    tape->round_pre.clear();
    tape->msgs.clear();
  }

  const Tensor<T>& brel = store.at(spec.rel_b());
  for (int round = 0; round < spec.rounds; ++round) {
    Tensor<T> z({n, spec.embed_dim});
    for (size_t r = 0; r < n; ++r)
      for (size_t c = 0; c < spec.embed_dim; ++c) z.at2(r, c) = brel[c];
    std::array<Tensor<T>, kNumEdgeTypes> msgs;
    for (int t = 0; t < kNumEdgeTypes; ++t) {
      Tensor<T> m;
      matmul_nn(adj[t], h, m);  // n x d, mean-aggregated inputs per node
      Tensor<T> proj;
      matmul_nt(m, store.at(spec.rel_w(t)), proj);
      for (size_t i = 0; i < z.numel(); ++i) z.data[i] += proj.data[i];
      msgs[t] = std::move(m);
    }
    if (tape) {
      tape->round_pre.push_back(z);
      tape->msgs.push_back(std::move(msgs));
    }
    for (auto& v : z.data) v = mish(v);
    h = std::move(z);
    if (tape) tape->h.push_back(h);
  }

  Tensor<T> pooled({size_t(1), spec.embed_dim});
  for (size_t r = 0; r < n; ++r)
    for (size_t c = 0; c < spec.embed_dim; ++c) pooled[c] += h.at2(r, c);
  for (auto& v : pooled.data) v /= static_cast<T>(n);
  return pooled;
}

template <typename T>
void rgc_backward(const ParamStore<T>& store, const RgcSpec& spec, const RgcTape<T>& tape,
                  const Tensor<T>& d_embed, std::map<std::string, Tensor<T>>& grads) {
  const size_t n = tape.h[0].rows();
  Tensor<T> dh({n, spec.embed_dim});
  for (size_t r = 0; r < n; ++r)
    for (size_t c = 0; c < spec.embed_dim; ++c)
      dh.at2(r, c) = d_embed[c] / static_cast<T>(n);

  for (int round = spec.rounds - 1; round >= 0; --round) {
    Tensor<T> dz = dh;
    const Tensor<T>& z = tape.round_pre[round];
    for (size_t i = 0; i < dz.numel(); ++i) dz.data[i] *= mish_grad(z.data[i]);

    Tensor<T> db({spec.embed_dim});
    for (size_t r = 0; r < n; ++r)
      for (size_t c = 0; c < spec.embed_dim; ++c) db[c] += dz.at2(r, c);
    accumulate_grad(grads, spec.rel_b(), db);

    Tensor<T> dh_prev({n, spec.embed_dim});
    for (int t = 0; t < kNumEdgeTypes; ++t) {
      Tensor<T> dw;
      matmul_tn_acc(dz, tape.msgs[round][t], dw);
      accumulate_grad(grads, spec.rel_w(t), dw);
      Tensor<T> dm;
      matmul_nn(dz, store.at(spec.rel_w(t)), dm);  // n x d
      // through adj: dh_prev += adj^T * dm
      const Tensor<T>& a = tape.adj[t];
      for (size_t u = 0; u < n; ++u)
        for (size_t v = 0; v < n; ++v) {
          const T w = a.at2(v, u);
          if (w == T(0)) continue;
          for (size_t c = 0; c < spec.embed_dim; ++c)
            dh_prev.at2(u, c) += w * dm.at2(v, c);
        }
    }
    dh = std::move(dh_prev);
  }

  // input projection
  Tensor<T> dz = dh;
  for (size_t i = 0; i < dz.numel(); ++i) dz.data[i] *= mish_grad(tape.in_pre.data[i]);
  Tensor<T> db({spec.embed_dim});
  for (size_t r = 0; r < n; ++r)
    for (size_t c = 0; c < spec.embed_dim; ++c) db[c] += dz.at2(r, c);
  accumulate_grad(grads, spec.in_b(), db);
  Tensor<T> dw;
  matmul_tn_acc(dz, tape.x, dw);
  accumulate_grad(grads, spec.in_w(), dw);
}

}  // namespace doppler
