#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "doppler/nn.hpp"
#include "doppler/rng.hpp"
#include "doppler/tensor.hpp"

namespace doppler::diffusion {

// ---------------------------------------------------------------------------
// Noise schedule. Indices are 1-based as in the DDPM definition; alpha_bar(0)
// is defined as 1. The default linear range scales with N so that the deepest
// step is near-pure noise (alpha_bar(N) << 1) for any step count.

struct NoiseSchedule {
  int N = 0;
  std::vector<double> beta;       // beta[i-1] = beta_i
  std::vector<double> abar;       // abar[i-1] = alpha_bar_i

  static NoiseSchedule linear(int n, double beta_min, double beta_max) {
    NoiseSchedule s;
    s.N = n;
    s.beta.resize(n);
    s.abar.resize(n);
    double prod = 1.0;
    for (int i = 0; i < n; ++i) {
      s.beta[i] = n == 1 ? beta_min : beta_min + (beta_max - beta_min) * i / (n - 1);
      prod *= 1.0 - s.beta[i];
      s.abar[i] = prod;
    }
    return s;
  }

  // Compressed version of the canonical 1000-step [1e-4, 0.02] range.
  static NoiseSchedule default_linear(int n) { return linear(n, 0.1 / n, 20.0 / n); }

  double beta_at(int i) const { return beta[i - 1]; }
  double alpha_at(int i) const { return 1.0 - beta[i - 1]; }
  double alpha_bar(int i) const { return i == 0 ? 1.0 : abar[i - 1]; }

  void validate() const {
    if (N < 1) throw Error("schedule: N must be >= 1");
    double prev_beta = 0.0;
    for (int i = 1; i <= N; ++i) {
      if (!(beta_at(i) > 0.0 && beta_at(i) < 1.0))
        throw Error("schedule: beta out of (0,1) at step " + std::to_string(i));
      if (beta_at(i) < prev_beta)
        throw Error("schedule: beta must be non-decreasing at step " + std::to_string(i));
      if (!(alpha_bar(i) < alpha_bar(i - 1)))
        throw Error("schedule: alpha_bar must strictly decrease at step " + std::to_string(i));
      prev_beta = beta_at(i);
    }
  }
};

// Trajectory segment layout: (k+1) rows of (state ++ action), flattened
// row-major. Conditioned entries are the state dims of row 0.
struct TrajLayout {
  int k = 16;
  int state_dim = 4;
  int action_dim = 2;

  int row_dim() const { return state_dim + action_dim; }
  int dim() const { return (k + 1) * row_dim(); }
  int cond_dim() const { return state_dim; }
};

// ---------------------------------------------------------------------------
// Forward process, Tweedie estimate and ancestral reverse step, all on flat
// element spans so they serve both single trajectories and coupled batches.

// tau_i = sqrt(abar_i) tau_0 + sqrt(1 - abar_i) eps
template <typename T>
void forward_noise(const NoiseSchedule& sched, const T* tau0, size_t n, int i, Rng& rng,
                   T* tau_i, T* eps_out) {
  const double sa = std::sqrt(sched.alpha_bar(i));
  const double sn = std::sqrt(1.0 - sched.alpha_bar(i));
  rng.fill_normal(eps_out, n);
  for (size_t j = 0; j < n; ++j)
    tau_i[j] = static_cast<T>(sa * tau0[j] + sn * eps_out[j]);
}

// tau0_hat = (tau_i - sqrt(1 - abar_i) eps_hat) / sqrt(abar_i); the
// epsilon-form of Tweedie's estimate (score = -eps / sqrt(1 - abar_i)).
template <typename T>
void tweedie_estimate(const NoiseSchedule& sched, const T* tau_i, const T* eps_hat, size_t n,
                      int i, T* tau0_hat) {
  const double sa = std::sqrt(sched.alpha_bar(i));
  const double sn = std::sqrt(1.0 - sched.alpha_bar(i));
  for (size_t j = 0; j < n; ++j)
    tau0_hat[j] = static_cast<T>((tau_i[j] - sn * eps_hat[j]) / sa);
}

// DDPM ancestral step; no noise at i = 1.
template <typename T>
void reverse_step(const NoiseSchedule& sched, const T* tau_i, const T* eps_hat, size_t n, int i,
                  Rng& rng, T* tau_prev) {
  const double beta = sched.beta_at(i);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha_at(i));
  const double coef = beta / std::sqrt(1.0 - sched.alpha_bar(i));
  const double beta_tilde = beta * (1.0 - sched.alpha_bar(i - 1)) / (1.0 - sched.alpha_bar(i));
  const double sigma = i > 1 ? std::sqrt(beta_tilde) : 0.0;
  std::vector<T> z;
  if (sigma > 0) {
    z.resize(n);
    rng.fill_normal(z.data(), n);
  }
  for (size_t j = 0; j < n; ++j) {
    double v = inv_sqrt_alpha * (tau_i[j] - coef * eps_hat[j]);
    if (sigma > 0) v += sigma * z[j];
    tau_prev[j] = static_cast<T>(v);
  }
}

// ---------------------------------------------------------------------------
// Determinantal diversity guidance (gradient of log det of the cosine
// similarity matrix over the batch of Tweedie estimates).

struct GuidanceDegenerate : Error {
  explicit GuidanceDegenerate(const std::string& m) : Error(m) {}
};

// Cholesky-based SPD inverse for the small M x M similarity matrix.
inline std::vector<double> spd_inverse(std::vector<double> a, size_t m) {
  // in-place Cholesky a = L L^T
  for (size_t i = 0; i < m; ++i) {
    for (size_t j = 0; j <= i; ++j) {
      double sum = a[i * m + j];
      for (size_t t = 0; t < j; ++t) sum -= a[i * m + t] * a[j * m + t];
      if (i == j) {
        if (sum <= 0.0)
          throw GuidanceDegenerate("similarity matrix not positive definite (ridge too small)");
        a[i * m + i] = std::sqrt(sum);
      } else {
        a[i * m + j] = sum / a[j * m + j];
      }
    }
  }
  // invert L, then K = L^-T L^-1
  std::vector<double> linv(m * m, 0.0);
  for (size_t i = 0; i < m; ++i) {
    linv[i * m + i] = 1.0 / a[i * m + i];
    for (size_t j = 0; j < i; ++j) {
      double sum = 0.0;
      for (size_t t = j; t < i; ++t) sum -= a[i * m + t] * linv[t * m + j];
      linv[i * m + j] = sum / a[i * m + i];
    }
  }
  std::vector<double> k(m * m, 0.0);
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < m; ++j) {
      double sum = 0.0;
      for (size_t t = std::max(i, j); t < m; ++t) sum += linv[t * m + i] * linv[t * m + j];
      k[i * m + j] = sum;
    }
  return k;
}

// Gradient of log det(L) with respect to each chain's Tweedie estimate, where
// L_{uv} = cos(tw_u, tw_v) + ridge * 1[u=v]. d logdet / dL = L^{-1}; diagonal
// cosines are identically 1 so they contribute nothing. Entries listed in
// `frozen` (the inpainted conditioning slots) get zero gradient.
template <typename T>
double logdet_similarity_grad(const Tensor<T>& tw, double ridge,
                              const std::vector<int>& frozen, Tensor<T>& grad_out) {
  const size_t m = tw.rows(), d = tw.cols();
  std::vector<double> norms(m);
  for (size_t u = 0; u < m; ++u) {
    double s = 0.0;
    const T* row = tw.row_ptr(u);
    for (size_t j = 0; j < d; ++j) s += double(row[j]) * double(row[j]);
    norms[u] = std::max(std::sqrt(s), 1e-12);
  }
  std::vector<double> cosm(m * m, 0.0);
  for (size_t u = 0; u < m; ++u) {
    cosm[u * m + u] = 1.0;
    for (size_t v = u + 1; v < m; ++v) {
      double dot = 0.0;
      const T* ru = tw.row_ptr(u);
      const T* rv = tw.row_ptr(v);
      for (size_t j = 0; j < d; ++j) dot += double(ru[j]) * double(rv[j]);
      cosm[u * m + v] = cosm[v * m + u] = dot / (norms[u] * norms[v]);
    }
  }
  std::vector<double> l = cosm;
  for (size_t u = 0; u < m; ++u) l[u * m + u] += ridge;
  std::vector<double> kinv = spd_inverse(l, m);

  double logdet = 0.0;
  {
    // recompute det from a fresh Cholesky for the return value
    std::vector<double> c = l;
    for (size_t i = 0; i < m; ++i) {
      for (size_t j = 0; j <= i; ++j) {
        double sum = c[i * m + j];
        for (size_t t = 0; t < j; ++t) sum -= c[i * m + t] * c[j * m + t];
        if (i == j) {
          c[i * m + i] = std::sqrt(sum);
          logdet += 2.0 * std::log(c[i * m + i]);
        } else {
          c[i * m + j] = sum / c[j * m + j];
        }
      }
    }
  }

  grad_out.shape = {m, d};
  grad_out.data.assign(m * d, T(0));
  for (size_t w = 0; w < m; ++w) {
    T* g = grad_out.row_ptr(w);
    const T* tw_w = tw.row_ptr(w);
    for (size_t v = 0; v < m; ++v) {
      if (v == w) continue;
      const double kwv = kinv[w * m + v];
      if (kwv == 0.0) continue;
      const T* tw_v = tw.row_ptr(v);
      const double c = cosm[w * m + v];
      const double inv_nwnv = 1.0 / (norms[w] * norms[v]);
      const double inv_nw2 = 1.0 / (norms[w] * norms[w]);
      // both (w,v) and (v,w) entries of L^{-1} contribute; L is symmetric
      const double scale = 2.0 * kwv;
      for (size_t j = 0; j < d; ++j)
        g[j] += static_cast<T>(scale * (tw_v[j] * inv_nwnv - c * tw_w[j] * inv_nw2));
    }
  }
  for (int idx : frozen)
    for (size_t w = 0; w < m; ++w) grad_out.at2(w, static_cast<size_t>(idx)) = T(0);
  return logdet;
}

// ---------------------------------------------------------------------------
// Batch sampler (diversity-guided posterior sampling)

enum class GuidanceMode { None, Diversity, QGuidance };

template <typename T>
struct GuidanceConfig {
  GuidanceMode mode = GuidanceMode::None;
  double zeta0 = 0.2;           // zeta_i = zeta0 * sqrt(1 - abar_i) unless explicit
  std::vector<double> zetas;    // optional explicit per-step sizes (index i-1)
  double ridge = 1e-3;          // epsilon_L
  double clip_rms = 10.0;       // elementwise clip at clip_rms * rms
  // Q-guidance hook: gradient of Q with respect to each chain's Tweedie
  // estimate (M x D in, M x D out).
  std::function<void(const Tensor<T>&, Tensor<T>&)> q_grad;

  double zeta(const NoiseSchedule& sched, int i) const {
    const double z = zetas.empty() ? zeta0 * std::sqrt(1.0 - sched.alpha_bar(i))
                                   : zetas[static_cast<size_t>(i - 1)];
    if (z < 0) throw Error("guidance: zeta must be non-negative");
    return z;
  }

  void validate() const {
    if (ridge <= 0) throw Error("guidance: ridge must be positive");
  }
};

// Denoiser hook: batch of noisy trajectories (M x D) and the step index in,
// predicted epsilon (M x D) out.
template <typename T>
using DenoiserFn = std::function<void(const Tensor<T>&, int, Tensor<T>&)>;

// Runs M coupled reverse chains conditioned on the given entries (inpainting)
// and returns the M final clean estimates (M x D, normalized units).
//
// Per-chain RNG streams are derived from (seed, chain), so zero guidance is
// bit-identical to M independent unguided chains.
template <typename T>
Tensor<T> sample_batch(const NoiseSchedule& sched, const DenoiserFn<T>& denoiser, int m_chains,
                       int dim, const std::vector<std::pair<int, T>>& condition,
                       const GuidanceConfig<T>& guidance, uint64_t seed) {
  if (m_chains < 1) throw Error("sample_batch: M must be >= 1");
  guidance.validate();
  const size_t M = static_cast<size_t>(m_chains);
  const size_t D = static_cast<size_t>(dim);

  std::vector<Rng> chain_rng;
  chain_rng.reserve(M);
  for (size_t m = 0; m < M; ++m) chain_rng.push_back(Rng::derive(seed, 0x5a3full, m));

  std::vector<int> frozen;
  frozen.reserve(condition.size());
  for (const auto& [idx, val] : condition) frozen.push_back(idx);

  auto inpaint = [&](Tensor<T>& x, double abar) {
    const double sa = std::sqrt(abar);
    for (const auto& [idx, val] : condition)
      for (size_t m = 0; m < M; ++m) x.at2(m, static_cast<size_t>(idx)) = static_cast<T>(sa * val);
  };

  Tensor<T> x({M, D});
  for (size_t m = 0; m < M; ++m) chain_rng[m].fill_normal(x.row_ptr(m), D);
  inpaint(x, sched.alpha_bar(sched.N));

  Tensor<T> eps({M, D}), tw({M, D}), next({M, D});
  for (int i = sched.N; i >= 1; --i) {
    denoiser(x, i, eps);
    for (size_t m = 0; m < M; ++m)
      tweedie_estimate(sched, x.row_ptr(m), eps.row_ptr(m), D, i, tw.row_ptr(m));
    for (const auto& [idx, val] : condition)
      for (size_t m = 0; m < M; ++m) tw.at2(m, static_cast<size_t>(idx)) = val;

    for (size_t m = 0; m < M; ++m)
      reverse_step(sched, x.row_ptr(m), eps.row_ptr(m), D, i, chain_rng[m], next.row_ptr(m));

    const bool diversity = guidance.mode == GuidanceMode::Diversity && M >= 2;
    const bool q_mode = guidance.mode == GuidanceMode::QGuidance && guidance.q_grad;
    if (diversity || q_mode) {
      Tensor<T> g;
      if (diversity) {
        logdet_similarity_grad(tw, guidance.ridge, frozen, g);
      } else {
        guidance.q_grad(tw, g);
        for (int idx : frozen)
          for (size_t m = 0; m < M; ++m) g.at2(m, static_cast<size_t>(idx)) = T(0);
      }
      // chain through the Tweedie map (eps treated as locally constant),
      // then normalize by the per-step gradient RMS with elementwise
      // clipping; the applied update has RMS zeta_i regardless of the raw
      // gradient scale, which keeps deep (high-noise) steps stable
      const double inv_sa = 1.0 / std::sqrt(sched.alpha_bar(i));
      for (auto& v : g.data) v = static_cast<T>(double(v) * inv_sa);
      double rms = 0.0;
      for (const T& v : g.data) rms += double(v) * double(v);
      rms = std::sqrt(rms / static_cast<double>(g.numel()));
      if (rms > 1e-12) {
        const double zeta = guidance.zeta(sched, i);
        const double clip = guidance.clip_rms * rms;
        for (size_t j = 0; j < g.numel(); ++j) {
          const double v = std::clamp(double(g.data[j]), -clip, clip);
          next.data[j] += static_cast<T>(zeta * v / rms);
        }
      }
    }
    inpaint(next, sched.alpha_bar(i - 1));
    std::swap(x, next);
  }
  // alpha_bar(0) = 1, so x now is the final Tweedie estimate with the
  // conditioned entries equal to the clean condition exactly.
  return x;
}

// ---------------------------------------------------------------------------
// Denoiser net assembly and training (epsilon parameterization of the
// denoising score matching objective).

template <typename T>
struct DenoiserModel {
  MlpSpec mlp;
  TrajLayout layout;
  int time_embed = 32;

  int input_dim() const { return layout.dim() + time_embed + layout.cond_dim(); }

  static DenoiserModel make(const TrajLayout& layout, int hidden, int depth,
                            int time_embed = 32, const std::string& prefix = "den/") {
    DenoiserModel m;
    m.layout = layout;
    m.time_embed = time_embed;
    m.mlp.prefix = prefix;
    m.mlp.dims.push_back(static_cast<size_t>(m.input_dim()));
    for (int l = 0; l < depth; ++l) m.mlp.dims.push_back(static_cast<size_t>(hidden));
    m.mlp.dims.push_back(static_cast<size_t>(layout.dim()));
    return m;
  }

  void init(ParamStore<T>& store, Rng& rng) const { mlp_init(store, mlp, rng); }

  // Build the (batch x input_dim) matrix: [tau_i | time embedding | cond].
  // A single-row condition broadcasts across the batch.
  Tensor<T> assemble(const Tensor<T>& tau, int step, const Tensor<T>& cond) const {
    const size_t B = tau.rows(), D = tau.cols();
    if (cond.rows() != B && cond.rows() != 1)
      throw Error("assemble: condition rows must match the batch or be 1");
    Tensor<T> in({B, static_cast<size_t>(input_dim())});
    std::vector<T> emb(static_cast<size_t>(time_embed));
    sinusoidal_embed(step, emb.size(), emb.data());
    for (size_t b = 0; b < B; ++b) {
      T* row = in.row_ptr(b);
      std::copy(tau.row_ptr(b), tau.row_ptr(b) + D, row);
      std::copy(emb.begin(), emb.end(), row + D);
      const T* crow = cond.row_ptr(cond.rows() == 1 ? 0 : b);
      std::copy(crow, crow + cond.cols(), row + D + emb.size());
    }
    return in;
  }

  DenoiserFn<T> bind(const ParamStore<T>& store, const Tensor<T>& cond) const {
    return [this, &store, cond](const Tensor<T>& tau, int step, Tensor<T>& eps_out) {
      Tensor<T> in = assemble(tau, step, cond);
      eps_out = mlp_forward(store, mlp, in);
    };
  }
};

// Supplies normalized training segments: fills `row` (layout.dim() values)
// and `cond` (layout.cond_dim() values, the clean normalized start state).
template <typename T>
using SegmentSource = std::function<void(Rng&, T* row, T* cond)>;

struct DenoiserTrainConfig {
  int batches = 10000;
  int batch_size = 64;
  double lr = 2e-4;
  uint64_t seed = 1;
  int log_every = 200;
};

// Minimizes masked epsilon-prediction MSE. The conditioning entries are
// noised like everything else but excluded from the loss.
template <typename T>
std::vector<double> train_denoiser(ParamStore<T>& store, const DenoiserModel<T>& model,
                                   const NoiseSchedule& sched, const SegmentSource<T>& source,
                                   const DenoiserTrainConfig& cfg,
                                   const std::function<void(int, double)>& on_log = {}) {
  const size_t D = static_cast<size_t>(model.layout.dim());
  const size_t C = static_cast<size_t>(model.layout.cond_dim());
  const size_t B = static_cast<size_t>(cfg.batch_size);
  std::vector<uint8_t> mask(D, 1);
  for (size_t j = 0; j < C; ++j) mask[j] = 0;  // row-0 state entries
  const double count = static_cast<double>(D - C);

  std::vector<double> losses;
  losses.reserve(cfg.batches);
  for (int step_idx = 0; step_idx < cfg.batches; ++step_idx) {
    Rng rng = Rng::derive(cfg.seed, 0xd1f5ull, static_cast<uint64_t>(store.step));
    Tensor<T> tau0({B, D}), cond({B, C}), tau_i({B, D}), eps({B, D});
    std::vector<int> steps(B);
    for (size_t b = 0; b < B; ++b) {
      source(rng, tau0.row_ptr(b), cond.row_ptr(b));
      steps[b] = 1 + static_cast<int>(rng.uniform_int(sched.N));
      forward_noise(sched, tau0.row_ptr(b), D, steps[b], rng, tau_i.row_ptr(b), eps.row_ptr(b));
    }
    // group rows by diffusion step so the time embedding is uniform per pass
    double loss = 0.0;
    Grads grads;
    std::map<int, std::vector<size_t>> by_step;
    for (size_t b = 0; b < B; ++b) by_step[steps[b]].push_back(b);
    for (const auto& [i, rows] : by_step) {
      Tensor<T> sub_tau({rows.size(), D}), sub_cond({rows.size(), C});
      for (size_t r = 0; r < rows.size(); ++r) {
        std::copy(tau_i.row_ptr(rows[r]), tau_i.row_ptr(rows[r]) + D, sub_tau.row_ptr(r));
        std::copy(cond.row_ptr(rows[r]), cond.row_ptr(rows[r]) + C, sub_cond.row_ptr(r));
      }
      Tensor<T> in = model.assemble(sub_tau, i, sub_cond);
      MlpTape<T> tape;
      Tensor<T> pred = mlp_forward(store, model.mlp, in, &tape);
      Tensor<T> dpred({rows.size(), static_cast<size_t>(model.layout.dim())});
      for (size_t r = 0; r < rows.size(); ++r) {
        const T* e = eps.row_ptr(rows[r]);
        for (size_t j = 0; j < D; ++j) {
          if (!mask[j]) continue;
          const double diff = double(pred.at2(r, j)) - double(e[j]);
          loss += diff * diff;
          dpred.at2(r, j) = static_cast<T>(2.0 * diff / (count * B));
        }
      }
      mlp_backward(store, model.mlp, tape, dpred, grads);
    }
    loss /= count * B;
    if (!std::isfinite(loss)) throw Error("train_denoiser: diverged (non-finite loss)");
    adam_step(store, grads, cfg.lr);
    losses.push_back(loss);
    if (on_log && (store.step % cfg.log_every == 0)) on_log(step_idx, loss);
  }
  return losses;
}

}  // namespace doppler::diffusion
