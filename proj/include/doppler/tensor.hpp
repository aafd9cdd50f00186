#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "doppler/common.hpp"
#include "doppler/rng.hpp"

namespace doppler {

// Dense row-major array. Value semantics throughout: copies never alias.
template <typename T>
struct Tensor {
  std::vector<size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<size_t> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), T(0));
  }

  static size_t numel_of(const std::vector<size_t>& s) {
    size_t n = 1;
    for (size_t e : s) n *= e;
    return n;
  }

  static Tensor zeros(std::vector<size_t> s) { return Tensor(std::move(s)); }

  size_t numel() const { return data.size(); }
  size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  size_t cols() const { return shape.size() < 2 ? (shape.empty() ? 0 : 1) : shape[1]; }

  T& operator[](size_t i) { return data[i]; }
  const T& operator[](size_t i) const { return data[i]; }
  T& at2(size_t r, size_t c) { return data[r * cols() + c]; }
  const T& at2(size_t r, size_t c) const { return data[r * cols() + c]; }
  T* row_ptr(size_t r) { return data.data() + r * cols(); }
  const T* row_ptr(size_t r) const { return data.data() + r * cols(); }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

// Spawning workers only pays off for matrices with real work in them.
inline bool worth_threading(size_t m, size_t n, size_t k) {
  return m >= 4 && m * n * k >= (size_t(1) << 18);
}

// Row-partitioned loop: arithmetic order per row is fixed, so results do not
// depend on the worker count.
template <typename Body>
void rows_parallel(size_t m, size_t n, size_t k, const Body& body) {
  if (worth_threading(m, n, k))
    parallel_for(m, body);
  else
    for (size_t i = 0; i < m; ++i) body(i);
}

// C (m x n) with C[i][j] = dot(A.row(i), B.row(j)); A is m x k, B is n x k.
template <typename T>
void matmul_nt(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
  const size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) throw Error("matmul_nt: inner dimensions disagree");
  c.shape = {m, n};
  c.data.assign(m * n, T(0));
  rows_parallel(m, n, k, [&](size_t i) {
    const T* ai = a.row_ptr(i);
    T* ci = c.row_ptr(i);
    for (size_t j = 0; j < n; ++j) {
      const T* bj = b.row_ptr(j);
      T acc = 0;
      for (size_t t = 0; t < k; ++t) acc += ai[t] * bj[t];
      ci[j] = acc;
    }
  });
}

// C (m x n) = A (m x k) * B (k x n).
template <typename T>
void matmul_nn(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
  const size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) throw Error("matmul_nn: inner dimensions disagree");
  c.shape = {m, n};
  c.data.assign(m * n, T(0));
  rows_parallel(m, n, k, [&](size_t i) {
    const T* ai = a.row_ptr(i);
    T* ci = c.row_ptr(i);
    for (size_t t = 0; t < k; ++t) {
      const T av = ai[t];
      if (av == T(0)) continue;
      const T* bt = b.row_ptr(t);
      for (size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  });
}

// C (m x n) += sum_b A[b][i] * B[b][j]; A is batch x m, B is batch x n.
// Single-threaded on purpose: accumulation order must not depend on workers.
template <typename T>
void matmul_tn_acc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
  const size_t nb = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != nb) throw Error("matmul_tn_acc: batch dimensions disagree");
  if (c.rows() != m || c.cols() != n) {
    c.shape = {m, n};
    c.data.assign(m * n, T(0));
  }
  for (size_t bi = 0; bi < nb; ++bi) {
    const T* ab = a.row_ptr(bi);
    const T* bb = b.row_ptr(bi);
    for (size_t i = 0; i < m; ++i) {
      const T av = ab[i];
      if (av == T(0)) continue;
      T* ci = c.row_ptr(i);
      for (size_t j = 0; j < n; ++j) ci[j] += av * bb[j];
    }
  }
}

// Named flat parameter arrays plus Adam moment buffers and the step counter.
template <typename T>
struct ParamStore {
  std::map<std::string, Tensor<T>> params;
  std::map<std::string, Tensor<T>> adam_m;
  std::map<std::string, Tensor<T>> adam_v;
  uint64_t step = 0;

  bool has(const std::string& name) const { return params.count(name) != 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw Error("ParamStore: unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw Error("ParamStore: unknown parameter '" + name + "'");
    return it->second;
  }

  void add(const std::string& name, Tensor<T> t) {
    if (has(name)) throw Error("ParamStore: duplicate parameter '" + name + "'");
    adam_m[name] = Tensor<T>::zeros(t.shape);
    adam_v[name] = Tensor<T>::zeros(t.shape);
    params[name] = std::move(t);
  }

  // Copy every parameter under src_prefix to the same name under dst_prefix.
  void clone_prefix(const std::string& src_prefix, const std::string& dst_prefix) {
    std::vector<std::pair<std::string, Tensor<T>>> items;
    for (const auto& [name, t] : params) {
      if (name.rfind(src_prefix, 0) == 0)
        items.emplace_back(dst_prefix + name.substr(src_prefix.size()), t);
    }
    for (auto& [name, t] : items) add(name, std::move(t));
  }
};

using Grads = std::map<std::string, Tensor<float>>;

template <typename T>
void accumulate_grad(std::map<std::string, Tensor<T>>& grads, const std::string& name,
                     const Tensor<T>& g) {
  auto it = grads.find(name);
  if (it == grads.end()) {
    grads[name] = g;
  } else {
    if (!it->second.same_shape(g)) throw Error("gradient shape mismatch for '" + name + "'");
    for (size_t i = 0; i < g.numel(); ++i) it->second.data[i] += g.data[i];
  }
}

// Standard Adam. Throws on non-finite gradients (diverged training). Only the
// named gradients move; lr = 0 leaves parameters untouched.
template <typename T>
void adam_step(ParamStore<T>& store, const std::map<std::string, Tensor<T>>& grads, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  const uint64_t t = store.step + 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (const auto& [name, g] : grads) {
    Tensor<T>& p = store.at(name);
    if (!p.same_shape(g)) throw Error("adam_step: shape mismatch for '" + name + "'");
    Tensor<T>& m = store.adam_m[name];
    Tensor<T>& v = store.adam_v[name];
    for (size_t i = 0; i < g.numel(); ++i) {
      const double gi = static_cast<double>(g.data[i]);
      if (!std::isfinite(gi)) throw Error("adam_step: non-finite gradient in '" + name + "'");
      const double mi = beta1 * m.data[i] + (1.0 - beta1) * gi;
      const double vi = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
      m.data[i] = static_cast<T>(mi);
      v.data[i] = static_cast<T>(vi);
      p.data[i] -= static_cast<T>(lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps));
    }
  }
  store.step = t;
}

// target <- lambda * online + (1 - lambda) * target, elementwise.
template <typename T>
void polyak_update(ParamStore<T>& target, const ParamStore<T>& online, double lambda) {
  if (target.params.size() != online.params.size())
    throw Error("polyak_update: parameter sets differ");
  auto ti = target.params.begin();
  auto oi = online.params.begin();
  for (; ti != target.params.end(); ++ti, ++oi) {
    if (ti->first != oi->first || !ti->second.same_shape(oi->second))
      throw Error("polyak_update: name/shape mismatch at '" + ti->first + "'");
    for (size_t i = 0; i < ti->second.numel(); ++i)
      ti->second.data[i] = static_cast<T>(lambda * oi->second.data[i] +
                                          (1.0 - lambda) * ti->second.data[i]);
  }
}

// Same blend between two prefixes of one store (used for in-store targets).
template <typename T>
void polyak_blend(ParamStore<T>& store, const std::string& online_prefix,
                  const std::string& target_prefix, double lambda) {
  for (auto& [name, t] : store.params) {
    if (name.rfind(target_prefix, 0) != 0) continue;
    const std::string src = online_prefix + name.substr(target_prefix.size());
    const Tensor<T>& o = store.at(src);
    for (size_t i = 0; i < t.numel(); ++i)
      t.data[i] = static_cast<T>(lambda * o.data[i] + (1.0 - lambda) * t.data[i]);
  }
}

// ---------------------------------------------------------------------------
// Checkpoint file, magic DPLRCK1. Little-endian throughout:
//   magic[7], version u32, entry count u64,
//   entries: name_len u32, name bytes, rank u32, extents u64[rank], f32 data
//   (parameters first, then moment buffers under the reserved "__adam_m__/"
//   and "__adam_v__/" prefixes), step counter u64.

struct CheckpointError : Error {
  explicit CheckpointError(const std::string& m) : Error(m) {}
};

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw CheckpointError("truncated file (u32)");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
  return v;
}
inline uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw CheckpointError("truncated file (u64)");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}
inline void put_f32(std::ostream& os, float f) {
  uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(os, v);
}
inline float get_f32(std::istream& is) {
  const uint32_t v = get_u32(is);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}
inline void put_f64(std::ostream& os, double d) {
  uint64_t v;
  std::memcpy(&v, &d, 8);
  put_u64(os, v);
}
inline double get_f64(std::istream& is) {
  const uint64_t v = get_u64(is);
  double d;
  std::memcpy(&d, &v, 8);
  return d;
}

template <typename T>
void write_entry(std::ostream& os, const std::string& name, const Tensor<T>& t) {
  put_u32(os, static_cast<uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(os, static_cast<uint32_t>(t.shape.size()));
  for (size_t e : t.shape) put_u64(os, e);
  for (const T& x : t.data) put_f32(os, static_cast<float>(x));
}

inline std::pair<std::string, Tensor<float>> read_entry(std::istream& is) {
  const uint32_t name_len = get_u32(is);
  if (name_len > (1u << 20)) throw CheckpointError("implausible name length");
  std::string name(name_len, '\0');
  if (!is.read(name.data(), name_len)) throw CheckpointError("truncated file (name)");
  const uint32_t rank = get_u32(is);
  if (rank > 8) throw CheckpointError("implausible tensor rank");
  std::vector<size_t> shape(rank);
  size_t numel = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    shape[i] = static_cast<size_t>(get_u64(is));
    numel *= shape[i];
  }
  if (numel > (1ull << 32)) throw CheckpointError("shape table inconsistency");
  Tensor<float> t;
  t.shape = shape;
  t.data.resize(numel);
  for (size_t i = 0; i < numel; ++i) t.data[i] = get_f32(is);
  return {name, std::move(t)};
}

}  // namespace detail

inline constexpr char kCheckpointMagic[] = "DPLRCK1";
inline constexpr uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const ParamStore<T>& store, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open '" + path + "' for writing");
  os.write(kCheckpointMagic, 7);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u64(os, store.params.size() + store.adam_m.size() + store.adam_v.size());
  for (const auto& [name, t] : store.params) detail::write_entry(os, name, t);
  for (const auto& [name, t] : store.adam_m) detail::write_entry(os, "__adam_m__/" + name, t);
  for (const auto& [name, t] : store.adam_v) detail::write_entry(os, "__adam_v__/" + name, t);
  detail::put_u64(os, store.step);
  if (!os) throw CheckpointError("write failure on '" + path + "'");
}

inline ParamStore<float> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open '" + path + "'");
  char magic[7];
  if (!is.read(magic, 7) || std::memcmp(magic, kCheckpointMagic, 7) != 0)
    throw CheckpointError("bad magic: not a DPLRCK1 checkpoint");
  const uint32_t version = detail::get_u32(is);
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const uint64_t count = detail::get_u64(is);
  ParamStore<float> store;
  for (uint64_t i = 0; i < count; ++i) {
    auto [name, t] = detail::read_entry(is);
    if (name.rfind("__adam_m__/", 0) == 0) {
      store.adam_m[name.substr(11)] = std::move(t);
    } else if (name.rfind("__adam_v__/", 0) == 0) {
      store.adam_v[name.substr(11)] = std::move(t);
    } else {
      store.params[name] = std::move(t);
    }
  }
  store.step = detail::get_u64(is);
  for (const auto& [name, t] : store.params) {
    auto mi = store.adam_m.find(name);
    auto vi = store.adam_v.find(name);
    if (mi == store.adam_m.end() || vi == store.adam_v.end() ||
        !mi->second.same_shape(t) || !vi->second.same_shape(t))
      throw CheckpointError("moment buffers inconsistent with parameter '" + name + "'");
  }
  if (store.adam_m.size() != store.params.size() || store.adam_v.size() != store.params.size())
    throw CheckpointError("orphan moment buffers in checkpoint");
  return store;
}

template <typename T>
bool stores_equal(const ParamStore<T>& a, const ParamStore<T>& b) {
  if (a.step != b.step || a.params.size() != b.params.size()) return false;
  auto cmp = [](const std::map<std::string, Tensor<T>>& x,
                const std::map<std::string, Tensor<T>>& y) {
    if (x.size() != y.size()) return false;
    auto xi = x.begin();
    auto yi = y.begin();
    for (; xi != x.end(); ++xi, ++yi) {
      if (xi->first != yi->first || xi->second.shape != yi->second.shape ||
          std::memcmp(xi->second.data.data(), yi->second.data.data(),
                      xi->second.data.size() * sizeof(T)) != 0)
        return false;
    }
    return true;
  };
  return cmp(a.params, b.params) && cmp(a.adam_m, b.adam_m) && cmp(a.adam_v, b.adam_v);
}

}  // namespace doppler
