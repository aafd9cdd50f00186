#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace doppler {

// Deterministic PRNG (xoshiro256++ seeded via splitmix64). The standard
// library distributions are not bit-stable across implementations, so all
// randomness in the project goes through this type. Sub-streams are derived
// from (seed, stream ids) which keeps parallel generation and training
// resumption reproducible without serializing generator state.

inline uint64_t splitmix64(uint64_t& x) {
  x += 0x9e3779b97f4a7c15ull;
  uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed, std::initializer_list<uint64_t> streams = {}) {
    uint64_t x = seed;
    for (uint64_t id : streams) x = splitmix64(x) ^ (id * 0x9e3779b97f4a7c15ull);
    for (auto& si : s_) si = splitmix64(x);
    // all-zero state is invalid for xoshiro
    if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[0] = 1;
  }

  static Rng derive(uint64_t seed, uint64_t a) { return Rng(seed, {a}); }
  static Rng derive(uint64_t seed, uint64_t a, uint64_t b) { return Rng(seed, {a, b}); }
  static Rng derive(uint64_t seed, uint64_t a, uint64_t b, uint64_t c) {
    return Rng(seed, {a, b, c});
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n) {
    // rejection sampling keeps the distribution exact
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  // Box-Muller; both values of the pair are produced so the draw count per
  // call is fixed and stream positions stay predictable.
  void normal_pair(double& a, double& b) {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 6.283185307179586476925286766559 * u2;
    a = r * std::cos(t);
    b = r * std::sin(t);
  }

  double normal() {
    double a, b;
    normal_pair(a, b);
    return a;
  }

  template <typename T>
  void fill_normal(T* out, size_t n) {
    size_t i = 0;
    for (; i + 1 < n; i += 2) {
      double a, b;
      normal_pair(a, b);
      out[i] = static_cast<T>(a);
      out[i + 1] = static_cast<T>(b);
    }
    if (i < n) out[i] = static_cast<T>(normal());
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
  uint64_t s_[4];
};

}  // namespace doppler
