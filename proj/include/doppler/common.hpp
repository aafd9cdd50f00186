#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace doppler {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Global worker cap, settable from the CLI (--threads). Results never depend
// on the cap: work is partitioned by index, not by arrival order.
inline int& max_threads_ref() {
  static int n = 2;
  return n;
}
inline void set_max_threads(int n) { max_threads_ref() = n > 0 ? n : 1; }
inline int max_threads() { return max_threads_ref(); }

// Index-partitioned parallel loop. Each index is processed exactly once and
// writes only to its own slot, so output is identical for any thread count.
inline void parallel_for(size_t n, const std::function<void(size_t)>& body) {
  const int workers = std::min<size_t>(max_threads(), n);
  if (workers <= 1 || n < 2) {
    for (size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&]() {
      for (size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) body(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace doppler
