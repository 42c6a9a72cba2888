#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

namespace mvsds {

// Worker cap: MVSDS_THREADS if set, else hardware concurrency.
inline int max_threads() {
  static int cached = [] {
    if (const char* env = std::getenv("MVSDS_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }();
  return cached;
}

// Chunked parallel loop. Results must not depend on the partition: callers
// only write disjoint outputs, so the output is bit-identical for any
// thread count. `grain` is the minimum number of iterations per worker.
template <typename F>
void parallel_for(int64_t n, const F& fn, int64_t grain = 1) {
  if (n <= 0) return;
  int threads = static_cast<int>(
      std::min<int64_t>(max_threads(), (n + grain - 1) / grain));
  if (threads <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  int64_t chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    int64_t lo = t * chunk;
    int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace mvsds
