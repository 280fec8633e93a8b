#pragma once

#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace bitbudget {

// Worker cap from BITBUDGET_THREADS; defaults to 1 so runs are single-threaded
// unless explicitly widened. Results are reduced in a fixed order either way.
inline int env_worker_count() {
  const char* s = std::getenv("BITBUDGET_THREADS");
  if (!s) return 1;
  const int n = std::atoi(s);
  return n < 1 ? 1 : n;
}

// Runs fn(0..n-1); each index is claimed exactly once. Callers own any
// ordering of the results (workers write disjoint slots).
inline void parallel_for(int n, int workers, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  if (workers <= 1 || n == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  const int t = std::min(workers, n);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(t));
  for (int w = 0; w < t; ++w)
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  for (std::thread& th : pool) th.join();
}

}  // namespace bitbudget
