// Deterministic fork-join helper. Work is split by index range only; every
// reduction stays inside one worker's slice, so results are bit-identical for
// any thread count. ADR_THREADS=1 forces serial execution.
#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace adr {

inline int worker_count() {
  static const int n = [] {
    if (const char* env = std::getenv("ADR_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
  }();
  return n;
}

// fn(i) for i in [0, n); partitioned contiguously across workers.
template <typename Fn>
void parallel_for(int n, Fn&& fn, int min_grain = 1) {
  const int workers = worker_count();
  if (n <= 0) return;
  if (workers <= 1 || n <= min_grain) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  const int use = std::min(workers, n);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(use - 1));
  const int chunk = (n + use - 1) / use;
  auto run = [&fn, n, chunk](int w) {
    const int lo = w * chunk;
    const int hi = std::min(n, lo + chunk);
    for (int i = lo; i < hi; ++i) fn(i);
  };
  for (int w = 1; w < use; ++w) pool.emplace_back(run, w);
  run(0);
  for (auto& t : pool) t.join();
}

}  // namespace adr
