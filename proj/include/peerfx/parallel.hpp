#pragma once

#include <atomic>
#include <functional>
#include <thread>
#include <vector>

namespace peerfx {

inline int& thread_count_ref() {
  static int n = 1;
  return n;
}

/// Global worker count used by the parallel loops below. 0 means
/// hardware concurrency. Library functions stay pure; this only
/// controls how per-agent loops are chunked.
inline void set_threads(int n) {
  if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
  thread_count_ref() = std::max(1, n);
}

inline int threads() { return thread_count_ref(); }

/// Runs fn(begin, end) over fixed-size blocks of [0, n). Blocks are a
/// deterministic partition, so block-local accumulators combined in
/// block order give bit-identical results for any thread count.
template <typename Fn>
void parallel_blocks(int n, Fn&& fn, int block = 256) {
  const int nblocks = (n + block - 1) / block;
  const int nt = std::min(threads(), nblocks);
  if (nt <= 1) {
    for (int b = 0; b < nblocks; ++b)
      fn(b, b * block, std::min(n, (b + 1) * block));
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(nt);
  for (int t = 0; t < nt; ++t) {
    pool.emplace_back([&] {
      int b;
      while ((b = next.fetch_add(1)) < nblocks)
        fn(b, b * block, std::min(n, (b + 1) * block));
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace peerfx
