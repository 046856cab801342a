#pragma once

#include <thread>
#include <vector>

#include "genpass/errors.hpp"

namespace genpass {

// Static block partition of [0, n) across `threads` workers. Callers must
// write only to per-index or per-worker slots; results are merged by the
// caller in index order, so the outcome never depends on the thread count.
template <typename Fn>
void parallel_for(int n, int threads, Fn&& body) {
  if (threads < 1) throw InputError("parallel_for: threads must be >= 1");
  if (n <= 0) return;
  if (threads == 1 || n == 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  const int workers = std::min(threads, n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    const int lo = static_cast<int>(static_cast<long long>(n) * w / workers);
    const int hi =
        static_cast<int>(static_cast<long long>(n) * (w + 1) / workers);
    pool.emplace_back([lo, hi, &body] {
      for (int i = lo; i < hi; ++i) body(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace genpass
