#pragma once

#include <atomic>
#include <functional>
#include <thread>
#include <vector>

namespace fovea {

/// Global worker count for image-level parallelism. Set once by the CLI.
inline int& thread_count() {
  static int n = static_cast<int>(std::thread::hardware_concurrency());
  return n;
}

/// Runs fn(i) for i in [0, n). Work is claimed dynamically but every index is
/// processed exactly once and writes only to its own slot, so results are
/// identical for any worker count; callers aggregate in index order.
inline void parallel_for(long n, const std::function<void(long)>& fn, int workers = 0) {
  if (workers <= 0) workers = thread_count();
  if (workers <= 1 || n <= 1) {
    for (long i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<long> next{0};
  auto body = [&] {
    for (;;) {
      long i = next.fetch_add(1);
      if (i >= n) return;
      fn(i);
    }
  };
  std::vector<std::thread> pool;
  const int spawn = static_cast<int>(std::min<long>(workers, n)) - 1;
  pool.reserve(static_cast<size_t>(spawn));
  for (int t = 0; t < spawn; ++t) pool.emplace_back(body);
  body();
  for (auto& th : pool) th.join();
}

}  // namespace fovea
