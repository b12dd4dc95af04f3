#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace vas {

/// Number of workers used when a caller passes 0.
inline unsigned default_workers() {
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1u : hw;
}

/// Runs fn(task) for task in [0, n_tasks) on up to `workers` threads.
///
/// Tasks write into caller-owned per-task slots, so results never depend on
/// which thread ran which task. The first exception thrown by any task is
/// rethrown on the calling thread after all workers join.
template <typename Fn>
void parallel_for(std::size_t n_tasks, unsigned workers, Fn&& fn) {
  if (workers == 0) workers = default_workers();
  const std::size_t n_threads = std::min<std::size_t>(workers, n_tasks);
  if (n_threads <= 1) {
    for (std::size_t t = 0; t < n_tasks; ++t) fn(t);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto body = [&] {
    for (;;) {
      const std::size_t t = next.fetch_add(1, std::memory_order_relaxed);
      if (t >= n_tasks) return;
      try {
        fn(t);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next.store(n_tasks, std::memory_order_relaxed);
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(n_threads - 1);
  for (std::size_t i = 1; i < n_threads; ++i) pool.emplace_back(body);
  body();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace vas
