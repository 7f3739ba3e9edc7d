#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace lskld {

/// Worker count: TRAJKLD_THREADS caps it, hardware_concurrency is the default.
inline int max_threads() {
  int hc = static_cast<int>(std::thread::hardware_concurrency());
  if (hc < 1) hc = 1;
  if (const char* env = std::getenv("TRAJKLD_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1 && cap < hc) return cap;
    if (cap >= 1) return cap;
  }
  return hc;
}

/// Run fn(i) for i in [0, n) on up to n_threads workers.
/// Tasks must not touch shared mutable state except through their own
/// index; the first exception thrown by any task is rethrown here.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, int n_threads = 0) {
  if (n == 0) return;
  int workers = n_threads > 0 ? n_threads : max_threads();
  if (static_cast<std::size_t>(workers) > n) workers = static_cast<int>(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int t = 0; t < workers; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n || failed.load()) return;
        try {
          fn(i);
        } catch (...) {
          if (!failed.exchange(true)) first_error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace lskld
