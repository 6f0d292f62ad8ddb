#pragma once

#include <atomic>
#include <thread>
#include <vector>

namespace coopdet {

// Runs f(i) for i in [0, n) across a small thread pool. Results must be
// written to pre-sized, index-disjoint slots so that any later reduction can
// happen in index order, keeping the computation deterministic regardless of
// scheduling.
template <typename F>
void parallel_for(int n, int threads, F&& f) {
  if (threads <= 0)
    threads = static_cast<int>(std::thread::hardware_concurrency());
  if (threads <= 1 || n <= 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  threads = std::min(threads, n);
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mu;
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&]() {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= n) return;
        try {
          f(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace coopdet
