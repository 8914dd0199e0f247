#pragma once

#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include "nerform/check.hpp"

namespace nf {

// Runs fn(i) for i in [0, n) across up to n_threads workers.  Work items are
// claimed from an atomic counter; each item writes only to its own output
// slot, and callers combine the slots afterwards in index order, so results
// never depend on the thread count or on scheduling.
inline void parallel_for(int n, int n_threads, const std::function<void(int)>& fn) {
  NF_CHECK(n >= 0);
  if (n == 0) return;
  if (n_threads < 1) n_threads = 1;
  if (n_threads > n) n_threads = n;
  if (n_threads == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mu;
  auto worker = [&]() {
    for (;;) {
      int i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> threads;
  threads.reserve(std::size_t(n_threads));
  for (int t = 0; t < n_threads; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace nf
