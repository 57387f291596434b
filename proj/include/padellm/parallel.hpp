#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace padellm {

// Runs fn(i) for i in [0, count) on at most `concurrency` threads. Blocks
// until every call has returned; the first exception thrown is rethrown.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t concurrency, Fn&& fn) {
  if (count == 0) return;
  concurrency = std::clamp<std::size_t>(concurrency, 1, count);
  if (concurrency == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> threads;
  threads.reserve(concurrency);
  for (std::size_t t = 0; t < concurrency; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace padellm
