#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

#include "posematch/geometry.hpp"

namespace posematch {

/// Worker count: POSE_MATCH_THREADS when set and positive, else the hardware concurrency.
inline unsigned worker_count() {
  if (const char* env = std::getenv("POSE_MATCH_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<unsigned>(v);
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n). Results must be written to per-index slots so
/// output does not depend on scheduling. The exception of the lowest failing index is rethrown.
template <typename Fn>
void parallel_for(Index n, Fn&& fn, unsigned workers = worker_count()) {
  workers = static_cast<unsigned>(std::min<Index>(std::max(1u, workers), std::max<Index>(n, 1)));
  if (workers == 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<Index> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (Index i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace posematch
