#pragma once

#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace sdlab {

// Static chunking over [0, n); results must go to disjoint slots so callers
// can keep their reduction order fixed.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t nt = std::min<std::size_t>(threads, n);
  std::vector<std::thread> pool;
  pool.reserve(nt);
  for (std::size_t w = 0; w < nt; ++w) {
    pool.emplace_back([&, w]() {
      for (std::size_t i = w; i < n; i += nt) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace sdlab
