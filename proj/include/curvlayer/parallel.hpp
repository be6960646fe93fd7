#pragma once
#include <algorithm>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace curvlayer {

// Worker count for parallel_for. 0 means hardware concurrency.
void set_thread_count(int n);
int thread_count();

// Runs fn(i) for i in [0, n). Chunk boundaries are a function of n alone, and
// chunk results must only write state owned by index i, so the outcome does
// not depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

// Chunked reduction. make() builds an accumulator, fn(acc, i) folds item i,
// join(total, acc) merges chunk accumulators strictly in chunk order; the
// result is therefore identical for any worker count.
template <class Acc, class Make, class Fold, class Join>
Acc parallel_reduce(std::size_t n, Make make, Fold fn, Join join) {
  constexpr std::size_t kChunk = 2048;
  const std::size_t nchunks = (n + kChunk - 1) / kChunk;
  std::vector<Acc> partial;
  partial.reserve(nchunks);
  for (std::size_t c = 0; c < nchunks; ++c) partial.push_back(make());

  int workers = thread_count();
  if (workers <= 1 || nchunks <= 1) {
    for (std::size_t c = 0; c < nchunks; ++c) {
      const std::size_t lo = c * kChunk, hi = std::min(n, lo + kChunk);
      for (std::size_t i = lo; i < hi; ++i) fn(partial[c], i);
    }
  } else {
    std::vector<std::thread> pool;
    std::size_t per = (nchunks + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
      const std::size_t c0 = w * per, c1 = std::min(nchunks, c0 + per);
      if (c0 >= c1) break;
      pool.emplace_back([&, c0, c1] {
        for (std::size_t c = c0; c < c1; ++c) {
          const std::size_t lo = c * kChunk, hi = std::min(n, lo + kChunk);
          for (std::size_t i = lo; i < hi; ++i) fn(partial[c], i);
        }
      });
    }
    for (auto& t : pool) t.join();
  }

  Acc total = make();
  for (std::size_t c = 0; c < nchunks; ++c) join(total, partial[c]);
  return total;
}

}  // namespace curvlayer
