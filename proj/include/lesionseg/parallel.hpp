#pragma once

#include <cstddef>
#include <functional>
#include <vector>

namespace lesionseg {

// Global worker count used by parallel_blocks. Defaults to 1.
void set_thread_count(int n);
int thread_count();

// Work-items [0,n) are split into fixed-size blocks. Blocks are claimed
// dynamically by workers, but any per-block outputs are indexed by block id,
// so combining them in block order gives results that do not depend on the
// number of threads or on scheduling.
inline constexpr std::size_t kDefaultBlockSize = 4096;

void parallel_blocks(std::size_t n,
                     const std::function<void(std::size_t block, std::size_t begin,
                                              std::size_t end)>& fn,
                     std::size_t block_size = kDefaultBlockSize);

inline std::size_t block_count(std::size_t n, std::size_t block_size = kDefaultBlockSize) {
  return (n + block_size - 1) / block_size;
}

// Ordered sum reduction: per_block(begin, end) -> double, summed over blocks
// in index order.
template <class F>
double parallel_block_sum(std::size_t n, F&& per_block,
                          std::size_t block_size = kDefaultBlockSize) {
  std::vector<double> partial(block_count(n, block_size), 0.0);
  parallel_blocks(
      n,
      [&](std::size_t block, std::size_t begin, std::size_t end) {
        partial[block] = per_block(begin, end);
      },
      block_size);
  double total = 0.0;
  for (double v : partial) total += v;
  return total;
}

}  // namespace lesionseg
