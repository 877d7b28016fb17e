#include "lesionseg/parallel.hpp"

#include <atomic>
#include <stdexcept>
#include <thread>

namespace lesionseg {

namespace {
int g_thread_count = 1;
}

void set_thread_count(int n) {
  if (n < 1) throw std::invalid_argument("thread count must be >= 1");
  g_thread_count = n;
}

int thread_count() { return g_thread_count; }

void parallel_blocks(std::size_t n,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn,
                     std::size_t block_size) {
  if (n == 0) return;
  const std::size_t n_blocks = block_count(n, block_size);
  const std::size_t n_workers =
      std::min<std::size_t>(static_cast<std::size_t>(g_thread_count), n_blocks);
  if (n_workers <= 1) {
    for (std::size_t b = 0; b < n_blocks; ++b) {
      const std::size_t begin = b * block_size;
      fn(b, begin, std::min(begin + block_size, n));
    }
    return;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t b = next.fetch_add(1);
      if (b >= n_blocks) return;
      const std::size_t begin = b * block_size;
      fn(b, begin, std::min(begin + block_size, n));
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(n_workers - 1);
  for (std::size_t t = 1; t < n_workers; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
}

}  // namespace lesionseg
