#include "qvit/gemm.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace qvit::kernels {
namespace {

unsigned threads_from_env() {
  if (const char* env = std::getenv("QVIT_THREADS")) {
    try {
      const long n = std::stol(env);
      if (n >= 1) return static_cast<unsigned>(n);
    } catch (...) {
    }
  }
  return 1;
}

std::atomic<unsigned> g_threads{threads_from_env()};

constexpr std::size_t kParallelMinWork = 1u << 18;

template <typename RowFn>
void for_rows(std::size_t m, std::size_t work, RowFn&& fn) {
  const unsigned t = std::min<unsigned>(g_threads.load(), static_cast<unsigned>(m));
  if (t <= 1 || work < kParallelMinWork) {
    fn(std::size_t{0}, m);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(t);
  const std::size_t chunk = (m + t - 1) / t;
  for (unsigned w = 0; w < t; ++w) {
    const std::size_t lo = w * chunk;
    const std::size_t hi = std::min(m, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

unsigned thread_count() { return g_threads.load(); }
void set_thread_count(unsigned n) { g_threads.store(n == 0 ? 1 : n); }

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const float* a, const float* b, float* c, bool accumulate) {
  // The inner loop runs over contiguous rows of B, so B^T is materialized.
  std::vector<float> b_buf;
  const float* bn = b;
  if (trans_b) {
    b_buf.resize(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) b_buf[p * n + j] = b[j * k + p];
    bn = b_buf.data();
  }
  for_rows(m, m * n * k, [&](std::size_t lo, std::size_t hi) {
    std::vector<double> acc(n);
    for (std::size_t i = lo; i < hi; ++i) {
      std::fill(acc.begin(), acc.end(), 0.0);
      double* accp = acc.data();
      for (std::size_t p = 0; p < k; ++p) {
        const double av = trans_a ? a[p * m + i] : a[i * k + p];
        if (av == 0.0) continue;
        const float* brow = bn + p * n;
        for (std::size_t j = 0; j < n; ++j) accp[j] += av * static_cast<double>(brow[j]);
      }
      float* crow = c + i * n;
      if (accumulate) {
        for (std::size_t j = 0; j < n; ++j)
          crow[j] = static_cast<float>(static_cast<double>(crow[j]) + accp[j]);
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<float>(accp[j]);
      }
    }
  });
}

void gemm_int(std::size_t m, std::size_t n, std::size_t k, const std::int32_t* a,
              const std::int32_t* b, std::int64_t* c) {
  for_rows(m, m * n * k, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      std::int64_t* crow = c + i * n;
      std::fill(crow, crow + n, std::int64_t{0});
      for (std::size_t p = 0; p < k; ++p) {
        const std::int64_t av = a[i * k + p];
        if (av == 0) continue;
        const std::int32_t* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  });
}

}  // namespace qvit::kernels
