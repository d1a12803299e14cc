#pragma once

#include <cstddef>
#include <cstdint>

namespace qvit::kernels {

// C[m x n] = op(A) * op(B), with op(A) m x k and op(B) k x n. Storage is
// float; every dot product accumulates in double. When `accumulate` is set
// the product is added to C instead of overwriting it.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const float* a, const float* b, float* c, bool accumulate = false);

// C[m x n] = A[m x k] * B[k x n] over integer codes, exact int64 accumulation.
void gemm_int(std::size_t m, std::size_t n, std::size_t k, const std::int32_t* a,
              const std::int32_t* b, std::int64_t* c);

// Intra-op worker cap. Initialized from QVIT_THREADS (default 1). Row
// partitioning keeps results bit-identical for any thread count.
unsigned thread_count();
void set_thread_count(unsigned n);

}  // namespace qvit::kernels
