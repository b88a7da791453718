#pragma once

#include <algorithm>

#include "scl/tensor.hpp"

// Internal dense kernels shared by matmul and the convolution lowering.
// Row strides are explicit so callers can run on submatrices (per-sample
// column blocks of a patch matrix) without gather copies. Summation order is
// fixed, so results are deterministic for a given build regardless of
// problem size.

namespace scl::detail {

// c[m x n] += a[m x k] * b[k x n] with leading dimensions lda/ldb/ldc.
// i-blocked by 4 (wider blocking spills registers under gcc) with an n-tile
// that keeps the active c rows in L1.
template <typename T>
void gemm_accum_ld(const T* __restrict a, i64 lda, const T* __restrict b, i64 ldb,
                   T* __restrict c, i64 ldc, i64 m, i64 k, i64 n) {
  constexpr i64 kNTile = 512;
  for (i64 j0 = 0; j0 < n; j0 += kNTile) {
    const i64 jb = std::min(kNTile, n - j0);
    i64 i0 = 0;
    for (; i0 + 4 <= m; i0 += 4) {
      T* c0 = c + (i0 + 0) * ldc + j0;
      T* c1 = c + (i0 + 1) * ldc + j0;
      T* c2 = c + (i0 + 2) * ldc + j0;
      T* c3 = c + (i0 + 3) * ldc + j0;
      for (i64 p = 0; p < k; ++p) {
        const T a0 = a[(i0 + 0) * lda + p];
        const T a1 = a[(i0 + 1) * lda + p];
        const T a2 = a[(i0 + 2) * lda + p];
        const T a3 = a[(i0 + 3) * lda + p];
        const T* bp = b + p * ldb + j0;
        for (i64 j = 0; j < jb; ++j) {
          const T bv = bp[j];
          c0[j] += a0 * bv;
          c1[j] += a1 * bv;
          c2[j] += a2 * bv;
          c3[j] += a3 * bv;
        }
      }
    }
    for (; i0 < m; ++i0) {
      T* c0 = c + i0 * ldc + j0;
      for (i64 p = 0; p < k; ++p) {
        const T a0 = a[i0 * lda + p];
        const T* bp = b + p * ldb + j0;
        for (i64 j = 0; j < jb; ++j) c0[j] += a0 * bp[j];
      }
    }
  }
}

template <typename T>
void gemm_accum(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
  gemm_accum_ld(a, k, b, n, c, n, m, k, n);
}

// c[m x n] += a[m x k] * b[n x k]^T, rows of a at lda, rows of b at ldb.
// Row-dot-row form; the 16 partial sums give the compiler independent FMA
// chains without reassociating beyond the fixed lane order.
template <typename T>
void gemm_abt_accum_ld(const T* __restrict a, i64 lda, const T* __restrict b, i64 ldb,
                       T* __restrict c, i64 ldc, i64 m, i64 k, i64 n) {
  constexpr i64 kLanes = 16;
  for (i64 i = 0; i < m; ++i) {
    const T* ar = a + i * lda;
    for (i64 j = 0; j < n; ++j) {
      const T* br = b + j * ldb;
      T acc[kLanes] = {};
      i64 p = 0;
      for (; p + kLanes <= k; p += kLanes)
        for (i64 l = 0; l < kLanes; ++l) acc[l] += ar[p + l] * br[p + l];
      T tail{};
      for (; p < k; ++p) tail += ar[p] * br[p];
      T s{};
      for (i64 l = 0; l < kLanes; ++l) s += acc[l];
      c[i * ldc + j] += s + tail;
    }
  }
}

}  // namespace scl::detail
