#pragma once

#include <cstddef>

// Compute kernels behind the tensor ops.
//
// `stdit::kernels` holds the OpenMP-parallel versions. Each parallel loop
// splits work over independent output rows and every row is reduced in the
// same order regardless of thread count, so results are bitwise identical for
// any thread count. `stdit::kernels::reference` holds straightforward serial
// versions used as test oracles and benchmark baselines.

namespace stdit::kernels {

/// Thread count used by the parallel kernels. Defaults to 1.
int num_threads();
void set_num_threads(int threads);

/// C[m x n] = op(A) * op(B) (+ C when `accumulate`), all row-major and
/// contiguous. op(A) is A (m x k) or, with `trans_a`, the transpose of a
/// k x m matrix. Same for B.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b,
          T* c, bool accumulate = false);

/// `batch` independent gemms over contiguous slabs. A stride of 0 reuses the
/// same operand for every batch entry.
template <class T>
void gemm_batched(std::size_t batch, bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                  const T* a, std::size_t stride_a, const T* b, std::size_t stride_b, T* c, std::size_t stride_c);

/// Numerically stable softmax over each contiguous row of length `cols`.
template <class T>
void softmax_rows(std::size_t rows, std::size_t cols, const T* in, T* out);

/// Row-wise normalization to zero mean and unit variance. Writes the per-row
/// mean and reciprocal standard deviation for the backward pass.
template <class T>
void layer_norm_rows(std::size_t rows, std::size_t cols, const T* in, T eps, T* out, T* mean, T* rstd);

namespace reference {

template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b,
          T* c);

template <class T>
void softmax_rows(std::size_t rows, std::size_t cols, const T* in, T* out);

template <class T>
void layer_norm_rows(std::size_t rows, std::size_t cols, const T* in, T eps, T* out);

}  // namespace reference

}  // namespace stdit::kernels
