#include "stdit/kernels.hpp"

#include "stdit/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace stdit::kernels {

namespace {

template <class T>
using Scratch = detail::Storage<T>;

std::atomic<int> g_threads{1};

// Work below this many multiply-adds stays on the calling thread.
constexpr std::size_t kParallelGrain = 1u << 15;

template <class T>
constexpr std::size_t tile_cols() {
  return 128 / sizeof(T);  // two 512-bit vectors
}
constexpr std::size_t kTileRows = 8;

// acc[r][j] = sum_l a[r, l] * b[l, j] over a full kRows x tile_cols tile.
template <class T>
inline void full_tile(std::size_t k, const T* __restrict a, std::size_t lda, const T* __restrict b,
                      std::size_t ldb, T* __restrict c, std::size_t ldc, bool accumulate) {
  constexpr std::size_t C = tile_cols<T>();
  T acc[kTileRows][C] = {};
  for (std::size_t l = 0; l < k; ++l) {
    const T* brow = b + l * ldb;
#pragma GCC unroll 8
    for (std::size_t r = 0; r < kTileRows; ++r) {
      const T av = a[r * lda + l];
#pragma omp simd
      for (std::size_t j = 0; j < C; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (std::size_t r = 0; r < kTileRows; ++r) {
    T* crow = c + r * ldc;
    if (accumulate) {
      for (std::size_t j = 0; j < C; ++j) crow[j] += acc[r][j];
    } else {
      for (std::size_t j = 0; j < C; ++j) crow[j] = acc[r][j];
    }
  }
}

template <class T>
inline void edge_tile(std::size_t k, const T* a, std::size_t lda, const T* b, std::size_t ldb, T* c,
                      std::size_t ldc, std::size_t rows, std::size_t cols, bool accumulate) {
  constexpr std::size_t C = tile_cols<T>();
  T acc[kTileRows][C] = {};
  for (std::size_t l = 0; l < k; ++l) {
    const T* brow = b + l * ldb;
    for (std::size_t r = 0; r < rows; ++r) {
      const T av = a[r * lda + l];
#pragma omp simd
      for (std::size_t j = 0; j < cols; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    T* crow = c + r * ldc;
    for (std::size_t j = 0; j < cols; ++j) crow[j] = accumulate ? crow[j] + acc[r][j] : acc[r][j];
  }
}

// Rows [r0, r1) of C = A * B with A m x k and B k x n, both untransposed.
template <class T>
void gemm_rows(std::size_t r0, std::size_t r1, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
               bool accumulate) {
  constexpr std::size_t C = tile_cols<T>();
  for (std::size_t i = r0; i < r1; i += kTileRows) {
    const std::size_t rows = std::min(kTileRows, r1 - i);
    for (std::size_t j = 0; j < n; j += C) {
      const std::size_t cols = std::min(C, n - j);
      if (rows == kTileRows && cols == C) {
        full_tile(k, a + i * k, k, b + j, n, c + i * n + j, n, accumulate);
      } else {
        edge_tile(k, a + i * k, k, b + j, n, c + i * n + j, n, rows, cols, accumulate);
      }
    }
  }
}

template <class T>
void transpose_into(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  constexpr std::size_t B = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += B) {
    for (std::size_t j0 = 0; j0 < cols; j0 += B) {
      const std::size_t i1 = std::min(rows, i0 + B);
      const std::size_t j1 = std::min(cols, j0 + B);
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
    }
  }
}

// Returns a pointer to op(X) laid out row-major as rows x cols.
template <class T>
const T* as_row_major(bool trans, std::size_t rows, std::size_t cols, const T* x, Scratch<T>& scratch) {
  if (!trans) return x;
  scratch.resize(rows * cols);
  transpose_into(cols, rows, x, scratch.data());
  return scratch.data();
}

}  // namespace

int num_threads() { return g_threads.load(); }

void set_num_threads(int threads) { g_threads.store(std::max(1, threads)); }

template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b,
          T* c, bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) std::fill(c, c + m * n, T(0));
    return;
  }
  Scratch<T> scratch_a;
  Scratch<T> scratch_b;
  const T* pa = as_row_major(trans_a, m, k, a, scratch_a);
  const T* pb = as_row_major(trans_b, k, n, b, scratch_b);
  const std::size_t blocks = (m + kTileRows - 1) / kTileRows;
  const int threads = num_threads();
  const bool parallel = threads > 1 && m * n * k >= kParallelGrain && blocks > 1;
  auto row_block = [&](std::size_t blk) {
    const std::size_t r0 = blk * kTileRows;
    gemm_rows(r0, std::min(m, r0 + kTileRows), n, k, pa, pb, c, accumulate);
  };
  // Entering an OpenMP region costs microseconds even when it runs serially.
  if (!parallel) {
    for (std::size_t blk = 0; blk < blocks; ++blk) row_block(blk);
    return;
  }
#pragma omp parallel for schedule(static) num_threads(threads)
  for (std::size_t blk = 0; blk < blocks; ++blk) row_block(blk);
}

template <class T>
void gemm_batched(std::size_t batch, bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                  const T* a, std::size_t stride_a, const T* b, std::size_t stride_b, T* c,
                  std::size_t stride_c) {
  if (batch == 0 || m == 0 || n == 0) return;
  const int threads = num_threads();
  const bool parallel = threads > 1 && batch * m * n * k >= kParallelGrain && batch > 1;
  // Shared operands are packed once.
  Scratch<T> shared_a;
  Scratch<T> shared_b;
  const T* pa_shared = stride_a == 0 ? as_row_major(trans_a, m, k, a, shared_a) : nullptr;
  const T* pb_shared = stride_b == 0 ? as_row_major(trans_b, k, n, b, shared_b) : nullptr;
  auto one = [&](std::size_t i, Scratch<T>& scratch_a, Scratch<T>& scratch_b) {
    const T* pa = pa_shared ? pa_shared : as_row_major(trans_a, m, k, a + i * stride_a, scratch_a);
    const T* pb = pb_shared ? pb_shared : as_row_major(trans_b, k, n, b + i * stride_b, scratch_b);
    T* pc = c + i * stride_c;
    if (k == 0) {
      std::fill(pc, pc + m * n, T(0));
    } else {
      gemm_rows(0, m, n, k, pa, pb, pc, false);
    }
  };
  if (!parallel) {
    Scratch<T> scratch_a;
    Scratch<T> scratch_b;
    for (std::size_t i = 0; i < batch; ++i) one(i, scratch_a, scratch_b);
    return;
  }
#pragma omp parallel num_threads(threads)
  {
    Scratch<T> scratch_a;
    Scratch<T> scratch_b;
#pragma omp for schedule(static)
    for (std::size_t i = 0; i < batch; ++i) one(i, scratch_a, scratch_b);
  }
}

template <class T>
void softmax_rows(std::size_t rows, std::size_t cols, const T* in, T* out) {
  const int threads = num_threads();
  const bool parallel = threads > 1 && rows * cols >= kParallelGrain;
  auto row = [&](std::size_t r) {
    const T* x = in + r * cols;
    T* y = out + r * cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < cols; ++j) mx = std::max(mx, x[j]);
    T sum = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < cols; ++j) y[j] *= inv;
  };
  if (!parallel) {
    for (std::size_t r = 0; r < rows; ++r) row(r);
    return;
  }
#pragma omp parallel for schedule(static) num_threads(threads)
  for (std::size_t r = 0; r < rows; ++r) row(r);
}

template <class T>
void layer_norm_rows(std::size_t rows, std::size_t cols, const T* in, T eps, T* out, T* mean, T* rstd) {
  const int threads = num_threads();
  const bool parallel = threads > 1 && rows * cols >= kParallelGrain;
  auto row = [&](std::size_t r) {
    const T* x = in + r * cols;
    T* y = out + r * cols;
    T mu = 0;
    for (std::size_t j = 0; j < cols; ++j) mu += x[j];
    mu /= static_cast<T>(cols);
    T var = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      const T d = x[j] - mu;
      var += d * d;
    }
    var /= static_cast<T>(cols);
    const T rs = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < cols; ++j) y[j] = (x[j] - mu) * rs;
    mean[r] = mu;
    rstd[r] = rs;
  };
  if (!parallel) {
    for (std::size_t r = 0; r < rows; ++r) row(r);
    return;
  }
#pragma omp parallel for schedule(static) num_threads(threads)
  for (std::size_t r = 0; r < rows; ++r) row(r);
}

namespace reference {

template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b,
          T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      T sum = 0;
      for (std::size_t l = 0; l < k; ++l) {
        const T av = trans_a ? a[l * m + i] : a[i * k + l];
        const T bv = trans_b ? b[j * k + l] : b[l * n + j];
        sum += av * bv;
      }
      c[i * n + j] = sum;
    }
  }
}

template <class T>
void softmax_rows(std::size_t rows, std::size_t cols, const T* in, T* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    T mx = in[r * cols];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, in[r * cols + j]);
    T sum = 0;
    for (std::size_t j = 0; j < cols; ++j) sum += std::exp(in[r * cols + j] - mx);
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = std::exp(in[r * cols + j] - mx) / sum;
  }
}

template <class T>
void layer_norm_rows(std::size_t rows, std::size_t cols, const T* in, T eps, T* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    T mu = 0;
    for (std::size_t j = 0; j < cols; ++j) mu += in[r * cols + j];
    mu /= static_cast<T>(cols);
    T var = 0;
    for (std::size_t j = 0; j < cols; ++j) var += (in[r * cols + j] - mu) * (in[r * cols + j] - mu);
    var /= static_cast<T>(cols);
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = (in[r * cols + j] - mu) / std::sqrt(var + eps);
  }
}

}  // namespace reference

#define STDIT_INSTANTIATE(T)                                                                                 \
  template void gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool);    \
  template void gemm_batched<T>(std::size_t, bool, bool, std::size_t, std::size_t, std::size_t, const T*,    \
                                std::size_t, const T*, std::size_t, T*, std::size_t);                        \
  template void softmax_rows<T>(std::size_t, std::size_t, const T*, T*);                                     \
  template void layer_norm_rows<T>(std::size_t, std::size_t, const T*, T, T*, T*, T*);                       \
  template void reference::gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, const T*, const T*,    \
                                   T*);                                                                      \
  template void reference::softmax_rows<T>(std::size_t, std::size_t, const T*, T*);                          \
  template void reference::layer_norm_rows<T>(std::size_t, std::size_t, const T*, T, T*);

STDIT_INSTANTIATE(float)
STDIT_INSTANTIATE(double)

#undef STDIT_INSTANTIATE

}  // namespace stdit::kernels
