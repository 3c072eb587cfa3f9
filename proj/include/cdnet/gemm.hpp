#pragma once

// Blocked matrix kernels for the conv/LSTM lowering. Hand-rolled instead of
// BLAS so that results are bit-stable regardless of thread count: every
// output element is accumulated by exactly one thread in a fixed k-order.

#include <algorithm>
#include <cstddef>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cdnet {

namespace detail {
constexpr int kNB = 128;  // column block, keeps the B panel in L1/L2
}

// C(M,N) = A(M,K) * B(K,N), all row-major. If accumulate, C += product.
template <typename T>
void gemm_nn(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate = false) {
  const int nblocks = (N + detail::kNB - 1) / detail::kNB;
#pragma omp parallel for schedule(static) collapse(2)
  for (int nb = 0; nb < nblocks; ++nb) {
    for (int m = 0; m < M; ++m) {
      const int n0 = nb * detail::kNB;
      const int nw = std::min(detail::kNB, N - n0);
      T acc[detail::kNB];
      if (accumulate) {
        const T* crow = C + static_cast<size_t>(m) * N + n0;
        for (int j = 0; j < nw; ++j) acc[j] = crow[j];
      } else {
        for (int j = 0; j < nw; ++j) acc[j] = T(0);
      }
      const T* arow = A + static_cast<size_t>(m) * K;
      for (int k = 0; k < K; ++k) {
        const T a = arow[k];
        const T* brow = B + static_cast<size_t>(k) * N + n0;
#pragma omp simd
        for (int j = 0; j < nw; ++j) acc[j] += a * brow[j];
      }
      T* crow = C + static_cast<size_t>(m) * N + n0;
      for (int j = 0; j < nw; ++j) crow[j] = acc[j];
    }
  }
}

// C(M,N) = A(M,K) * B(N,K)^T  (dot products along contiguous rows)
template <typename T>
void gemm_nt(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate = false) {
#pragma omp parallel for schedule(static)
  for (int m = 0; m < M; ++m) {
    const T* arow = A + static_cast<size_t>(m) * K;
    for (int n = 0; n < N; ++n) {
      const T* brow = B + static_cast<size_t>(n) * K;
      T acc = T(0);
#pragma omp simd reduction(+ : acc)
      for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
      T* c = C + static_cast<size_t>(m) * N + n;
      *c = accumulate ? *c + acc : acc;
    }
  }
}

// C(K,N) = A(M,K)^T * B(M,N)  (A is small and revisited column-wise)
template <typename T>
void gemm_tn(int M, int N, int K, const T* A, const T* B, T* C, bool accumulate = false) {
  const int nblocks = (N + detail::kNB - 1) / detail::kNB;
#pragma omp parallel for schedule(static) collapse(2)
  for (int nb = 0; nb < nblocks; ++nb) {
    for (int k = 0; k < K; ++k) {
      const int n0 = nb * detail::kNB;
      const int nw = std::min(detail::kNB, N - n0);
      T acc[detail::kNB];
      if (accumulate) {
        const T* crow = C + static_cast<size_t>(k) * N + n0;
        for (int j = 0; j < nw; ++j) acc[j] = crow[j];
      } else {
        for (int j = 0; j < nw; ++j) acc[j] = T(0);
      }
      for (int m = 0; m < M; ++m) {
        const T a = A[static_cast<size_t>(m) * K + k];
        const T* brow = B + static_cast<size_t>(m) * N + n0;
#pragma omp simd
        for (int j = 0; j < nw; ++j) acc[j] += a * brow[j];
      }
      T* crow = C + static_cast<size_t>(k) * N + n0;
      for (int j = 0; j < nw; ++j) crow[j] = acc[j];
    }
  }
}

}  // namespace cdnet
