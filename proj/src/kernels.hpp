#pragma once

#include <cstddef>
#include <vector>

#include <cblas.h>

// Row-major GEMM kernels; each accumulates into C. Small products use plain
// loops (ascending-index summation); larger ones go to single-threaded BLAS.
namespace stmgt::kernels {

inline constexpr std::size_t kBlasThreshold = 100000;  // m*n*k below this stays in-loop

// C(m x n) += A(m x k) B(k x n)
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* A, const double* B,
                    double* C) {
  if (m * n * k >= kBlasThreshold) {
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), 1.0, A, static_cast<int>(k), B, static_cast<int>(n), 1.0, C,
                static_cast<int>(n));
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a = A[i * k + p];
      const double* b = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
    }
  }
}

// C(m x n) += A(m x k) B(n x k)^T
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* A, const double* B,
                    double* C) {
  if (m * n * k >= kBlasThreshold) {
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), 1.0, A, static_cast<int>(k), B, static_cast<int>(k), 1.0, C,
                static_cast<int>(n));
    return;
  }
  thread_local std::vector<double> bt;
  bt.resize(n * k);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = B[j * k + p];
  for (std::size_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a = A[i * k + p];
      const double* b = bt.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
    }
  }
}

// C(m x n) += A(k x m)^T B(k x n)
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* A, const double* B,
                    double* C) {
  if (m * n * k >= kBlasThreshold) {
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), 1.0, A, static_cast<int>(m), B, static_cast<int>(n), 1.0, C,
                static_cast<int>(n));
    return;
  }
  for (std::size_t p = 0; p < k; ++p) {
    const double* b = B + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double a = A[p * m + i];
      double* c = C + i * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
    }
  }
}

}  // namespace stmgt::kernels
