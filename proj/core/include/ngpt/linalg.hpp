#pragma once

#include <span>
#include <vector>

#include "ngpt/tensor.hpp"

namespace ngpt {

/// C = A * B. Each output element is accumulated sequentially over k, so the
/// result is bit-for-bit reproducible and independent of the thread count.
Tensor matmul(const Tensor& a, const Tensor& b);

/// C = A * B^T.
Tensor matmul_nt(const Tensor& a, const Tensor& b);

/// C = A^T * B.
Tensor matmul_tn(const Tensor& a, const Tensor& b);

/// Raw kernel: C[m x n] (+)= A[m x k] * B[k x n] with leading dimensions.
/// When `accumulate` is false C is overwritten.
void gemm(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c,
          std::size_t ldc, std::size_t m, std::size_t n, std::size_t k, bool accumulate);

/// Row-wise softmax with max subtraction. -inf entries map to exactly 0.
/// Throws NumericError for a row that is entirely -inf.
Tensor softmax_rows(const Tensor& x);

double l2_norm(std::span<const double> v);

/// Singular values in descending order via one-sided (Hestenes) Jacobi.
/// A column pair is rotated while |a_p . a_q| > 1e-12 * ||a_p|| ||a_q||.
std::vector<double> singular_values(const Tensor& m);

/// Number of worker threads for numeric kernels, read once from
/// NGPT_LAB_THREADS (default 1).
int kernel_threads();
void set_kernel_threads(int n);

}  // namespace ngpt
