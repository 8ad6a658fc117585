#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace casis::detail {

/// C[M,N] = alpha * op(A) * op(B) + beta * C, all row-major and densely packed.
/// op(A) is [M,K]; A itself is [K,M] when trans_a. Likewise for B.
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t M, std::size_t N, std::size_t K, T alpha,
          const T* A, const T* B, T beta, T* C) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using CMap = Eigen::Map<const Mat>;
  const auto m = static_cast<Eigen::Index>(M);
  const auto n = static_cast<Eigen::Index>(N);
  const auto k = static_cast<Eigen::Index>(K);
  Eigen::Map<Mat> c(C, m, n);
  if (beta == T(0))
    c.setZero();
  else if (beta != T(1))
    c *= beta;
  if (M == 0 || N == 0 || K == 0) return;
  if (!trans_a && !trans_b)
    c.noalias() += alpha * (CMap(A, m, k) * CMap(B, k, n));
  else if (!trans_a && trans_b)
    c.noalias() += alpha * (CMap(A, m, k) * CMap(B, n, k).transpose());
  else if (trans_a && !trans_b)
    c.noalias() += alpha * (CMap(A, k, m).transpose() * CMap(B, k, n));
  else
    c.noalias() += alpha * (CMap(A, k, m).transpose() * CMap(B, n, k).transpose());
}

}  // namespace casis::detail
