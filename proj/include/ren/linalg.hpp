#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <string_view>

#include "ren/errors.hpp"

namespace ren {

// Tokens, prompts and patches are rows; weights are stored (out x in) so a
// projection of a row batch X is X * W^T.
template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

template <class Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

template <class Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, std::string_view what) {
  if (!m.allFinite()) throw NumericsError(std::string(what) + " contains NaN or Inf");
}

// A * B evaluated one row of A at a time. Each output row depends only on
// the matching input row, so results are bit-identical under row
// permutation and for duplicated rows (a blocked GEMM does not guarantee
// that for its remainder rows).
template <class DA, class DB>
auto rowwise_product(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b) {
  using T = typename DA::Scalar;
  Matrix<T> out(a.rows(), b.cols());
  RowVector<T> row(a.cols());
  RowVector<T> res(b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    row = a.row(i);
    res.noalias() = row * b;
    out.row(i) = res;
  }
  return out;
}

inline std::span<const float> as_span(const MatrixF& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

// Cosine similarity of two rows; zero-norm rows compare as 0.
template <class A, class B>
double cosine(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  const double na = a.template cast<double>().norm();
  const double nb = b.template cast<double>().norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.template cast<double>().dot(b.template cast<double>()) / (na * nb);
}

}  // namespace ren
