#pragma once

#include <cmath>
#include <limits>

#include <Eigen/Core>

namespace kelab {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;
using Index = Eigen::Index;

// Stateless numerics shared by the tape primitives and the no-grad paths.

/// log(sigmoid(x)) in softplus form; finite for every finite x.
template <typename Scalar>
Scalar log_sigmoid(Scalar x) {
  // -softplus(-x)
  if (x >= Scalar(0)) {
    return -std::log1p(std::exp(-x));
  }
  return x - std::log1p(std::exp(x));
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= Scalar(0)) {
    return Scalar(1) / (Scalar(1) + std::exp(-x));
  }
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Scalar softplus(Scalar x) {
  return -log_sigmoid(-x);
}

/// Row-wise log-softmax with max subtraction.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> log_softmax_rows(
    const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    if (!std::isfinite(m)) {
      out.row(r).setConstant(std::numeric_limits<Scalar>::quiet_NaN());
      continue;
    }
    const auto shifted = (x.row(r).array() - m).eval();
    const Scalar lse = std::log(shifted.exp().sum());
    out.row(r) = shifted - lse;
  }
  return out;
}

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> softmax_rows(
    const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    const auto e = (x.row(r).array() - m).exp().eval();
    out.row(r) = e / e.sum();
  }
  return out;
}

/// Index of the row maximum; ties resolve to the lowest column.
template <typename Derived>
Index argmax_lowest(const Eigen::DenseBase<Derived>& row) {
  Index best = 0;
  for (Index j = 1; j < row.size(); ++j) {
    if (row(j) > row(best)) {
      best = j;
    }
  }
  return best;
}

}  // namespace kelab
