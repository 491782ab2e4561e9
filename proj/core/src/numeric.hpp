#pragma once

#include <cmath>
#include <span>

#include <Eigen/Core>

namespace calsuffix::detail {

// Row-wise log-softmax with max shift.
inline Eigen::MatrixXd log_softmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    const double lse = m + std::log((logits.row(r).array() - m).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

// d(Σ W⊙logsoftmax(Z))/dZ given logprobs = logsoftmax(Z).
inline Eigen::MatrixXd log_softmax_backward(const Eigen::MatrixXd& logprobs, const Eigen::MatrixXd& weights) {
  const Eigen::VectorXd row_sums = weights.rowwise().sum();
  return weights - (logprobs.array().exp().colwise() * row_sums.array()).matrix();
}

inline double logsumexp(std::span<const double> xs) {
  double m = -INFINITY;
  for (double x : xs) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  // The max term contributes exactly 1; log1p keeps tiny remainders.
  double rest = 0.0;
  bool skipped = false;
  for (double x : xs) {
    if (!skipped && x == m) {
      skipped = true;
      continue;
    }
    rest += std::exp(x - m);
  }
  return m + std::log1p(rest);
}

}  // namespace calsuffix::detail
