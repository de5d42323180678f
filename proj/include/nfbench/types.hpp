#pragma once

#include <cmath>
#include <cstdint>
#include <Eigen/Dense>

namespace nfbench {

template <typename S>
using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

using Real = double;
using Vec = Vector<Real>;
using Mat = Matrix<Real>;

inline constexpr Real kLog2Pi = 1.8378770664093454835606594728112;

/// log(sum(exp(v))) with the usual max shift.
template <typename S>
S log_sum_exp(const Vector<S>& v) {
  using std::exp;
  using std::log;
  S m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + log((v.array() - m).exp().sum());
}

/// Log density of N(0, I) at x, including the normalizer.
template <typename S>
S std_normal_logpdf(const Vector<S>& x) {
  return -0.5 * x.squaredNorm() - 0.5 * static_cast<S>(x.size()) * kLog2Pi;
}

inline Real softplus(Real x) {
  return std::fmax(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

inline Real sigmoid(Real x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/// Inverse of softplus, i.e. y with softplus(y) = x (x > 0).
inline Real softplus_inverse(Real x) {
  return x + std::log(-std::expm1(-x));
}

}  // namespace nfbench
