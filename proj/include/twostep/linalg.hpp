#ifndef TWOSTEP_LINALG_HPP
#define TWOSTEP_LINALG_HPP

#include "twostep/core.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace twostep {

template <typename Derived>
typename Derived::PlainObject symmetrize(const Eigen::MatrixBase<Derived>& a) {
  return (0.5 * (a + a.transpose())).eval();
}

template <typename Derived>
typename Derived::Scalar max_asymmetry(const Eigen::MatrixBase<Derived>& a) {
  if (a.size() == 0) return typename Derived::Scalar(0);
  return (a - a.transpose()).cwiseAbs().maxCoeff();
}

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::DenseBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  const Scalar m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.derived().array() - m).exp().sum());
}

// Softmax of a vector, max-subtracted so large logits do not overflow.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> e = (logits.array() - logits.maxCoeff()).exp().matrix();
  return e / e.sum();
}

inline double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow.
inline double log1p_exp(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

/// Unbiased sample covariance of the rows of `draws` (divisor rows - 1).
/// Rows are centred on the first row before accumulating, so identical rows
/// give an exactly zero matrix.
template <typename Derived>
MatrixXd sample_covariance_rows(const Eigen::MatrixBase<Derived>& draws) {
  const Index m = draws.rows();
  if (m < 2) throw InputError("sample covariance needs at least 2 draws, got " + std::to_string(m));
  MatrixXd shifted = draws.rowwise() - draws.row(0);
  const Eigen::RowVectorXd mean = shifted.colwise().mean();
  shifted.rowwise() -= mean;
  return symmetrize(shifted.transpose() * shifted / static_cast<double>(m - 1));
}

CovMatrix sample_covariance(const std::vector<ParamVector>& draws);

// Eigenvalue clipping at 1e-10 * largest eigenvalue. Returns the input
// unchanged when it is already comfortably positive definite; refuses when
// the most negative eigenvalue is below -1e-6 * largest.
MatrixXd psd_repair(const MatrixXd& cov);
CovMatrix psd_repair(const CovMatrix& cov);

// Draws from N(mean, cov) through an LDL' factorization of the repaired matrix.
std::vector<ParamVector> mvn_sample(const ParamVector& mean, const CovMatrix& cov, int count, RngStream& rng);

// Row-per-draw variant used by the simulation variance: one draw per
// stream id, so a prefix of M' < M draws is exactly the M'-draw sample.
MatrixXd mvn_draw_matrix(const VectorXd& mean, const MatrixXd& cov, int count, std::uint64_t seed);

// Inverse of a symmetric positive definite matrix, symmetrized.
MatrixXd spd_inverse(const MatrixXd& a, const char* what);

}  // namespace twostep

#endif  // TWOSTEP_LINALG_HPP
