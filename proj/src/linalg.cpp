#include "twostep/linalg.hpp"

#include <Eigen/Eigenvalues>

#include <sstream>

namespace twostep {

CovMatrix sample_covariance(const std::vector<ParamVector>& draws) {
  if (draws.size() < 2) throw InputError("sample covariance needs at least 2 draws");
  const Index d = draws.front().size();
  MatrixXd rows(static_cast<Index>(draws.size()), d);
  for (std::size_t j = 0; j < draws.size(); ++j) {
    if (draws[j].size() != d) throw InputError("draws have unequal lengths");
    rows.row(static_cast<Index>(j)) = draws[j].values().transpose();
  }
  return CovMatrix(sample_covariance_rows(rows), draws.front().names());
}

MatrixXd psd_repair(const MatrixXd& cov) {
  if (cov.rows() != cov.cols()) throw InputError("psd_repair needs a square matrix");
  if (cov.size() == 0) return cov;
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetrize(cov));
  const VectorXd& ev = es.eigenvalues();
  const double largest = ev.maxCoeff();
  const double smallest = ev.minCoeff();
  if (smallest < -1e-6 * std::max(largest, 0.0) && smallest < 0.0) {
    std::ostringstream msg;
    msg << "covariance is not repairable to PSD: eigenvalue " << smallest << " against largest " << largest;
    throw NumericalError(msg.str());
  }
  const double floor = 1e-10 * std::max(largest, 0.0);
  if (smallest >= floor && largest > 0.0) return cov;
  const VectorXd clipped = ev.cwiseMax(floor);
  return symmetrize(es.eigenvectors() * clipped.asDiagonal() * es.eigenvectors().transpose());
}

CovMatrix psd_repair(const CovMatrix& cov) { return CovMatrix(psd_repair(cov.m), cov.axes); }

namespace {

// F with F F' = cov, from a pivoted LDL' factorization.
MatrixXd sampling_factor(const MatrixXd& cov) {
  const MatrixXd repaired = psd_repair(cov);
  Eigen::LDLT<MatrixXd> ldlt(repaired);
  if (ldlt.info() != Eigen::Success) throw NumericalError("LDL' factorization of the covariance failed");
  const VectorXd root_d = ldlt.vectorD().cwiseMax(0.0).cwiseSqrt();
  MatrixXd lower = ldlt.matrixL();
  MatrixXd f = lower * root_d.asDiagonal();
  return ldlt.transpositionsP().transpose() * f;
}

}  // namespace

std::vector<ParamVector> mvn_sample(const ParamVector& mean, const CovMatrix& cov, int count, RngStream& rng) {
  if (cov.dim() != mean.size())
    throw InputError("covariance dimension " + std::to_string(cov.dim()) + " does not match mean length " +
                     std::to_string(mean.size()));
  const MatrixXd factor = sampling_factor(cov.m);
  std::vector<ParamVector> out;
  out.reserve(std::max(count, 0));
  VectorXd z(mean.size());
  for (int j = 0; j < count; ++j) {
    for (Index i = 0; i < z.size(); ++i) z(i) = rng.normal();
    out.push_back(mean.with_values(mean.values() + factor * z));
  }
  return out;
}

MatrixXd mvn_draw_matrix(const VectorXd& mean, const MatrixXd& cov, int count, std::uint64_t seed) {
  if (cov.rows() != mean.size()) throw InputError("covariance dimension does not match mean length");
  const MatrixXd factor = sampling_factor(cov);
  MatrixXd out(count, mean.size());
  VectorXd z(mean.size());
  for (int j = 0; j < count; ++j) {
    RngStream rng(seed, static_cast<std::uint64_t>(j));
    for (Index i = 0; i < z.size(); ++i) z(i) = rng.normal();
    out.row(j) = (mean + factor * z).transpose();
  }
  return out;
}

MatrixXd spd_inverse(const MatrixXd& a, const char* what) {
  Eigen::LLT<MatrixXd> llt(symmetrize(a));
  if (llt.info() != Eigen::Success) throw NumericalError(std::string(what) + " is not positive definite");
  return symmetrize(llt.solve(MatrixXd::Identity(a.rows(), a.cols())));
}

}  // namespace twostep
