#include "twostep/quadrature.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <map>
#include <memory>
#include <mutex>

namespace twostep {

namespace {

// Orthonormal probabilists' Hermite polynomials p_0..p_n at x.
void orthonormal_hermite(double x, int n, VectorXd& p) {
  p.resize(n + 1);
  p(0) = 1.0;
  if (n >= 1) p(1) = x;
  for (int k = 1; k < n; ++k) p(k + 1) = (x * p(k) - std::sqrt(static_cast<double>(k)) * p(k - 1)) / std::sqrt(k + 1.0);
}

}  // namespace

GaussHermite::GaussHermite(int order) {
  if (order < 1) throw InputError("quadrature order must be positive");
  // Golub-Welsch on the Jacobi matrix, then Newton polishing of each node and
  // Christoffel weights from the orthonormal recurrence.
  MatrixXd jacobi = MatrixXd::Zero(order, order);
  for (int k = 1; k < order; ++k) jacobi(k, k - 1) = jacobi(k - 1, k) = std::sqrt(static_cast<double>(k));
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(jacobi, Eigen::EigenvaluesOnly);
  nodes = es.eigenvalues();
  weights.resize(order);
  VectorXd p;
  for (int a = 0; a < order; ++a) {
    double x = nodes(a);
    for (int it = 0; it < 3; ++it) {
      orthonormal_hermite(x, order, p);
      x -= p(order) / (std::sqrt(static_cast<double>(order)) * p(order - 1));
    }
    nodes(a) = x;
    orthonormal_hermite(x, order - 1, p);
    weights(a) = 1.0 / p.squaredNorm();
  }
  // Symmetric rule: enforce exact symmetry of nodes and weights.
  for (int a = 0; a < order / 2; ++a) {
    const int b = order - 1 - a;
    const double x = 0.5 * (nodes(b) - nodes(a));
    const double w = 0.5 * (weights(a) + weights(b));
    nodes(a) = -x;
    nodes(b) = x;
    weights(a) = weights(b) = w;
  }
  if (order % 2 == 1) nodes(order / 2) = 0.0;
  weights /= weights.sum();
  log_weights = weights.array().log().matrix();
}

const GaussHermite& gauss_hermite(int order) {
  static std::mutex mutex;
  static std::map<int, std::unique_ptr<GaussHermite>> cache;
  std::lock_guard lock(mutex);
  auto& slot = cache[order];
  if (!slot) slot = std::make_unique<GaussHermite>(order);
  return *slot;
}

}  // namespace twostep
