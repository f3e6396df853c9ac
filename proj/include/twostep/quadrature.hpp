#ifndef TWOSTEP_QUADRATURE_HPP
#define TWOSTEP_QUADRATURE_HPP

#include "twostep/core.hpp"

namespace twostep {

/// Gauss-Hermite rule for the standard normal density: sum_a w_a g(x_a)
/// approximates E[g(X)], X ~ N(0, 1). Weights sum to one.
struct GaussHermite {
  VectorXd nodes;
  VectorXd weights;
  VectorXd log_weights;

  explicit GaussHermite(int order);
  int order() const { return static_cast<int>(nodes.size()); }
};

// Cached rule for a given order; safe to call from several threads.
const GaussHermite& gauss_hermite(int order);

}  // namespace twostep

#endif  // TWOSTEP_QUADRATURE_HPP
