#ifndef TWOSTEP_NUMDIFF_HPP
#define TWOSTEP_NUMDIFF_HPP

#include "twostep/core.hpp"

#include <functional>

namespace twostep {

using ScalarFunction = std::function<double(const VectorXd&)>;
using PairFunction = std::function<double(const VectorXd&, const VectorXd&)>;

// Relative step scales. The probe offset for coordinate i is
// scale * max(1, |x_i|).
inline constexpr double kGradientStep = 1e-6;
inline constexpr double kHessianStep = 1e-4;

inline double probe_offset(double scale, double x) { return scale * std::max(1.0, std::abs(x)); }

/// Central-difference gradient.
VectorXd numeric_gradient(const ScalarFunction& f, const VectorXd& x, double step = kGradientStep);

/// Forward-difference gradient; only used as an independent check.
VectorXd forward_gradient(const ScalarFunction& f, const VectorXd& x, double step = kGradientStep);

/// Cross block of the negative Hessian, -d2 f / da db, from the four-point
/// stencil. Rows follow `a`, columns follow `b`.
MatrixXd numeric_hessian_block(const PairFunction& f, const VectorXd& a, const VectorXd& b,
                               double step = kHessianStep);

/// Negative Hessian of a single-argument function: the a = b case of the
/// block stencil, where both perturbations act on the same vector. The
/// stencil points for (i, j) and (j, i) coincide, so the result is symmetric.
MatrixXd numeric_information(const ScalarFunction& f, const VectorXd& x, double step = kHessianStep);

}  // namespace twostep

#endif  // TWOSTEP_NUMDIFF_HPP
