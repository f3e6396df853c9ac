#include "twostep/optimize.hpp"

#include <cmath>

namespace twostep {

BfgsResult bfgs_maximize(const ScalarFunction& f, const VectorXd& x0, const BfgsOptions& options,
                         const std::optional<MatrixXd>& initial_inverse_hessian) {
  BfgsResult r;
  const Index d = x0.size();
  auto eval = [&](const VectorXd& x) {
    ++r.evaluations;
    return f(x);
  };
  auto gradient = [&](const VectorXd& x) {
    r.evaluations += 2 * static_cast<int>(x.size());
    return numeric_gradient(f, x);
  };

  r.x = x0;
  r.value = eval(r.x);
  if (!std::isfinite(r.value)) throw NumericalError("objective is not finite at the starting point");
  r.gradient = gradient(r.x);
  const bool warm = initial_inverse_hessian.has_value();
  MatrixXd h = warm ? *initial_inverse_hessian : MatrixXd::Identity(d, d);
  bool scaled = warm;
  int stalled = 0;

  for (r.iterations = 0; r.iterations < options.max_iter; ++r.iterations) {
    const double scale = std::max(1.0, std::abs(r.value));
    if (d == 0 || r.gradient.lpNorm<Eigen::Infinity>() <= options.grad_tol * scale) {
      r.converged = true;
      break;
    }
    VectorXd dir = h * r.gradient;
    double slope = r.gradient.dot(dir);
    if (!(slope > 0)) {
      h.setIdentity();
      scaled = false;
      dir = r.gradient;
      slope = r.gradient.squaredNorm();
    }
    if (!scaled) {
      // Unit first step in the sup norm until curvature information exists.
      const double norm = dir.lpNorm<Eigen::Infinity>();
      if (norm > 1.0) {
        dir /= norm;
        slope /= norm;
      }
    }
    double t = 1.0;
    const double max_move = 5.0;
    if (dir.lpNorm<Eigen::Infinity>() > max_move) t = max_move / dir.lpNorm<Eigen::Infinity>();
    VectorXd x_new;
    double f_new = -std::numeric_limits<double>::infinity();
    bool accepted = false;
    for (int k = 0; k < 60; ++k) {
      x_new = r.x + t * dir;
      f_new = eval(x_new);
      if (std::isfinite(f_new) && f_new >= r.value + 1e-4 * t * slope) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) {
      if (!h.isIdentity()) {
        h.setIdentity();
        scaled = false;
        continue;
      }
      break;
    }
    VectorXd g_new = gradient(x_new);
    const VectorXd s = x_new - r.x;
    const VectorXd y = r.gradient - g_new;  // gradient change of -f
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (!scaled) {
        h = MatrixXd::Identity(d, d) * (sy / y.squaredNorm());
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const MatrixXd left = MatrixXd::Identity(d, d) - rho * s * y.transpose();
      h = left * h * left.transpose() + rho * s * s.transpose();
    }
    stalled = (std::abs(f_new - r.value) <= options.f_rel_tol * scale) ? stalled + 1 : 0;
    r.x = std::move(x_new);
    r.value = f_new;
    r.gradient = std::move(g_new);
    if (stalled >= options.stall_iters) {
      r.converged = r.gradient.lpNorm<Eigen::Infinity>() <= 1e3 * options.grad_tol * scale;
      ++r.iterations;
      break;
    }
  }
  if (!r.converged && d > 0 &&
      r.gradient.lpNorm<Eigen::Infinity>() <= options.grad_tol * std::max(1.0, std::abs(r.value)))
    r.converged = true;
  r.inverse_hessian = std::move(h);
  return r;
}

}  // namespace twostep
