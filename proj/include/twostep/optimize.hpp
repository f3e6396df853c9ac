#ifndef TWOSTEP_OPTIMIZE_HPP
#define TWOSTEP_OPTIMIZE_HPP

#include "twostep/core.hpp"
#include "twostep/numdiff.hpp"

#include <optional>

namespace twostep {

struct BfgsOptions {
  int max_iter = 500;
  // Stop when ||grad||_inf <= grad_tol * max(1, |f|).
  double grad_tol = 1e-8;
  // ... or when the objective stalls for `stall_iters` iterations.
  double f_rel_tol = 1e-14;
  int stall_iters = 3;
};

struct BfgsResult {
  VectorXd x;
  double value = 0.0;
  VectorXd gradient;
  MatrixXd inverse_hessian;  // of -f, BFGS approximation
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
};

/// Quasi-Newton maximization of f with central-difference gradients and a
/// backtracking line search. Non-finite objective values reject the trial
/// step, so f may return -inf outside its domain. An initial inverse
/// Hessian (of -f) can be supplied for warm starts.
BfgsResult bfgs_maximize(const ScalarFunction& f, const VectorXd& x0, const BfgsOptions& options = {},
                         const std::optional<MatrixXd>& initial_inverse_hessian = std::nullopt);

}  // namespace twostep

#endif  // TWOSTEP_OPTIMIZE_HPP
