#include "twostep/variance.hpp"

#include "twostep/linalg.hpp"
#include "twostep/numdiff.hpp"
#include "twostep/parallel.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <set>

namespace twostep {

std::string VarianceRequest::label() const {
  switch (method) {
    case VarianceMethod::naive:
      return "naive";
    case VarianceMethod::asymptotic:
      return "asymptotic";
    case VarianceMethod::simulation:
      return "simulation:" + std::to_string(draws);
  }
  return {};
}

VarianceRequest parse_variance_request(std::string_view text) {
  if (text == "naive") return {VarianceMethod::naive, 0};
  if (text == "asymptotic") return {VarianceMethod::asymptotic, 0};
  constexpr std::string_view prefix = "simulation:";
  if (text.substr(0, prefix.size()) == prefix) {
    const auto digits = text.substr(prefix.size());
    int m = 0;
    const auto res = std::from_chars(digits.data(), digits.data() + digits.size(), m);
    if (res.ec != std::errc() || res.ptr != digits.data() + digits.size())
      throw InputError("invalid simulation draw count in '" + std::string(text) + "'");
    if (m < 2) throw InputError("simulation variance needs M >= 2, got " + std::to_string(m));
    return {VarianceMethod::simulation, m};
  }
  throw InputError("unknown variance method '" + std::string(text) + "' (naive|asymptotic|simulation:M)");
}

MatrixXd InformationBlocks::assembled() const {
  const Index d1 = i12.rows();
  const Index d2 = i22.rows();
  MatrixXd full(d1 + d2, d1 + d2);
  full.topLeftCorner(d1, d1) = i11;
  full.topRightCorner(d1, d2) = i12;
  full.bottomLeftCorner(d2, d1) = i12.transpose();
  full.bottomRightCorner(d2, d2) = i22;
  return full;
}

InformationBlocks information_blocks(const StepTwoProblem& problem, const VectorXd& theta1, const VectorXd& theta2,
                                     bool with_i11) {
  InformationBlocks blocks;
  blocks.measurement_axes = problem.measurement_names();
  blocks.structural_axes = problem.structural_names();
  blocks.i22 = numeric_information([&](const VectorXd& t2) { return problem.loglik(theta1, t2); }, theta2);
  blocks.i12 = numeric_hessian_block([&](const VectorXd& t1, const VectorXd& t2) { return problem.loglik(t1, t2); },
                                     theta1, theta2);
  if (with_i11)
    blocks.i11 = numeric_information([&](const VectorXd& t1) { return problem.loglik(t1, theta2); }, theta1);
  return blocks;
}

CovMatrix assemble_sigma11(const std::vector<CovMatrix>& blocks) {
  if (blocks.empty()) throw InputError("assemble_sigma11 needs at least one block");
  Index d = 0;
  std::vector<std::string> axes;
  std::set<std::string> seen;
  for (const auto& b : blocks) {
    d += b.dim();
    for (const auto& a : b.axes) {
      if (!seen.insert(a).second) throw InputError("duplicate parameter label " + a + " across step-1 blocks");
      axes.push_back(a);
    }
  }
  MatrixXd m = MatrixXd::Zero(d, d);
  Index at = 0;
  for (const auto& b : blocks) {
    m.block(at, at, b.dim(), b.dim()) = b.m;
    at += b.dim();
  }
  return CovMatrix(std::move(m), std::move(axes));
}

namespace {

CovMatrix naive_matrix(const StepTwoProblem& problem, const VectorXd& theta1, const VectorXd& theta2) {
  const MatrixXd i22 = numeric_information([&](const VectorXd& t2) { return problem.loglik(theta1, t2); }, theta2);
  return CovMatrix(spd_inverse(i22, "step-2 information matrix"), problem.structural_names());
}

VarianceReport combine(VarianceRequest request, CovMatrix v2, MatrixXd v1) {
  VarianceReport r;
  r.request = request;
  r.total = CovMatrix(v2.m + v1, v2.axes);
  r.v1 = CovMatrix(std::move(v1), v2.axes);
  r.v2 = std::move(v2);
  return r;
}

}  // namespace

VarianceReport naive_variance(const StepTwoProblem& problem, const VectorXd& theta1, const VectorXd& theta2) {
  CovMatrix v2 = naive_matrix(problem, theta1, theta2);
  MatrixXd zero = MatrixXd::Zero(v2.dim(), v2.dim());
  return combine({VarianceMethod::naive, 0}, std::move(v2), std::move(zero));
}

VarianceReport asymptotic_variance(const StepTwoProblem& problem, const VectorXd& theta1, const VectorXd& theta2,
                                   const CovMatrix& sigma11) {
  if (sigma11.dim() != theta1.size())
    throw InputError("Sigma11 dimension " + std::to_string(sigma11.dim()) + " does not match theta1 length " +
                     std::to_string(theta1.size()));
  const auto names = problem.measurement_names();
  if (!sigma11.axes.empty() && sigma11.axes != names)
    throw InputError("Sigma11 axes do not match the measurement parameter layout");
  const InformationBlocks blocks = information_blocks(problem, theta1, theta2);
  CovMatrix v2(spd_inverse(blocks.i22, "step-2 information matrix"), problem.structural_names());
  const MatrixXd a = blocks.i12 * v2.m;  // I12 I22^-1
  MatrixXd v1 = symmetrize(a.transpose() * sigma11.m * a);
  return combine({VarianceMethod::asymptotic, 0}, std::move(v2), std::move(v1));
}

std::uint64_t simulation_draw_seed(const RngStream& rng) { return rng.derive_seed(0x51u); }

std::vector<VarianceReport> simulation_variance_from_draws(const StepTwoProblem& problem, const CovMatrix& v2,
                                                           const MatrixXd& draws, const std::vector<int>& counts,
                                                           int jobs) {
  if (counts.empty()) return {};
  const int needed = *std::max_element(counts.begin(), counts.end());
  if (*std::min_element(counts.begin(), counts.end()) < 2) throw InputError("simulation variance needs M >= 2");
  if (draws.rows() < needed)
    throw InputError("only " + std::to_string(draws.rows()) + " step-1 draws available, " + std::to_string(needed) +
                     " requested");

  std::vector<std::optional<VectorXd>> refits(needed);
  parallel_for(needed, jobs, [&](int j) {
    try {
      refits[j] = problem.refit(draws.row(j).transpose());
    } catch (const std::exception&) {
      refits[j].reset();
    }
  });

  std::vector<VarianceReport> out;
  for (int m : counts) {
    std::vector<Index> ok;
    for (int j = 0; j < m; ++j)
      if (refits[j]) ok.push_back(j);
    const int failed = m - static_cast<int>(ok.size());
    if (failed > m / 10)
      throw ConvergenceError(std::to_string(failed) + " of " + std::to_string(m) +
                             " step-2 refits failed (limit 10%)");
    MatrixXd rows(static_cast<Index>(ok.size()), v2.dim());
    for (std::size_t r = 0; r < ok.size(); ++r) rows.row(static_cast<Index>(r)) = refits[ok[r]]->transpose();
    VarianceReport report = combine({VarianceMethod::simulation, m}, v2, sample_covariance_rows(rows));
    report.draws_used = static_cast<int>(ok.size());
    report.failed_refits = failed;
    out.push_back(std::move(report));
  }
  return out;
}

VarianceReport simulation_variance(const StepTwoProblem& problem, const VectorXd& theta1, const VectorXd& theta2,
                                   const CovMatrix& sigma11, int draws, const RngStream& rng, int jobs) {
  if (draws < 2) throw InputError("simulation variance needs M >= 2, got " + std::to_string(draws));
  if (sigma11.dim() != theta1.size()) throw InputError("Sigma11 dimension does not match theta1 length");
  const MatrixXd sample = mvn_draw_matrix(theta1, sigma11.m, draws, simulation_draw_seed(rng));
  return simulation_variance_from_draws(problem, naive_matrix(problem, theta1, theta2), sample, {draws}, jobs).front();
}

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    if (p == 0.0) return -std::numeric_limits<double>::infinity();
    if (p == 1.0) return std::numeric_limits<double>::infinity();
    throw InputError("normal_quantile needs p in (0, 1)");
  }
  // Rational approximation (relative error ~1e-9) followed by one Halley step.
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01,  -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  constexpr double low = 0.02425;
  double x;
  if (p < low) {
    const double q = std::sqrt(-2 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  } else if (p <= 1 - low) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1);
  } else {
    const double q = std::sqrt(-2 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1);
  }
  const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  const double u = e * std::sqrt(2 * M_PI) * std::exp(x * x / 2);
  return x - u / (1 + x * u / 2);
}

std::pair<double, double> wald_interval(double estimate, double se, double level) {
  if (!(level > 0.0 && level < 1.0)) throw InputError("confidence level must lie in (0, 1)");
  if (se < 0) throw InputError("standard error must be non-negative");
  const double z = normal_quantile(0.5 * (1.0 + level));
  return {estimate - z * se, estimate + z * se};
}

}  // namespace twostep
