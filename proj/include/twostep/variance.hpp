#ifndef TWOSTEP_VARIANCE_HPP
#define TWOSTEP_VARIANCE_HPP

#include "twostep/core.hpp"

#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace twostep {

/// A fitted two-step model as seen by the variance estimators: the full-model
/// log-likelihood over the step-2 sample, and step 2 re-run with the
/// measurement parameters held at some other value. Implementations must be
/// safe to call concurrently.
class StepTwoProblem {
 public:
  virtual ~StepTwoProblem() = default;

  virtual std::vector<std::string> measurement_names() const = 0;
  virtual std::vector<std::string> structural_names() const = 0;

  virtual double loglik(const VectorXd& theta1, const VectorXd& theta2) const = 0;

  // Step 2 with theta1 fixed, warm-started at the two-step estimate.
  // Returns nullopt when the refit fails to converge or diverges.
  virtual std::optional<VectorXd> refit(const VectorXd& theta1) const = 0;
};

enum class VarianceMethod { naive, asymptotic, simulation };

struct VarianceRequest {
  VarianceMethod method = VarianceMethod::naive;
  int draws = 0;  // simulation only

  std::string label() const;
  friend bool operator==(const VarianceRequest&, const VarianceRequest&) = default;
};

// "naive", "asymptotic" or "simulation:M".
VarianceRequest parse_variance_request(std::string_view text);

/// Observed information blocks of the full model at (theta1, theta2).
struct InformationBlocks {
  MatrixXd i11;  // empty unless requested
  MatrixXd i12;  // rows theta1, columns theta2
  MatrixXd i22;
  std::vector<std::string> measurement_axes;
  std::vector<std::string> structural_axes;

  MatrixXd assembled() const;
};

InformationBlocks information_blocks(const StepTwoProblem& problem, const VectorXd& theta1, const VectorXd& theta2,
                                     bool with_i11 = false);

struct VarianceReport {
  VarianceRequest request;
  CovMatrix v2;     // naive part, inverse step-2 information
  CovMatrix v1;     // step-1 contribution (sandwich or simulated)
  CovMatrix total;  // v2 + v1
  int draws_used = 0;
  int failed_refits = 0;
  std::string information = "observed";

  VectorXd standard_errors() const { return total.standard_errors(); }
};

/// Block-diagonal step-1 covariance from separately estimated blocks.
CovMatrix assemble_sigma11(const std::vector<CovMatrix>& blocks);

VarianceReport naive_variance(const StepTwoProblem& problem, const VectorXd& theta1, const VectorXd& theta2);

/// Closed-form two-step variance: V2 = I22^-1 and V1 = V2 I12' Sigma11 I12 V2
/// with the information blocks from central differences of the full-model
/// log-likelihood.
VarianceReport asymptotic_variance(const StepTwoProblem& problem, const VectorXd& theta1, const VectorXd& theta2,
                                   const CovMatrix& sigma11);

/// Partially simulation-based variance: draw theta1 from N(theta1, Sigma11),
/// refit step 2 for every draw, and add the sample covariance of the refitted
/// structural estimates to V2. Draw j uses stream id j, so results do not
/// depend on `jobs`. More than 10% failed refits is an error.
VarianceReport simulation_variance(const StepTwoProblem& problem, const VectorXd& theta1, const VectorXd& theta2,
                                   const CovMatrix& sigma11, int draws, const RngStream& rng, int jobs = 1);

// Seed of the draw family used by simulation_variance for this stream.
std::uint64_t simulation_draw_seed(const RngStream& rng);

/// Shared-refit form: `draws` holds one theta1 draw per row; one report is
/// returned per requested M (each using the first M rows). `v2` is the
/// naive matrix at the two-step estimate.
std::vector<VarianceReport> simulation_variance_from_draws(const StepTwoProblem& problem, const CovMatrix& v2,
                                                           const MatrixXd& draws, const std::vector<int>& counts,
                                                           int jobs = 1);

/// Standard normal quantile.
double normal_quantile(double p);

/// estimate +/- z_{(1+level)/2} * se.
std::pair<double, double> wald_interval(double estimate, double se, double level = 0.95);

}  // namespace twostep

#endif  // TWOSTEP_VARIANCE_HPP
