#ifndef TWOSTEP_LATENT_TRAIT_HPP
#define TWOSTEP_LATENT_TRAIT_HPP

#include "twostep/core.hpp"
#include "twostep/optimize.hpp"
#include "twostep/variance.hpp"

#include <optional>
#include <string>
#include <vector>

namespace twostep {

// P(Y = 1 | eta) = logistic(tau + lambda * eta).
double irt_item_prob(double tau, double lambda, double eta);

// Binary items are stored with codes 1 (response 0) and 2 (response 1).
inline constexpr int kIrtNo = 1;
inline constexpr int kIrtYes = 2;

/// Binary-logit items measuring one trait.
struct IrtBlock {
  std::string trait;
  std::vector<std::string> item_names;
  VectorXd tau;
  VectorXd lambda;

  Index items() const { return tau.size(); }
  // Per item: tau(item), lambda(item).
  std::vector<std::string> free_names() const;
  VectorXd free_values() const;
  void set_free(const Eigen::Ref<const VectorXd>& values);
};

/// Measurement parameters of every trait, blocks concatenated in order.
struct IrtMeasurement {
  std::vector<IrtBlock> blocks;

  Index free_size() const;
  std::vector<std::string> free_names() const;
  VectorXd free_values() const;
  void set_free(const Eigen::Ref<const VectorXd>& values);
  IrtMeasurement with_free(const Eigen::Ref<const VectorXd>& values) const;
  const IrtBlock& block(const std::string& trait) const;
};

/// log of prod_k P(y_k | eta) integrated against N(mu, sigma2), summed over
/// the rows of `items` (codes 1/2, 0 missing). Gauss-Hermite with `nodes`
/// points rescaled to (mu, sigma2).
double gh_marginal_loglik(const Eigen::MatrixXi& items, const VectorXd& tau, const VectorXd& lambda, double mu,
                          double sigma2, int nodes = 31);

struct IrtStep1Config {
  int nodes = 31;
  double lambda_bound = 15.0;
  BfgsOptions bfgs;
};

struct IrtStep1Result {
  IrtBlock block;
  CovMatrix sigma11;  // over block.free_names()
  double loglik = 0.0;
  int iterations = 0;
  bool converged = false;
  VectorXd gradient;
};

/// Step 1 for one trait: marginal ML of its items alone with the trait fixed
/// at N(0, 1). The trait direction is chosen so that the first loading is
/// nonnegative.
IrtStep1Result irt_step1_fit(const Dataset& data, const std::string& trait, const IrtStep1Config& config = {});

struct IrtStep1Fit {
  IrtMeasurement measurement;
  CovMatrix sigma11;  // block diagonal over measurement.free_names()
  std::vector<IrtStep1Result> blocks;
};

// Separate step-1 fits for each listed trait.
IrtStep1Fit irt_step1_fit_all(const Dataset& data, const std::vector<std::string>& traits,
                              const IrtStep1Config& config = {});

/// trait ~ 1 + covariates + traits, with a residual variance. Traits that
/// have no equation are exogenous and fixed at N(0, 1).
struct TraitEquation {
  std::string trait;
  std::vector<std::string> covariates;
  std::vector<std::string> traits;
};

struct TraitStructuralSpec {
  std::vector<TraitEquation> equations;
  // Free residual correlation between two endogenous traits when neither
  // regresses on the other.
  bool residual_correlation = true;
};

struct TraitStep2Config {
  int nodes = 31;
  BfgsOptions bfgs;
};

struct TraitStep2Result {
  ParamVector theta2;
  CovMatrix v2;
  double loglik = 0.0;
  int iterations = 0;
  bool converged = false;
  Index n_used = 0;
  // BFGS inverse Hessian in the working parameterization; seeds warm starts.
  MatrixXd inverse_hessian;
};

/// Full-model likelihood of one or two traits with a recursive linear
/// Gaussian structural model, integrated on a Gauss-Hermite product grid
/// laid out as p(eta_first) p(eta_second | eta_first).
///
/// theta2 lists, per equation: t~1, t~<covariate>..., t~<trait>..., t~~t
/// (residual variance), then first~~second (residual correlation) when free.
/// Optimization runs on a working vector with log variances and atanh of
/// the correlation.
class TraitStructuralModel {
 public:
  TraitStructuralModel(const Dataset& data, const IrtMeasurement& shape, TraitStructuralSpec spec, int nodes = 31,
                       bool force_per_unit = false);

  const IrtMeasurement& shape() const { return shape_; }
  const TraitStructuralSpec& spec() const { return spec_; }
  Index n_used() const { return static_cast<Index>(rows_.size()); }
  // True when all units share one quadrature grid (no covariates).
  bool shared_grid() const { return shared_; }

  std::vector<std::string> structural_names() const;
  double loglik(const VectorXd& theta1, const VectorXd& theta2) const;

  VectorXd to_working(const VectorXd& theta2) const;
  VectorXd from_working(const VectorXd& working) const;
  VectorXd default_start() const;

  TraitStep2Result fit(const VectorXd& theta1, const std::optional<VectorXd>& start, const TraitStep2Config& config,
                       bool with_variance = true, const std::optional<MatrixXd>& inverse_hessian = std::nullopt) const;

  // Parameterization used by the one-step fit: every endogenous trait has
  // sample-marginal mean 0 and variance 1, so only slopes (and the residual
  // correlation) stay free; intercepts and residual variances follow.
  std::vector<std::string> standardized_names() const;
  // Natural theta2 from the standardized free vector; nullopt if the implied
  // residual variances are not positive.
  std::optional<VectorXd> natural_from_standardized(const VectorXd& free) const;
  // Affine change of the trait scales taking (theta1, theta2) into the
  // standardized family with an identical likelihood.
  std::pair<VectorXd, VectorXd> standardize(const VectorXd& theta1, const VectorXd& theta2) const;

 private:
  struct Equation {
    Index trait = -1;  // index into shape_.blocks
    bool endogenous = false;
    std::vector<Index> covariates;  // columns of design_
    Index intercept = -1, slopes = -1, trait_slope = -1, variance = -1;  // offsets into theta2
  };
  struct Moments {
    VectorXd mean_first, base_second;  // per-unit conditional means (size 1 on the shared grid)
    double var_first = 1.0, slope = 0.0, var_second = 1.0;
  };

  Moments moments(const VectorXd& theta2) const;
  double loglik_shared(const IrtMeasurement& m, const Moments& mo) const;
  double loglik_per_unit(const IrtMeasurement& m, const Moments& mo) const;

  TraitStructuralSpec spec_;
  IrtMeasurement shape_;
  int nodes_;
  bool shared_ = false;
  std::vector<Index> rows_;
  std::vector<Equation> eq_;  // eq_[0] first trait, eq_[1] second (if any)
  std::vector<std::vector<Index>> item_columns_;  // per block, columns of the data item matrix
  Index rho_ = -1;
  Index dim_ = 0;
  std::vector<std::string> names_;
  std::vector<Index> variance_slots_;
  MatrixXd design_;  // step-2 rows x distinct covariates
  // Step-2 item responses per block (rows = units or distinct patterns).
  std::vector<Eigen::MatrixXi> items_;
  // Shared grid: distinct joint patterns as indices into per-block pattern
  // lists, with multiplicities.
  std::vector<Eigen::MatrixXi> block_patterns_;
  Eigen::MatrixXi group_index_;
  VectorXd group_count_;
};

TraitStep2Result irt_step2_fit(const Dataset& data, const IrtMeasurement& m_fixed, const TraitStructuralSpec& spec,
                               const TraitStep2Config& config = {});

class TraitTwoStepProblem : public StepTwoProblem {
 public:
  TraitTwoStepProblem(const Dataset& data, const IrtMeasurement& measurement, TraitStructuralSpec spec,
                      VectorXd theta2_hat, TraitStep2Config config = {},
                      std::optional<MatrixXd> inverse_hessian = std::nullopt);

  std::vector<std::string> measurement_names() const override { return model_.shape().free_names(); }
  std::vector<std::string> structural_names() const override { return model_.structural_names(); }
  double loglik(const VectorXd& theta1, const VectorXd& theta2) const override { return model_.loglik(theta1, theta2); }
  std::optional<VectorXd> refit(const VectorXd& theta1) const override;

  const TraitStructuralModel& model() const { return model_; }

 private:
  TraitStructuralModel model_;
  VectorXd theta2_hat_;
  TraitStep2Config config_;
  std::optional<MatrixXd> inverse_hessian_;
};

struct IrtOneStepConfig {
  int starts = 5;
  double jitter = 0.1;
  std::uint64_t seed = 1;
  TraitStep2Config step2;
};

struct IrtOneStepResult {
  ParamVector theta;  // measurement free parameters, then standardized structural slopes
  CovMatrix covariance;
  VectorXd theta2_natural;  // implied intercepts and residual variances included
  double loglik = 0.0;
  bool converged = false;
  Index measurement_size = 0;
};

/// Joint maximum likelihood baseline, multistarted around a two-step solution.
IrtOneStepResult irt_onestep(const Dataset& data, const IrtMeasurement& measurement_start,
                             const TraitStructuralSpec& spec, const VectorXd& theta2_start,
                             const IrtOneStepConfig& config = {});

}  // namespace twostep

#endif  // TWOSTEP_LATENT_TRAIT_HPP
