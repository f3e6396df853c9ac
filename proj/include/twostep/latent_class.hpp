#ifndef TWOSTEP_LATENT_CLASS_HPP
#define TWOSTEP_LATENT_CLASS_HPP

#include "twostep/core.hpp"
#include "twostep/variance.hpp"

#include <optional>
#include <string>
#include <vector>

namespace twostep {

// Item response probabilities: one h_k x C matrix per item, column c holds
// P(Y_k = l | class c) for l = 1..h_k.
using ProbabilityTable = std::vector<MatrixXd>;

/// Multinomial-logit latent class measurement model. For item k the logit of
/// category l in class c is tau(l) + lambda(l, c), with the first category
/// and the first class as references (row 0 of tau/lambda and column 0 of
/// lambda are fixed at zero).
struct LcaMeasurement {
  int classes = 1;
  std::vector<std::string> item_names;
  std::vector<int> categories;
  std::vector<VectorXd> tau;
  std::vector<MatrixXd> lambda;

  static LcaMeasurement zeros(int classes, std::vector<std::string> item_names, std::vector<int> categories);
  // Logit transform of a probability table; probabilities are clamped to
  // [clamp, 1 - clamp] and renormalized first.
  static LcaMeasurement from_probabilities(const ProbabilityTable& probs, std::vector<std::string> item_names,
                                           double clamp = 1e-6);

  Index items() const { return static_cast<Index>(categories.size()); }
  Index free_size() const;
  std::vector<std::string> free_names() const;
  VectorXd free_values() const;
  ParamVector free_parameters() const { return ParamVector(free_values(), free_names()); }
  void set_free(const Eigen::Ref<const VectorXd>& values);
  LcaMeasurement with_free(const Eigen::Ref<const VectorXd>& values) const;

  ProbabilityTable probabilities() const;
};

ProbabilityTable lca_item_response_probs(const LcaMeasurement& m);

/// P(pattern) = sum_c pi_c prod_k P(Y_k = y_k | c); missing items (code 0)
/// are skipped, so an all-missing pattern has probability 1.
double lca_pattern_prob(const LcaMeasurement& m, const VectorXd& class_proportions, const Eigen::VectorXi& pattern);

/// Permutation matching estimated classes to reference classes: result[c] is
/// the estimated class that plays reference class c. Minimizes the total
/// absolute difference of the item response probability tables.
std::vector<int> align_classes(const ProbabilityTable& estimated, const ProbabilityTable& reference);
std::vector<int> align_classes(const LcaMeasurement& estimated, const ProbabilityTable& reference);

ProbabilityTable permute_classes(const ProbabilityTable& probs, const std::vector<int>& perm);

// Deterministic label order: descending P(Y_1 = h_1 | c), later items break ties.
std::vector<int> canonical_class_order(const ProbabilityTable& probs);

struct LcaStep1Config {
  int starts = 20;
  int max_iter = 2000;
  double rel_tol = 1e-9;
  double clamp = 1e-6;
  std::uint64_t seed = 1;
  // Align the fitted classes to this table instead of the canonical order.
  std::optional<ProbabilityTable> reference;
};

struct LcaStep1Result {
  LcaMeasurement measurement;
  VectorXd class_proportions;
  CovMatrix sigma11;  // over measurement.free_names()
  double loglik = 0.0;
  int iterations = 0;
  bool converged = false;
  bool boundary = false;  // some fitted probability outside [clamp, 1 - clamp]
  std::vector<double> trace;  // EM log-likelihood per iteration, winning start
  ProbabilityTable raw_probabilities;  // EM estimates before clamping
};

/// Step 1: unconditional latent class model by EM with random multistarts.
/// Sigma11 is the measurement block of the inverse observed information of
/// (tau, lambda, class logits).
LcaStep1Result lca_step1_em(const Dataset& data, int classes, const LcaStep1Config& config = {});

// Step-1 log-likelihood in the free parameterization; `class_logits` has
// C - 1 entries (class 1 is the reference).
double lca_step1_loglik(const Dataset& data, const LcaMeasurement& m, const VectorXd& class_logits);

enum class LcaStructuralForm { covariate, distal };

struct LcaStructuralSpec {
  LcaStructuralForm form = LcaStructuralForm::covariate;
  std::vector<std::string> covariates;  // covariate form
  std::string outcome;                  // distal form
};

struct LcaStep2Config {
  int max_iter = 5000;
  double grad_tol = 1e-7;  // per unit, on the exact score
  double divergence_bound = 25.0;
  double sigma_floor = 1e-6;
};

struct LcaStep2Result {
  ParamVector theta2;
  CovMatrix v2;
  double loglik = 0.0;
  int iterations = 0;
  bool converged = false;
  Index n_used = 0;
};

/// Full-model likelihood of the latent class structural models over the
/// step-2 sample (rows with the structural columns observed).
///
/// covariate: log sum_c softmax_c(beta0 + beta' z) prod_k P(y_k | c)
///   theta2 = [beta0(c), beta(z, c) ...] for c = 2..C
/// distal: log sum_c pi_c N(y; beta0 + beta1(c), sigma^2) prod_k P(y_k | c)
///   theta2 = [alpha(2..C), beta0, beta1(2..C), sigma], pi = softmax(0, alpha)
class LcaStructuralModel {
 public:
  LcaStructuralModel(const Dataset& data, const LcaMeasurement& shape, LcaStructuralSpec spec);

  const LcaStructuralSpec& spec() const { return spec_; }
  const LcaMeasurement& shape() const { return shape_; }
  Index n_used() const { return static_cast<Index>(rows_.size()); }
  std::vector<std::string> structural_names() const;

  double loglik(const VectorXd& theta1, const VectorXd& theta2) const;

  // Step-2 maximization with theta1 fixed; starts from `start` when given.
  LcaStep2Result fit(const VectorXd& theta1, const std::optional<VectorXd>& start, const LcaStep2Config& config,
                     bool with_variance = true) const;

  // One-step EM over (theta1, theta2) jointly from a starting point.
  struct JointFit {
    VectorXd theta1;
    VectorXd theta2;
    double loglik = 0.0;
    int iterations = 0;
    bool converged = false;
  };
  JointFit fit_joint(const VectorXd& theta1, const VectorXd& theta2, const LcaStep2Config& config,
                     double clamp = 1e-6) const;

 private:
  // log P(y_i | c) for every step-2 row.
  MatrixXd measurement_loglik(const VectorXd& theta1) const;
  MatrixXd class_log_prior(const VectorXd& theta2) const;  // rows x C
  double loglik_given(const MatrixXd& log_meas, const VectorXd& theta2) const;
  VectorXd score(const MatrixXd& log_meas, const VectorXd& theta2) const;
  bool em_step(const MatrixXd& log_meas, VectorXd& theta2, const LcaStep2Config& config) const;

  LcaStructuralSpec spec_;
  LcaMeasurement shape_;
  std::vector<Index> rows_;
  Eigen::MatrixXi items_;
  MatrixXd design_;   // [1, z] per step-2 row (covariate form)
  VectorXd outcome_;  // distal form
};

LcaStep2Result lca_step2(const Dataset& data, const LcaMeasurement& m_fixed, const LcaStructuralSpec& spec,
                         const LcaStep2Config& config = {});
LcaStep2Result lca_step2_covariate(const Dataset& data, const LcaMeasurement& m_fixed,
                                   const std::vector<std::string>& covariates, const LcaStep2Config& config = {});
LcaStep2Result lca_step2_distal(const Dataset& data, const LcaMeasurement& m_fixed, const std::string& outcome,
                                const LcaStep2Config& config = {});

/// The fitted two-step latent class model in the form the variance
/// estimators consume.
class LcaTwoStepProblem : public StepTwoProblem {
 public:
  LcaTwoStepProblem(const Dataset& data, const LcaMeasurement& measurement, LcaStructuralSpec spec,
                    VectorXd theta2_hat, LcaStep2Config config = {});

  std::vector<std::string> measurement_names() const override { return model_.shape().free_names(); }
  std::vector<std::string> structural_names() const override { return model_.structural_names(); }
  double loglik(const VectorXd& theta1, const VectorXd& theta2) const override { return model_.loglik(theta1, theta2); }
  std::optional<VectorXd> refit(const VectorXd& theta1) const override;

  const LcaStructuralModel& model() const { return model_; }

 private:
  LcaStructuralModel model_;
  VectorXd theta2_hat_;
  LcaStep2Config config_;
};

struct LcaOneStepConfig {
  int starts = 5;
  double jitter = 0.25;
  std::uint64_t seed = 1;
  LcaStep2Config step2;
};

struct LcaOneStepResult {
  ParamVector theta;  // measurement free parameters followed by theta2
  CovMatrix covariance;
  double loglik = 0.0;
  bool converged = false;
  Index measurement_size = 0;
};

/// Joint maximum likelihood baseline, multistarted around a two-step solution.
LcaOneStepResult lca_onestep(const Dataset& data, const LcaMeasurement& measurement_start,
                             const LcaStructuralSpec& spec, const VectorXd& theta2_start,
                             const LcaOneStepConfig& config = {});

}  // namespace twostep

#endif  // TWOSTEP_LATENT_CLASS_HPP
