#ifndef TWOSTEP_SIM_STUDY_HPP
#define TWOSTEP_SIM_STUDY_HPP

#include "twostep/core.hpp"
#include "twostep/latent_class.hpp"
#include "twostep/variance.hpp"

#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

namespace twostep {

// lambda with lambda^2 / (lambda^2 + pi^2/3) = r2.
double solve_lambda_from_r2(double r2);

/// Two traits, eta1 ~ N(0, 1) and eta2 | eta1 ~ N(beta1 eta1, 1 - beta1^2),
/// each measured by binary logit items with tau = 0 and a common loading.
struct TraitScenario {
  std::string id = "trait";
  Index n = 1000;
  double r_eta_sq = 0.2;
  double r_y_sq = 0.6;
  int items_per_trait = 4;
  int replications = 100;
  std::uint64_t seed = 1;

  double beta1() const;
  double residual_variance() const;
  double loading() const;
  void validate() const;
};

struct TraitSample {
  Dataset data;
  VectorXd eta1;
  VectorXd eta2;
};

// Items item.1..item.2p in blocks eta1 and eta2 (codes 1 = 0, 2 = 1).
TraitSample gen_trait_data(const TraitScenario& s, int rep);

enum class ClassEffect { none, mild, strong };
double class_effect_size(ClassEffect effect);  // 0, 0.447, 0.632
ClassEffect parse_class_effect(const std::string& text);
std::string to_string(ClassEffect effect);

/// Three classes with multinomial logit P(class | Z), Z ~ N(0, 1), intercepts
/// (0, 0.1, 0.2) and equal slopes for classes 2 and 3. Ten binary items:
/// class 1 most likely answers 1 on every item, class 2 on the first five,
/// class 3 on none; the most likely answer has probability `separation`.
struct ClassScenario {
  std::string id = "class";
  Index n = 1000;
  ClassEffect effect = ClassEffect::mild;
  double separation = 0.91;
  int classes = 3;
  int items = 10;
  int replications = 100;
  std::uint64_t seed = 1;

  VectorXd intercepts() const;  // beta0(c), c = 1..C
  VectorXd slopes() const;      // beta1(c)
  ProbabilityTable item_probabilities() const;
  LcaMeasurement measurement() const;
  void validate() const;
};

struct ClassSample {
  Dataset data;  // items item.1..item.p in block "eta", covariate z.x
  Eigen::VectorXi classes;  // 0-based true class
};

ClassSample gen_class_data(const ClassScenario& s, int rep);

// Population class proportions E_Z[P(class | Z)] by Gauss-Hermite quadrature.
VectorXd class_marginal_proportions(const ClassScenario& s, int nodes = 61);

/// 1 - E[entropy of P(class | Y)] / entropy(pi). Exact over all response
/// patterns when there are at most 4096 of them, otherwise a Monte Carlo
/// average over 100000 simulated patterns.
double entropy_r2(const LcaMeasurement& m, const VectorXd& pi, std::uint64_t seed = 1);

using StudyScenario = std::variant<TraitScenario, ClassScenario>;

const std::string& scenario_id(const StudyScenario& s);
int scenario_replications(const StudyScenario& s);

/// Estimators compared in a study: any mix of variance requests on the
/// two-step estimate, plus the one-step baseline.
struct StudyEstimators {
  std::vector<VarianceRequest> variance;
  bool onestep = false;

  static StudyEstimators parse(const std::vector<std::string>& labels);
  std::vector<std::string> labels() const;  // "naive", "asymptotic", "simulation:M", "onestep"
};

// Short column header: naive, asympt., M=50, one-step.
std::string estimator_header(const std::string& label);

struct ReplicationRecord {
  std::string scenario;
  int rep = 0;
  std::string estimator;
  double estimate = 0.0;
  double se = 0.0;
  bool ci_hit = false;
  bool converged = true;
  bool omitted = false;
  int failed_refits = 0;
};

struct EstimatorMetrics {
  std::string estimator;
  int used = 0;
  double mean_se = 0.0;
  double sd_estimate = 0.0;
  double se_ratio = 0.0;
  double coverage = 0.0;
};

struct StudyMetrics {
  std::string scenario;
  std::string parameter;
  double truth = 0.0;
  int replications = 0;
  int failed = 0;
  int omitted = 0;
  std::vector<EstimatorMetrics> estimators;
  std::vector<ReplicationRecord> records;
  std::vector<std::string> failures;  // one message per failed replication

  const EstimatorMetrics& metrics(const std::string& estimator) const;
};

struct StudyOptions {
  int jobs = 1;
  double level = 0.95;
  double max_failure_rate = 0.2;
};

/// Runs every replication of a scenario. Replication r uses stream id r of
/// the scenario seed, so results do not depend on `jobs`. More than 20%
/// failed replications is a ConvergenceError.
StudyMetrics run_study(const StudyScenario& scenario, const StudyEstimators& estimators,
                       const StudyOptions& options = {});

// Aggregate from per-replication records (failed replications have none).
std::vector<EstimatorMetrics> aggregate_records(const std::vector<ReplicationRecord>& records,
                                                const std::vector<std::string>& estimators, double truth);

void write_replications_csv(const std::vector<StudyMetrics>& studies, std::ostream& out);
void write_metrics_csv(const std::vector<StudyMetrics>& studies, std::ostream& out);
// Two tables shaped like the published ones: SE ratios, then coverage (%).
void print_metrics_tables(const std::vector<StudyMetrics>& studies, std::ostream& out);

}  // namespace twostep

#endif  // TWOSTEP_SIM_STUDY_HPP
