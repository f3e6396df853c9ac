#include "twostep/sim_study.hpp"

#include "twostep/latent_trait.hpp"
#include "twostep/linalg.hpp"
#include "twostep/parallel.hpp"
#include "twostep/quadrature.hpp"

#include <fmt/format.h>
#include <fmt/ostream.h>

#include <algorithm>
#include <cmath>
#include <ostream>

namespace twostep {

double solve_lambda_from_r2(double r2) {
  if (!(r2 >= 0.0 && r2 < 1.0)) throw InputError("R_Y^2 must lie in [0, 1)");
  return std::sqrt(r2 / (1.0 - r2) * M_PI * M_PI / 3.0);
}

// ---------------------------------------------------------------------------
// Latent trait design

double TraitScenario::beta1() const { return std::sqrt(r_eta_sq); }
double TraitScenario::residual_variance() const { return 1.0 - r_eta_sq; }
double TraitScenario::loading() const { return solve_lambda_from_r2(r_y_sq); }

void TraitScenario::validate() const {
  if (n < 2) throw InputError("scenario " + id + ": n must be at least 2");
  if (!(r_eta_sq >= 0.0 && r_eta_sq < 1.0)) throw InputError("scenario " + id + ": r_eta_sq must lie in [0, 1)");
  if (!(r_y_sq >= 0.0 && r_y_sq < 1.0)) throw InputError("scenario " + id + ": r_y_sq must lie in [0, 1)");
  if (items_per_trait < 2) throw InputError("scenario " + id + ": at least 2 items per trait");
  if (replications < 2) throw InputError("scenario " + id + ": replications must be at least 2");
}

TraitSample gen_trait_data(const TraitScenario& s, int rep) {
  s.validate();
  RngStream rng(s.seed, static_cast<std::uint64_t>(rep));
  const Index n = s.n;
  const int p = s.items_per_trait;
  const double b = s.beta1();
  const double sd = std::sqrt(s.residual_variance());
  const double lambda = s.loading();

  TraitSample out;
  out.eta1.resize(n);
  out.eta2.resize(n);
  for (Index i = 0; i < n; ++i) {
    out.eta1(i) = rng.normal();
    out.eta2(i) = b * out.eta1(i) + sd * rng.normal();
  }
  Dataset& d = out.data;
  d.items.resize(n, 2 * p);
  for (Index i = 0; i < n; ++i) {
    for (int k = 0; k < 2 * p; ++k) {
      const double eta = k < p ? out.eta1(i) : out.eta2(i);
      d.items(i, k) = rng.uniform() < logistic(lambda * eta) ? 2 : 1;
    }
  }
  ItemBlock first{"eta1", {}}, second{"eta2", {}};
  for (int k = 0; k < 2 * p; ++k) {
    d.item_names.push_back("item." + std::to_string(k + 1));
    d.categories.push_back(2);
    (k < p ? first : second).items.push_back(k);
  }
  d.blocks = {first, second};
  d.covariates.resize(n, 0);
  d.outcomes.resize(n, 0);
  for (Index i = 0; i < n; ++i) d.unit_ids.push_back(std::to_string(i + 1));
  return out;
}

// ---------------------------------------------------------------------------
// Latent class design

double class_effect_size(ClassEffect effect) {
  switch (effect) {
    case ClassEffect::none:
      return 0.0;
    case ClassEffect::mild:
      return 0.447;
    case ClassEffect::strong:
      return 0.632;
  }
  return 0.0;
}

ClassEffect parse_class_effect(const std::string& text) {
  if (text == "none") return ClassEffect::none;
  if (text == "mild") return ClassEffect::mild;
  if (text == "strong") return ClassEffect::strong;
  throw InputError("unknown effect '" + text + "' (none|mild|strong)");
}

std::string to_string(ClassEffect effect) {
  switch (effect) {
    case ClassEffect::none:
      return "none";
    case ClassEffect::mild:
      return "mild";
    case ClassEffect::strong:
      return "strong";
  }
  return {};
}

VectorXd ClassScenario::intercepts() const {
  VectorXd b(3);
  b << 0.0, 0.1, 0.2;
  return b;
}

VectorXd ClassScenario::slopes() const {
  const double e = class_effect_size(effect);
  VectorXd b(3);
  b << 0.0, e, e;
  return b;
}

ProbabilityTable ClassScenario::item_probabilities() const {
  ProbabilityTable probs;
  for (int k = 0; k < items; ++k) {
    MatrixXd p(2, 3);
    for (int c = 0; c < 3; ++c) {
      const bool high = c == 0 || (c == 1 && k < items / 2);
      const double q = high ? separation : 1.0 - separation;
      p(0, c) = 1.0 - q;
      p(1, c) = q;
    }
    probs.push_back(std::move(p));
  }
  return probs;
}

LcaMeasurement ClassScenario::measurement() const {
  std::vector<std::string> names;
  for (int k = 0; k < items; ++k) names.push_back("item." + std::to_string(k + 1));
  return LcaMeasurement::from_probabilities(item_probabilities(), names, 0.0);
}

void ClassScenario::validate() const {
  if (n < 2) throw InputError("scenario " + id + ": n must be at least 2");
  if (classes != 3) throw InputError("scenario " + id + ": the class design has 3 classes");
  if (items < 2) throw InputError("scenario " + id + ": at least 2 items");
  if (!(separation > 0.5 && separation < 1.0)) throw InputError("scenario " + id + ": separation must lie in (0.5, 1)");
  if (replications < 2) throw InputError("scenario " + id + ": replications must be at least 2");
}

ClassSample gen_class_data(const ClassScenario& s, int rep) {
  s.validate();
  RngStream rng(s.seed, static_cast<std::uint64_t>(rep));
  const VectorXd b0 = s.intercepts();
  const VectorXd b1 = s.slopes();
  const ProbabilityTable probs = s.item_probabilities();

  ClassSample out;
  Dataset& d = out.data;
  d.items.resize(s.n, s.items);
  d.covariates.resize(s.n, 1);
  d.outcomes.resize(s.n, 0);
  out.classes.resize(s.n);
  for (Index i = 0; i < s.n; ++i) {
    const double z = rng.normal();
    const VectorXd w = softmax((b0 + b1 * z).eval());
    const Index c = rng.categorical(w);
    d.covariates(i, 0) = z;
    out.classes(i) = static_cast<int>(c);
    for (int k = 0; k < s.items; ++k) d.items(i, k) = rng.uniform() < probs[k](1, c) ? 2 : 1;
  }
  ItemBlock block{"eta", {}};
  for (int k = 0; k < s.items; ++k) {
    d.item_names.push_back("item." + std::to_string(k + 1));
    d.categories.push_back(2);
    block.items.push_back(k);
  }
  d.blocks = {block};
  d.covariate_names = {"z.x"};
  for (Index i = 0; i < s.n; ++i) d.unit_ids.push_back(std::to_string(i + 1));
  return out;
}

VectorXd class_marginal_proportions(const ClassScenario& s, int nodes) {
  const GaussHermite& gh = gauss_hermite(nodes);
  VectorXd pi = VectorXd::Zero(3);
  for (Index a = 0; a < gh.order(); ++a) pi += gh.weights(a) * softmax((s.intercepts() + s.slopes() * gh.nodes(a)).eval());
  return pi;
}

namespace {

double entropy(const VectorXd& p) {
  double h = 0.0;
  for (Index c = 0; c < p.size(); ++c)
    if (p(c) > 0) h -= p(c) * std::log(p(c));
  return h;
}

}  // namespace

double entropy_r2(const LcaMeasurement& m, const VectorXd& pi, std::uint64_t seed) {
  if (pi.size() != m.classes) throw InputError("class proportions do not match the class count");
  const double prior = entropy(pi);
  if (prior <= 0.0) return 1.0;
  const ProbabilityTable probs = m.probabilities();
  const Index p = m.items();

  double patterns = 1.0;
  for (int h : m.categories) patterns *= h;

  auto posterior_entropy = [&](const std::vector<int>& y, double& marginal) {
    VectorXd joint = pi;
    for (Index k = 0; k < p; ++k) joint.array() *= probs[k].row(y[k]).transpose().array();
    marginal = joint.sum();
    return entropy(joint / marginal);
  };

  double expected = 0.0;
  std::vector<int> y(p, 0);
  if (patterns <= 4096) {
    while (true) {
      double marginal = 0.0;
      const double h = posterior_entropy(y, marginal);
      expected += marginal * h;
      Index k = 0;
      while (k < p && ++y[k] == m.categories[k]) y[k++] = 0;
      if (k == p) break;
    }
  } else {
    RngStream rng(seed, 0);
    const int draws = 100000;
    for (int r = 0; r < draws; ++r) {
      const Index c = rng.categorical(pi);
      for (Index k = 0; k < p; ++k) y[k] = static_cast<int>(rng.categorical(probs[k].col(c)));
      double marginal = 0.0;
      expected += posterior_entropy(y, marginal);
    }
    expected /= draws;
  }
  return 1.0 - expected / prior;
}

// ---------------------------------------------------------------------------
// Replication engine

const std::string& scenario_id(const StudyScenario& s) {
  return std::visit([](const auto& v) -> const std::string& { return v.id; }, s);
}

int scenario_replications(const StudyScenario& s) {
  return std::visit([](const auto& v) { return v.replications; }, s);
}

StudyEstimators StudyEstimators::parse(const std::vector<std::string>& labels) {
  StudyEstimators e;
  for (const auto& l : labels) {
    if (l == "onestep" || l == "one-step")
      e.onestep = true;
    else
      e.variance.push_back(parse_variance_request(l));
  }
  if (e.variance.empty()) throw InputError("a study needs at least one two-step variance estimator");
  return e;
}

std::vector<std::string> StudyEstimators::labels() const {
  std::vector<std::string> out;
  for (const auto& v : variance) out.push_back(v.label());
  if (onestep) out.push_back("onestep");
  return out;
}

std::string estimator_header(const std::string& label) {
  if (label == "naive") return "naive";
  if (label == "asymptotic") return "asympt.";
  if (label == "onestep") return "one-step";
  constexpr std::string_view prefix = "simulation:";
  if (label.rfind(prefix, 0) == 0) return "M=" + label.substr(prefix.size());
  return label;
}

const EstimatorMetrics& StudyMetrics::metrics(const std::string& estimator) const {
  for (const auto& e : estimators)
    if (e.estimator == estimator) return e;
  throw InputError("no metrics for estimator " + estimator);
}

namespace {

struct TwoStepFit {
  std::unique_ptr<StepTwoProblem> problem;
  VectorXd theta1;
  CovMatrix sigma11;
  VectorXd theta2;
  std::vector<std::string> names;
};

struct OneStepOutcome {
  bool ok = false;
  VectorXd estimates;  // target parameters
  double se = 0.0;
};

struct ReplicationPlan {
  std::string parameter;
  std::vector<std::string> omission_parameters;
  double omission_bound = 0.0;
  double truth = 0.0;
};

ReplicationPlan plan_for(const StudyScenario& s) {
  if (const auto* t = std::get_if<TraitScenario>(&s)) return {"eta2~eta1", {"eta2~eta1"}, 0.3, t->beta1()};
  const auto& c = std::get<ClassScenario>(s);
  return {"beta(z.x,2)", {"beta(z.x,2)", "beta(z.x,3)"}, 0.5, class_effect_size(c.effect)};
}

std::vector<ReplicationRecord> replicate(const StudyScenario& scenario, const StudyEstimators& estimators, int rep,
                                         const StudyOptions& options) {
  const ReplicationPlan plan = plan_for(scenario);
  const std::uint64_t seed = std::visit([](const auto& v) { return v.seed; }, scenario);
  const RngStream rep_rng(seed, static_cast<std::uint64_t>(rep));
  const std::string& id = scenario_id(scenario);

  TwoStepFit fit;
  OneStepOutcome one;
  if (const auto* ts = std::get_if<TraitScenario>(&scenario)) {
    const TraitSample sample = gen_trait_data(*ts, rep);
    const IrtStep1Fit step1 = irt_step1_fit_all(sample.data, {"eta1", "eta2"});
    const TraitStructuralSpec spec{{{"eta2", {}, {"eta1"}}}};
    const TraitStructuralModel model(sample.data, step1.measurement, spec);
    fit.theta1 = step1.measurement.free_values();
    const TraitStep2Result step2 = model.fit(fit.theta1, std::nullopt, {}, false);
    fit.theta2 = step2.theta2.values();
    fit.names = step2.theta2.names();
    fit.sigma11 = step1.sigma11;
    fit.problem = std::make_unique<TraitTwoStepProblem>(sample.data, step1.measurement, spec, fit.theta2,
                                                        TraitStep2Config{}, step2.inverse_hessian);
    if (estimators.onestep) {
      try {
        IrtOneStepConfig cfg;
        cfg.seed = rep_rng.derive_seed(2);
        const IrtOneStepResult r = irt_onestep(sample.data, step1.measurement, spec, fit.theta2, cfg);
        const Index j = r.theta.index(plan.parameter);
        one.estimates = VectorXd::Constant(1, r.theta.values()(j));
        one.se = std::sqrt(r.covariance.m(j, j));
        one.ok = r.converged && std::isfinite(one.se);
      } catch (const ConvergenceError&) {
      } catch (const NumericalError&) {
      }
    }
  } else {
    const auto& cs = std::get<ClassScenario>(scenario);
    const ClassSample sample = gen_class_data(cs, rep);
    LcaStep1Config c1;
    c1.seed = rep_rng.derive_seed(1);
    c1.reference = cs.item_probabilities();
    const LcaStep1Result step1 = lca_step1_em(sample.data, cs.classes, c1);
    const LcaStructuralSpec spec{LcaStructuralForm::covariate, {"z.x"}, {}};
    const LcaStructuralModel model(sample.data, step1.measurement, spec);
    fit.theta1 = step1.measurement.free_values();
    const LcaStep2Result step2 = model.fit(fit.theta1, std::nullopt, {}, false);
    fit.theta2 = step2.theta2.values();
    fit.names = step2.theta2.names();
    fit.sigma11 = step1.sigma11;
    fit.problem = std::make_unique<LcaTwoStepProblem>(sample.data, step1.measurement, spec, fit.theta2);
    if (estimators.onestep) {
      try {
        LcaOneStepConfig cfg;
        cfg.seed = rep_rng.derive_seed(2);
        const LcaOneStepResult r = lca_onestep(sample.data, step1.measurement, spec, fit.theta2, cfg);
        one.estimates.resize(static_cast<Index>(plan.omission_parameters.size()));
        for (std::size_t q = 0; q < plan.omission_parameters.size(); ++q)
          one.estimates(static_cast<Index>(q)) = r.theta[plan.omission_parameters[q]];
        const Index j = r.theta.index(plan.parameter);
        one.se = std::sqrt(r.covariance.m(j, j));
        one.ok = r.converged && std::isfinite(one.se);
      } catch (const ConvergenceError&) {
      } catch (const NumericalError&) {
      }
    }
  }

  const ParamVector theta2(fit.theta2, fit.names);
  const Index target = theta2.index(plan.parameter);
  const double estimate = fit.theta2(target);
  const double z = normal_quantile(0.5 * (1.0 + options.level));

  std::vector<VarianceReport> reports;
  std::vector<int> counts;
  for (const auto& v : estimators.variance) {
    if (v.method == VarianceMethod::naive)
      reports.push_back(naive_variance(*fit.problem, fit.theta1, fit.theta2));
    else if (v.method == VarianceMethod::asymptotic)
      reports.push_back(asymptotic_variance(*fit.problem, fit.theta1, fit.theta2, fit.sigma11));
    else
      counts.push_back(v.draws);
  }
  if (!counts.empty()) {
    const int most = *std::max_element(counts.begin(), counts.end());
    const MatrixXd draws = mvn_draw_matrix(fit.theta1, fit.sigma11.m, most, simulation_draw_seed(rep_rng));
    const VarianceReport naive = naive_variance(*fit.problem, fit.theta1, fit.theta2);
    auto sims = simulation_variance_from_draws(*fit.problem, naive.v2, draws, counts, 1);
    for (auto& r : sims) reports.push_back(std::move(r));
  }

  bool omitted = false;
  if (estimators.onestep) {
    omitted = !one.ok;
    for (Index q = 0; !omitted && q < one.estimates.size(); ++q)
      if (std::abs(one.estimates(q) - theta2[plan.omission_parameters[q]]) > plan.omission_bound) omitted = true;
  }

  std::vector<ReplicationRecord> records;
  auto hit = [&](double est, double se) { return std::abs(est - plan.truth) <= z * se; };
  for (const auto& v : estimators.variance) {
    const auto it = std::find_if(reports.begin(), reports.end(), [&](const VarianceReport& r) { return r.request == v; });
    ReplicationRecord rec;
    rec.scenario = id;
    rec.rep = rep;
    rec.estimator = v.label();
    rec.estimate = estimate;
    rec.se = std::sqrt(it->total.m(target, target));
    rec.ci_hit = hit(estimate, rec.se);
    rec.omitted = omitted;
    rec.failed_refits = it->failed_refits;
    records.push_back(rec);
  }
  if (estimators.onestep) {
    ReplicationRecord rec;
    rec.scenario = id;
    rec.rep = rep;
    rec.estimator = "onestep";
    rec.estimate = one.estimates.size() ? one.estimates(0) : std::numeric_limits<double>::quiet_NaN();
    rec.se = one.se;
    rec.ci_hit = one.ok && hit(rec.estimate, rec.se);
    rec.converged = one.ok;
    rec.omitted = omitted;
    records.push_back(rec);
  }
  return records;
}

}  // namespace

std::vector<EstimatorMetrics> aggregate_records(const std::vector<ReplicationRecord>& records,
                                                const std::vector<std::string>& estimators, double) {
  std::vector<EstimatorMetrics> out;
  for (const auto& label : estimators) {
    std::vector<double> est, se;
    int hits = 0;
    for (const auto& r : records) {
      if (r.estimator != label || r.omitted) continue;
      est.push_back(r.estimate);
      se.push_back(r.se);
      hits += r.ci_hit;
    }
    EstimatorMetrics m;
    m.estimator = label;
    m.used = static_cast<int>(est.size());
    if (m.used >= 2) {
      const Eigen::Map<const VectorXd> e(est.data(), m.used), s(se.data(), m.used);
      m.mean_se = s.mean();
      m.sd_estimate = std::sqrt((e.array() - e.mean()).square().sum() / (m.used - 1));
      m.se_ratio = m.mean_se / m.sd_estimate;
      m.coverage = static_cast<double>(hits) / m.used;
    }
    out.push_back(m);
  }
  return out;
}

StudyMetrics run_study(const StudyScenario& scenario, const StudyEstimators& estimators, const StudyOptions& options) {
  std::visit([](const auto& s) { s.validate(); }, scenario);
  if (estimators.variance.empty()) throw InputError("a study needs at least one two-step variance estimator");
  const int reps = scenario_replications(scenario);
  const ReplicationPlan plan = plan_for(scenario);

  std::vector<std::vector<ReplicationRecord>> per_rep(reps);
  std::vector<std::string> errors(reps);
  std::vector<char> failed(reps, 0);
  parallel_for(reps, options.jobs, [&](int r) {
    try {
      per_rep[r] = replicate(scenario, estimators, r, options);
    } catch (const InputError&) {
      throw;
    } catch (const std::exception& e) {
      failed[r] = 1;
      errors[r] = e.what();
    }
  });

  StudyMetrics m;
  m.scenario = scenario_id(scenario);
  m.parameter = plan.parameter;
  m.truth = plan.truth;
  m.replications = reps;
  for (int r = 0; r < reps; ++r) {
    if (failed[r]) {
      ++m.failed;
      m.failures.push_back("replication " + std::to_string(r) + ": " + errors[r]);
      continue;
    }
    if (!per_rep[r].empty() && per_rep[r].front().omitted) ++m.omitted;
    m.records.insert(m.records.end(), per_rep[r].begin(), per_rep[r].end());
  }
  if (m.failed > options.max_failure_rate * reps) {
    std::string msg = "scenario " + m.scenario + ": " + std::to_string(m.failed) + " of " + std::to_string(reps) +
                      " replications failed";
    for (std::size_t i = 0; i < std::min<std::size_t>(3, m.failures.size()); ++i) msg += "\n  " + m.failures[i];
    throw ConvergenceError(msg);
  }
  m.estimators = aggregate_records(m.records, estimators.labels(), plan.truth);
  return m;
}

// ---------------------------------------------------------------------------
// Output

void write_replications_csv(const std::vector<StudyMetrics>& studies, std::ostream& out) {
  out << "scenario,rep,estimator,estimate,se,ci_hit,converged,omitted,failed_refits\n";
  for (const auto& s : studies)
    for (const auto& r : s.records)
      fmt::print(out, "{},{},{},{:.6g},{:.6g},{},{},{},{}\n", r.scenario, r.rep, r.estimator, r.estimate, r.se,
                 r.ci_hit ? 1 : 0, r.converged ? 1 : 0, r.omitted ? 1 : 0, r.failed_refits);
}

void write_metrics_csv(const std::vector<StudyMetrics>& studies, std::ostream& out) {
  out << "scenario,parameter,truth,estimator,used,omitted,failed,mean_se,sd_estimate,se_ratio,coverage\n";
  for (const auto& s : studies)
    for (const auto& e : s.estimators)
      fmt::print(out, "{},{},{:.6g},{},{},{},{},{:.6g},{:.6g},{:.6g},{:.6g}\n", s.scenario, s.parameter, s.truth,
                 e.estimator, e.used, s.omitted, s.failed, e.mean_se, e.sd_estimate, e.se_ratio, e.coverage);
}

void print_metrics_tables(const std::vector<StudyMetrics>& studies, std::ostream& out) {
  if (studies.empty()) return;
  std::size_t width = 8;
  for (const auto& s : studies) width = std::max(width, s.scenario.size());
  auto table = [&](const char* title, auto cell) {
    fmt::print(out, "{}\n", title);
    fmt::print(out, "{:<{}}", "scenario", width);
    for (const auto& e : studies.front().estimators) fmt::print(out, "  {:>10}", estimator_header(e.estimator));
    fmt::print(out, "  {:>8}\n", "omitted");
    for (const auto& s : studies) {
      fmt::print(out, "{:<{}}", s.scenario, width);
      for (const auto& e : s.estimators) fmt::print(out, "  {:>10}", fmt::format("{:.6g}", cell(e)));
      fmt::print(out, "  {:>8}\n", s.omitted);
    }
  };
  table("Standard error ratio (mean SE / SD of estimates)", [](const EstimatorMetrics& e) { return e.se_ratio; });
  out << '\n';
  table("Coverage of 95% intervals (%)", [](const EstimatorMetrics& e) { return 100.0 * e.coverage; });
}

}  // namespace twostep
