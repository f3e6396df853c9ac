// Acceptance suite: one PASS/FAIL line per criterion.
#include "test_support.hpp"

#include "twostep/latent_class.hpp"
#include "twostep/latent_trait.hpp"
#include "twostep/numdiff.hpp"
#include "twostep/sim_study.hpp"
#include "twostep/variance.hpp"

#include <CLI11.hpp>
#include <fmt/core.h>

#include <algorithm>
#include <chrono>
#include <functional>
#include <map>
#include <set>
#include <thread>

using namespace twostep;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    pass = pass && ok;
    if (!detail.empty()) detail += "; ";
    detail += (ok ? "" : "[x] ") + what;
  }
};

bool within(double x, double lo, double hi) { return x >= lo && x <= hi; }

const TraitStructuralSpec kRegression{{{"eta2", {}, {"eta1"}}}, true};

TraitScenario trait_scenario() {
  TraitScenario s;
  s.id = "trait";
  s.n = 1000;
  s.r_eta_sq = 0.2;
  s.r_y_sq = 0.6;
  s.replications = 100;
  s.seed = 1;
  return s;
}

// Criteria 1-3 share one study.
class TraitStudy {
 public:
  explicit TraitStudy(int jobs) : jobs_(jobs) {}

  const StudyMetrics& get() {
    if (!result_) {
      StudyOptions o;
      o.jobs = jobs_;
      result_ = run_study(trait_scenario(),
                          StudyEstimators::parse({"naive", "asymptotic", "simulation:50", "simulation:500"}), o);
    }
    return *result_;
  }

 private:
  int jobs_;
  std::optional<StudyMetrics> result_;
};

Outcome criterion1(TraitStudy& study) {
  const EstimatorMetrics& m = study.get().metrics("naive");
  Outcome o;
  o.require(within(m.se_ratio, 0.55, 0.80), fmt::format("naive SE ratio {:.3f} in [0.55, 0.80]", m.se_ratio));
  o.require(m.coverage <= 0.90, fmt::format("naive coverage {:.1f}% <= 90%", 100 * m.coverage));
  return o;
}

Outcome criterion2(TraitStudy& study) {
  Outcome o;
  for (const char* e : {"asymptotic", "simulation:50"}) {
    const EstimatorMetrics& m = study.get().metrics(e);
    o.require(within(m.se_ratio, 0.90, 1.15), fmt::format("{} SE ratio {:.3f} in [0.90, 1.15]", e, m.se_ratio));
    o.require(within(m.coverage, 0.90, 0.995), fmt::format("{} coverage {:.1f}% in [90, 99.5]", e, 100 * m.coverage));
  }
  return o;
}

Outcome criterion3(TraitStudy& study) {
  const double a = study.get().metrics("simulation:50").se_ratio;
  const double b = study.get().metrics("simulation:500").se_ratio;
  Outcome o;
  o.require(std::abs(a - b) < 0.03, fmt::format("|{:.4f} - {:.4f}| = {:.4f} < 0.03", a, b, std::abs(a - b)));
  return o;
}

Outcome criterion4(int jobs) {
  ClassScenario s;
  s.id = "class";
  s.n = 1000;
  s.effect = ClassEffect::mild;
  s.separation = 0.91;
  s.replications = 100;
  s.seed = 1;
  StudyOptions opt;
  opt.jobs = jobs;
  const StudyMetrics m = run_study(s, StudyEstimators::parse({"naive", "asymptotic", "simulation:50"}), opt);
  const EstimatorMetrics& a = m.metrics("asymptotic");
  const EstimatorMetrics& b = m.metrics("simulation:50");
  Outcome o;
  o.require(std::abs(a.se_ratio - b.se_ratio) < 0.005,
            fmt::format("asymptotic {:.4f} vs simulation {:.4f} within 0.005", a.se_ratio, b.se_ratio));
  for (const EstimatorMetrics* e : {&a, &b})
    o.require(within(e->coverage, 0.90, 0.995),
              fmt::format("{} coverage {:.1f}% in [90, 99.5]", e->estimator, 100 * e->coverage));
  return o;
}

Outcome criterion5() {
  Outcome o;
  const std::pair<ClassEffect, Eigen::Vector3d> targets[] = {{ClassEffect::none, {0.32, 0.33, 0.35}},
                                                             {ClassEffect::strong, {0.28, 0.33, 0.39}}};
  for (const auto& [effect, target] : targets) {
    ClassScenario s;
    s.n = 50000;
    s.effect = effect;
    const ClassSample sample = gen_class_data(s, 0);
    Eigen::Vector3d share;
    for (int c = 0; c < 3; ++c) share(c) = (sample.classes.array() == c).cast<double>().mean();
    const double worst = (share - target).cwiseAbs().maxCoeff();
    o.require(worst <= 0.02, fmt::format("{} ({:.3f}, {:.3f}, {:.3f}) max deviation {:.4f} <= 0.02", to_string(effect),
                                         share(0), share(1), share(2), worst));
  }
  return o;
}

Outcome criterion6() {
  Outcome o;
  for (const auto& [separation, lo, hi] : {std::tuple{0.87, 0.77, 0.83}, std::tuple{0.91, 0.87, 0.93}}) {
    ClassScenario s;
    s.separation = separation;
    const double r2 = entropy_r2(s.measurement(), class_marginal_proportions(s));
    o.require(within(r2, lo, hi), fmt::format("separation {} entropy R2 {:.4f} in [{}, {}]", separation, r2, lo, hi));
  }
  return o;
}

Outcome criterion7(int jobs) {
  const TraitScenario s = trait_scenario();
  const TraitSample sample = gen_trait_data(s, 0);
  const IrtStep1Fit fit = irt_step1_fit_all(sample.data, {"eta1", "eta2"});
  const TraitStep2Result r2 = irt_step2_fit(sample.data, fit.measurement, kRegression);
  const TraitTwoStepProblem problem(sample.data, fit.measurement, kRegression, r2.theta2.values(), {},
                                    r2.inverse_hessian);
  const VectorXd theta1 = fit.measurement.free_values();
  const VarianceReport asym = asymptotic_variance(problem, theta1, r2.theta2.values(), fit.sigma11);
  const VarianceReport sim =
      simulation_variance(problem, theta1, r2.theta2.values(), fit.sigma11, 2000, RngStream(s.seed, 0), jobs);
  const double dist = (asym.v1.m - sim.v1.m).norm() / asym.v1.m.norm();
  Outcome o;
  o.require(dist < 0.10, fmt::format("relative Frobenius distance {:.4f} < 0.10 ({} failed refits)", dist,
                                     sim.failed_refits));
  return o;
}

MatrixXd random_pd(Index d, RngStream& rng) {
  MatrixXd a(d, d);
  for (Index i = 0; i < d; ++i)
    for (Index j = 0; j < d; ++j) a(i, j) = rng.normal();
  return a * a.transpose() + 0.5 * MatrixXd::Identity(d, d);
}

double partitioned_inverse_error() {
  RngStream rng(2024, 1);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Index d1 = 1 + trial % 5, d2 = 1 + (trial / 5) % 4;
    const MatrixXd info = random_pd(d1 + d2, rng);
    const MatrixXd sigma = info.inverse();
    const MatrixXd s11 = sigma.topLeftCorner(d1, d1), s12 = sigma.topRightCorner(d1, d2);
    const MatrixXd i22inv = info.bottomRightCorner(d2, d2).inverse();
    const MatrixXd e1 = i22inv * info.topRightCorner(d1, d2).transpose() + s12.transpose() * s11.inverse();
    const MatrixXd e2 = i22inv - (sigma.bottomRightCorner(d2, d2) - s12.transpose() * s11.inverse() * s12);
    worst = std::max({worst, e1.cwiseAbs().maxCoeff(), e2.cwiseAbs().maxCoeff()});
  }
  return worst;
}

LcaMeasurement random_lca(int classes, int items, RngStream& rng) {
  std::vector<std::string> names;
  for (int k = 0; k < items; ++k) names.push_back("item." + std::to_string(k + 1));
  LcaMeasurement m = LcaMeasurement::zeros(classes, names, std::vector<int>(items, 2));
  VectorXd v(m.free_size());
  for (Index i = 0; i < v.size(); ++i) v(i) = rng.normal();
  m.set_free(v);
  return m;
}

VectorXd random_simplex(int classes, RngStream& rng) {
  VectorXd pi(classes);
  for (int c = 0; c < classes; ++c) pi(c) = rng.exponential();
  return pi / pi.sum();
}

// (worst |sum - 1|, worst |brute force - computed|)
std::pair<double, double> pattern_probability_errors() {
  RngStream rng(31, 0);
  double sum_err = 0.0, brute_err = 0.0;
  for (int items : {3, 6, 10}) {
    const LcaMeasurement m = random_lca(3, items, rng);
    const VectorXd pi = random_simplex(3, rng);
    const ProbabilityTable probs = m.probabilities();
    double total = 0.0;
    Eigen::VectorXi y(items);
    for (int code = 0; code < (1 << items); ++code) {
      for (int k = 0; k < items; ++k) y(k) = 1 + ((code >> k) & 1);
      const double p = lca_pattern_prob(m, pi, y);
      double oracle = 0.0;
      for (int c = 0; c < 3; ++c) {
        double term = pi(c);
        for (int k = 0; k < items; ++k) term *= probs[k](y(k) - 1, c);
        oracle += term;
      }
      brute_err = std::max(brute_err, std::abs(p - oracle));
      total += p;
    }
    sum_err = std::max(sum_err, std::abs(total - 1.0));
  }
  return {sum_err, brute_err};
}

// (worst trapezoid discrepancy at 61 nodes, worst error at zero loadings)
std::pair<double, double> quadrature_errors() {
  RngStream rng(2, 1);
  Eigen::MatrixXi items(4, 2);
  items << 1, 1, 1, 2, 2, 1, 2, 2;
  double trap = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::Vector2d tau(rng.normal(), rng.normal());
    const Eigen::Vector2d lambda(rng.normal(), rng.normal());
    const double mu = 0.5 * rng.normal(), sigma2 = 0.5 + rng.uniform();
    trap = std::max(trap, std::abs(gh_marginal_loglik(items, tau, lambda, mu, sigma2, 61) -
                                   testing::trapezoid_loglik(items, tau, lambda, mu, sigma2)));
  }
  const Eigen::Vector2d tau(0.3, -1.2);
  double exact = 0.0;
  for (Index i = 0; i < items.rows(); ++i)
    for (Index k = 0; k < 2; ++k) exact += std::log(irt_item_prob(tau(k), 0.0, 0.0) * (items(i, k) == kIrtYes) +
                                                    (1 - irt_item_prob(tau(k), 0.0, 0.0)) * (items(i, k) == kIrtNo));
  double zero = 0.0;
  for (int nodes : {2, 7, 31, 61})
    zero = std::max(zero, std::abs(gh_marginal_loglik(items, tau, VectorXd::Zero(2), 0.4, 2.0, nodes) - exact));
  return {trap, zero};
}

// Largest decrease of the EM log-likelihood between iterations.
double em_worst_decrease(const LcaStep1Result& r) {
  double worst = 0.0;
  for (std::size_t t = 1; t < r.trace.size(); ++t) worst = std::max(worst, r.trace[t - 1] - r.trace[t]);
  return worst;
}

Outcome criterion8(int jobs) {
  Outcome o;
  const double inv = partitioned_inverse_error();
  o.require(inv < 1e-8, fmt::format("partitioned inverse {:.1e} < 1e-8", inv));

  const auto [sum_err, brute_err] = pattern_probability_errors();
  o.require(sum_err < 1e-10, fmt::format("pattern sums {:.1e} < 1e-10", sum_err));
  o.require(brute_err < 1e-12, fmt::format("pattern brute force {:.1e} < 1e-12", brute_err));

  const auto [trap, zero] = quadrature_errors();
  o.require(trap < 1e-8, fmt::format("quadrature vs trapezoid {:.1e} < 1e-8", trap));
  o.require(zero < 1e-10, fmt::format("quadrature at zero loadings {:.1e} < 1e-10", zero));

  ClassScenario cs;
  cs.n = 1000;
  const ClassSample cls = gen_class_data(cs, 0);
  const LcaStep1Result l1 = lca_step1_em(cls.data, 3);
  double em = em_worst_decrease(l1);
  {
    RngStream rng(8, 1);
    Eigen::MatrixXi items(150, 6);
    for (Index i = 0; i < items.rows(); ++i)
      for (Index k = 0; k < items.cols(); ++k) items(i, k) = rng.uniform() < 0.5 ? 1 : 2;
    LcaStep1Config cfg;
    cfg.starts = 3;
    for (int classes : {2, 3, 4})
      em = std::max(em, em_worst_decrease(lca_step1_em(testing::binary_dataset(items), classes, cfg)));
  }
  o.require(em <= 1e-10, fmt::format("EM decrease {:.1e} <= 1e-10", em));

  const LcaStructuralSpec lspec{LcaStructuralForm::covariate, {"z.x"}, {}};
  const LcaStep2Result l2 = lca_step2(cls.data, l1.measurement, lspec);
  const LcaStructuralModel lmodel(cls.data, l1.measurement, lspec);
  const VectorXd lt1 = l1.measurement.free_values();
  const double g_class =
      numeric_gradient([&](const VectorXd& t) { return lmodel.loglik(lt1, t); }, l2.theta2.values())
          .lpNorm<Eigen::Infinity>();
  LcaStructuralSpec dspec{LcaStructuralForm::distal, {}, "y.out"};
  Dataset distal_data = cls.data;
  {
    RngStream rng(5, 0);
    distal_data.outcome_names = {"y.out"};
    distal_data.outcomes.resize(cs.n, 1);
    for (Index i = 0; i < cs.n; ++i) distal_data.outcomes(i, 0) = 0.5 * cls.classes(i) + rng.normal();
  }
  const LcaStep2Result d2 = lca_step2(distal_data, l1.measurement, dspec);
  const LcaStructuralModel dmodel(distal_data, l1.measurement, dspec);
  const double g_distal =
      numeric_gradient([&](const VectorXd& t) { return dmodel.loglik(lt1, t); }, d2.theta2.values())
          .lpNorm<Eigen::Infinity>();

  const TraitSample ts = gen_trait_data(trait_scenario(), 0);
  const IrtStep1Fit t1 = irt_step1_fit_all(ts.data, {"eta1", "eta2"});
  double g_step1 = 0.0;
  for (const auto& b : t1.blocks) g_step1 = std::max(g_step1, b.gradient.lpNorm<Eigen::Infinity>());
  const TraitStep2Result t2 = irt_step2_fit(ts.data, t1.measurement, kRegression);
  const TraitStructuralModel tmodel(ts.data, t1.measurement, kRegression);
  const VectorXd tt1 = t1.measurement.free_values();
  const double g_trait =
      numeric_gradient([&](const VectorXd& t) { return tmodel.loglik(tt1, t); }, t2.theta2.values())
          .lpNorm<Eigen::Infinity>();
  const double g_worst = std::max({g_class, g_distal, g_step1, g_trait}) / 1000.0;
  o.require(g_worst < 1e-4, fmt::format("gradient / n {:.1e} < 1e-4", g_worst));

  const LcaTwoStepProblem lproblem(cls.data, l1.measurement, lspec, l2.theta2.values());
  const CovMatrix zero11(MatrixXd::Zero(lt1.size(), lt1.size()), l1.measurement.free_names());
  const VarianceReport za = asymptotic_variance(lproblem, lt1, l2.theta2.values(), zero11);
  const VarianceReport zs = simulation_variance(lproblem, lt1, l2.theta2.values(), zero11, 20, RngStream(3, 0), jobs);
  o.require(za.total.m == za.v2.m && zs.total.m == zs.v2.m, "zero step-1 covariance gives total = V2");

  bool same = lca_step1_em(cls.data, 3).measurement.free_values() == lt1;
  TraitScenario small = trait_scenario();
  small.n = 300;
  small.replications = 3;
  ClassScenario small_class = cs;
  small_class.n = 300;
  small_class.replications = 3;
  const StudyEstimators est = StudyEstimators::parse({"naive", "asymptotic", "simulation:20"});
  StudyOptions many;
  many.jobs = std::max(2, jobs);
  for (const StudyScenario& sc : {StudyScenario(small), StudyScenario(small_class)}) {
    const StudyMetrics a = run_study(sc, est), b = run_study(sc, est, many);
    for (std::size_t i = 0; i < a.records.size() && same; ++i)
      same = a.records[i].estimate == b.records[i].estimate && a.records[i].se == b.records[i].se;
    same = same && a.records.size() == b.records.size();
  }
  o.require(same, "bitwise determinism under fixed seeds");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite for twostep-lv"};
  std::vector<int> only;
  int jobs = std::max(1u, std::thread::hardware_concurrency());
  app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 8));
  app.add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  const std::set<int> chosen(only.begin(), only.end());

  TraitStudy study(jobs);
  const std::map<int, std::function<Outcome()>> criteria{
      {1, [&] { return criterion1(study); }}, {2, [&] { return criterion2(study); }},
      {3, [&] { return criterion3(study); }}, {4, [&] { return criterion4(jobs); }},
      {5, [] { return criterion5(); }},       {6, [] { return criterion6(); }},
      {7, [&] { return criterion7(jobs); }},  {8, [&] { return criterion8(jobs); }}};

  int failed = 0;
  for (const auto& [number, run] : criteria) {
    if (!chosen.empty() && !chosen.count(number)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o.require(false, std::string("error: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    fmt::print("{} criterion {}: {} ({:.0f} s)\n", o.pass ? "PASS" : "FAIL", number, o.detail, secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed == 0 ? 0 : 1;
}
