#include "test_support.hpp"

#include "twostep/latent_trait.hpp"
#include "twostep/numdiff.hpp"
#include "twostep/sim_study.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace twostep;
using testing::trapezoid_loglik;

namespace {

const TraitStructuralSpec kRegression{{{"eta2", {}, {"eta1"}}}, true};

TraitScenario scenario(Index n, double r_eta_sq = 0.2, double r_y_sq = 0.6) {
  TraitScenario s;
  s.n = n;
  s.r_eta_sq = r_eta_sq;
  s.r_y_sq = r_y_sq;
  return s;
}

IrtMeasurement true_measurement(const TraitScenario& s) {
  IrtMeasurement m;
  for (int j = 0; j < 2; ++j) {
    IrtBlock b;
    b.trait = j == 0 ? "eta1" : "eta2";
    for (int k = 0; k < s.items_per_trait; ++k)
      b.item_names.push_back("item." + std::to_string(j * s.items_per_trait + k + 1));
    b.tau = VectorXd::Zero(s.items_per_trait);
    b.lambda = VectorXd::Constant(s.items_per_trait, s.loading());
    m.blocks.push_back(b);
  }
  return m;
}

double ols_slope(const VectorXd& x, const VectorXd& y) {
  const VectorXd xc = x.array() - x.mean();
  return xc.dot(y) / xc.squaredNorm();
}

}  // namespace

TEST_CASE("item response function") {
  CHECK(irt_item_prob(0, 0, 3.7) == 0.5);
  CHECK(irt_item_prob(0, 1, 0) == 0.5);
  CHECK(irt_item_prob(1, 2, 0.5) == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))).epsilon(1e-12));
  CHECK(irt_item_prob(1, 2, 0.5) == doctest::Approx(0.880797).epsilon(1e-6));
  CHECK(irt_item_prob(0.7, 1.3, -0.7 / 1.3) == doctest::Approx(0.5).epsilon(1e-14));
  double last = 0.0;
  for (double eta = -6; eta <= 6; eta += 0.25) {
    const double p = irt_item_prob(-0.4, 0.8, eta);
    CHECK(p > last);
    last = p;
  }
}

TEST_CASE("gauss hermite marginal likelihood") {
  RngStream rng(2, 0);
  SUBCASE("exact when every loading is zero") {
    Eigen::MatrixXi items(6, 3);
    for (Index i = 0; i < 6; ++i)
      for (Index k = 0; k < 3; ++k) items(i, k) = rng.uniform() < 0.5 ? kIrtNo : kIrtYes;
    items(2, 1) = 0;
    const Eigen::Vector3d tau(0.3, -1.0, 2.0);
    double oracle = 0.0;
    for (Index i = 0; i < 6; ++i)
      for (Index k = 0; k < 3; ++k) {
        if (items(i, k) == 0) continue;
        const double p = 1.0 / (1.0 + std::exp(-tau(k)));
        oracle += std::log(items(i, k) == kIrtYes ? p : 1 - p);
      }
    for (int nodes : {2, 7, 31, 61})
      CHECK(std::abs(gh_marginal_loglik(items, tau, VectorXd::Zero(3), 0.4, 2.0, nodes) - oracle) < 1e-10);
  }
  // Known to fail: logistic integrands have poles at i*pi/lambda, and with
  // loadings near 2 the 61-node rule is off by up to about 5e-8.
  SUBCASE("matches trapezoid integration") {
    Eigen::MatrixXi items(4, 2);
    items << 1, 1, 1, 2, 2, 1, 2, 2;
    for (int trial = 0; trial < 5; ++trial) {
      const Eigen::Vector2d tau(rng.normal(), rng.normal());
      const Eigen::Vector2d lambda(rng.normal(), rng.normal());
      const double mu = 0.5 * rng.normal(), sigma2 = 0.5 + rng.uniform();
      CHECK(std::abs(gh_marginal_loglik(items, tau, lambda, mu, sigma2, 61) -
                     trapezoid_loglik(items, tau, lambda, mu, sigma2)) < 1e-8);
    }
  }
  SUBCASE("pattern probabilities over four items sum to one") {
    const Eigen::Vector4d tau(0.2, -0.5, 1.0, 0.0);
    const Eigen::Vector4d lambda(1.5, 0.8, 2.2, -1.0);
    double total = 0.0;
    Eigen::MatrixXi y(1, 4);
    for (int code = 0; code < 16; ++code) {
      for (int k = 0; k < 4; ++k) y(0, k) = 1 + ((code >> k) & 1);
      total += std::exp(gh_marginal_loglik(y, tau, lambda, 0.0, 1.0));
    }
    CHECK(std::abs(total - 1.0) < 1e-8);
  }
  SUBCASE("flipping the loadings and the trait leaves the likelihood unchanged") {
    Eigen::MatrixXi items(5, 3);
    for (Index i = 0; i < 5; ++i)
      for (Index k = 0; k < 3; ++k) items(i, k) = rng.uniform() < 0.5 ? kIrtNo : kIrtYes;
    const Eigen::Vector3d tau(0.1, 0.2, -0.3), lambda(1.0, 2.0, 0.5);
    CHECK(gh_marginal_loglik(items, tau, lambda, 0, 1) == doctest::Approx(gh_marginal_loglik(items, tau, -lambda, 0, 1)).epsilon(1e-12));
  }
}

TEST_CASE("step 1 trait fits") {
  SUBCASE("first-order conditions, sign and covariance") {
    const TraitScenario s = scenario(2000);
    const TraitSample sample = gen_trait_data(s, 1);
    for (const std::string trait : {"eta1", "eta2"}) {
      const IrtStep1Result r = irt_step1_fit(sample.data, trait);
      CHECK(r.converged);
      CHECK(r.block.lambda(0) >= 0);
      for (Index k = 0; k < 4; ++k) {
        CHECK(std::abs(r.block.lambda(k) - s.loading()) <= 3 * std::sqrt(r.sigma11.m(2 * k + 1, 2 * k + 1)));
        // marginal probability 0.5 means tau = 0
        CHECK(std::abs(r.block.tau(k)) <= 3 * std::sqrt(r.sigma11.m(2 * k, 2 * k)));
      }
      CHECK(r.gradient.lpNorm<Eigen::Infinity>() < 1e-4 * 2000);
      const Eigen::MatrixXi items = sample.data.items.middleCols(trait == "eta1" ? 0 : 4, 4);
      CHECK(r.loglik == doctest::Approx(gh_marginal_loglik(items, r.block.tau, r.block.lambda, 0, 1)).epsilon(1e-10));
      CHECK(r.sigma11.axes == r.block.free_names());
      CHECK(r.sigma11.satisfies_invariants());
    }
  }
  SUBCASE("items unrelated to the trait give loadings near zero") {
    RngStream rng(6, 0);
    Eigen::MatrixXi items(1500, 4);
    for (Index i = 0; i < items.rows(); ++i)
      for (Index k = 0; k < 4; ++k) items(i, k) = rng.uniform() < 0.5 ? kIrtNo : kIrtYes;
    const IrtStep1Result r = irt_step1_fit(testing::binary_dataset(items, "eta"), "eta");
    for (Index k = 0; k < 4; ++k) {
      INFO("item " << k << " lambda " << r.block.lambda(k) << " se " << std::sqrt(r.sigma11.m(2 * k + 1, 2 * k + 1)));
      CHECK(std::abs(r.block.lambda(k)) <= 3 * std::sqrt(r.sigma11.m(2 * k + 1, 2 * k + 1)));
    }
  }
  SUBCASE("block diagonal step-1 covariance") {
    const TraitSample sample = gen_trait_data(scenario(500), 2);
    const IrtStep1Fit fit = irt_step1_fit_all(sample.data, {"eta1", "eta2"});
    CHECK(fit.sigma11.dim() == 16);
    CHECK(fit.sigma11.m.topRightCorner(8, 8).isZero(0.0));
    CHECK(fit.sigma11.m.bottomLeftCorner(8, 8).isZero(0.0));
    CHECK(fit.measurement.free_names() == fit.sigma11.axes);
  }
  SUBCASE("a constant item is rejected") {
    TraitSample sample = gen_trait_data(scenario(200), 3);
    sample.data.items.col(1).setConstant(kIrtYes);
    CHECK_THROWS_AS(irt_step1_fit(sample.data, "eta1"), InputError);
  }
}

// Known to fail: with loading 2.22 the Gauss-Hermite error per unit is about
// 2e-4 at 31 nodes, so the summed change over 1000 units is near 0.015.
TEST_CASE("31 nodes are converged on the simulation design") {
  const TraitScenario s = scenario(1000);
  const TraitSample sample = gen_trait_data(s, 0);
  const Eigen::MatrixXi block = sample.data.items.leftCols(4);
  const VectorXd tau = VectorXd::Zero(4), lambda = VectorXd::Constant(4, s.loading());
  CHECK(std::abs(gh_marginal_loglik(block, tau, lambda, 0, 1, 31) - gh_marginal_loglik(block, tau, lambda, 0, 1, 61)) <
        1e-8);
}

// Known to fail: the standard error of each loading is about 0.17 at this
// sample size, so all eight estimates rarely fall within 0.15.
TEST_CASE("step 1 loadings within 0.15 of the design at n = 2000") {
  const TraitScenario s = scenario(2000);
  const TraitSample sample = gen_trait_data(s, 1);
  for (const std::string trait : {"eta1", "eta2"}) {
    const IrtStep1Result r = irt_step1_fit(sample.data, trait);
    for (Index k = 0; k < 4; ++k) CHECK(std::abs(r.block.lambda(k) - s.loading()) < 0.15);
  }
}

TEST_CASE("step 2 trait regression") {
  SUBCASE("shared grid and per-unit evaluation agree") {
    const TraitSample sample = gen_trait_data(scenario(300), 4);
    const IrtMeasurement m = true_measurement(scenario(300));
    const TraitStructuralModel shared(sample.data, m, kRegression);
    const TraitStructuralModel per_unit(sample.data, m, kRegression, 31, true);
    CHECK(shared.shared_grid());
    CHECK_FALSE(per_unit.shared_grid());
    const VectorXd theta2 = Eigen::Vector3d(0.1, 0.4, 0.8);
    CHECK(shared.loglik(m.free_values(), theta2) ==
          doctest::Approx(per_unit.loglik(m.free_values(), theta2)).epsilon(1e-12));
  }
  SUBCASE("first-order conditions and parameter names") {
    const TraitScenario s = scenario(1000);
    const TraitSample sample = gen_trait_data(s, 5);
    const IrtStep1Fit fit = irt_step1_fit_all(sample.data, {"eta1", "eta2"});
    const TraitStep2Result r = irt_step2_fit(sample.data, fit.measurement, kRegression);
    CHECK(r.theta2.names() == std::vector<std::string>{"eta2~1", "eta2~eta1", "eta2~~eta2"});
    const TraitStructuralModel model(sample.data, fit.measurement, kRegression);
    const VectorXd theta1 = fit.measurement.free_values();
    const VectorXd g = numeric_gradient([&](const VectorXd& t) { return model.loglik(theta1, t); }, r.theta2.values());
    CHECK(g.lpNorm<Eigen::Infinity>() < 1e-4 * 1000);
    CHECK(r.v2.satisfies_invariants());
  }
  SUBCASE("true measurement recovers the generating slope at large n") {
    const TraitScenario s = scenario(20000);
    const TraitSample sample = gen_trait_data(s, 6);
    const TraitStep2Result r = irt_step2_fit(sample.data, true_measurement(s), kRegression);
    CHECK(std::abs(r.theta2["eta2~eta1"] - s.beta1()) < 0.02);
    CHECK(std::abs(r.theta2["eta2~eta1"] - ols_slope(sample.eta1, sample.eta2)) < 0.02);
    CHECK(std::abs(r.theta2["eta2~~eta2"] - s.residual_variance()) < 0.03);
  }
  SUBCASE("relabelling the traits leaves the maximized likelihood unchanged") {
    const TraitSample sample = gen_trait_data(scenario(600), 7);
    const IrtStep1Fit fit = irt_step1_fit_all(sample.data, {"eta1", "eta2"});
    const TraitStructuralSpec forward{{{"eta1", {}, {}}, {"eta2", {}, {}}}, true};
    const TraitStructuralSpec backward{{{"eta2", {}, {}}, {"eta1", {}, {}}}, true};
    const TraitStep2Result a = irt_step2_fit(sample.data, fit.measurement, forward);
    const TraitStep2Result b = irt_step2_fit(sample.data, fit.measurement, backward);
    CHECK(a.loglik == doctest::Approx(b.loglik).epsilon(1e-9));
    CHECK(a.theta2["eta1~~eta2"] == doctest::Approx(b.theta2["eta2~~eta1"]).epsilon(1e-4));
  }
  SUBCASE("covariates use the per-unit path") {
    TraitSample sample = gen_trait_data(scenario(400), 8);
    sample.data.covariates = sample.eta1 + 0.5 * VectorXd::Ones(400);
    sample.data.covariate_names = {"z.w"};
    const TraitStructuralSpec spec{{{"eta1", {"z.w"}, {}}, {"eta2", {}, {"eta1"}}}, true};
    const IrtStep1Fit fit = irt_step1_fit_all(sample.data, {"eta1", "eta2"});
    const TraitStructuralModel model(sample.data, fit.measurement, spec);
    CHECK_FALSE(model.shared_grid());
    const TraitStep2Result r = irt_step2_fit(sample.data, fit.measurement, spec);
    CHECK(r.theta2.names() ==
          std::vector<std::string>{"eta1~1", "eta1~z.w", "eta1~~eta1", "eta2~1", "eta2~eta1", "eta2~~eta2"});
    CHECK(r.theta2["eta1~z.w"] > 0.5);
  }
  SUBCASE("unknown trait or covariate") {
    const TraitSample sample = gen_trait_data(scenario(100), 9);
    const IrtMeasurement m = true_measurement(scenario(100));
    CHECK_THROWS_AS(TraitStructuralModel(sample.data, m, {{{"eta3", {}, {"eta1"}}}, true}), InputError);
    CHECK_THROWS_AS(TraitStructuralModel(sample.data, m, {{{"eta2", {"z.none"}, {"eta1"}}}, true}), InputError);
  }
}

TEST_CASE("zero slope intervals reject at the nominal rate") {
  const TraitScenario s = scenario(500, 0.0);
  int rejected = 0;
  const int reps = 250;
  for (int rep = 0; rep < reps; ++rep) {
    const TraitSample sample = gen_trait_data(s, rep);
    const IrtStep1Fit fit = irt_step1_fit_all(sample.data, {"eta1", "eta2"});
    const TraitStep2Result r = irt_step2_fit(sample.data, fit.measurement, kRegression);
    const Index at = r.theta2.index("eta2~eta1");
    const auto [lo, hi] = wald_interval(r.theta2.values()(at), std::sqrt(r.v2.m(at, at)));
    rejected += lo > 0 || hi < 0;
  }
  const double rate = static_cast<double>(rejected) / reps;
  CHECK(rate >= 0.02);
  CHECK(rate <= 0.10);
}

TEST_CASE("standardized family") {
  const TraitScenario s = scenario(500);
  const TraitSample sample = gen_trait_data(s, 10);
  const IrtStep1Fit fit = irt_step1_fit_all(sample.data, {"eta1", "eta2"});
  const TraitStructuralModel model(sample.data, fit.measurement, kRegression);
  const VectorXd theta1 = fit.measurement.free_values();
  const VectorXd theta2 = Eigen::Vector3d(0.3, 0.5, 0.6);
  const auto [theta1_std, free] = model.standardize(theta1, theta2);
  CHECK(model.standardized_names() == std::vector<std::string>{"eta2~eta1"});
  const auto natural = model.natural_from_standardized(free);
  REQUIRE(natural);
  CHECK(model.loglik(theta1_std, *natural) == doctest::Approx(model.loglik(theta1, theta2)).epsilon(1e-10));
  // marginal mean 0 and variance 1 for the second trait
  const double b = (*natural)(1), v = (*natural)(2), a = (*natural)(0);
  CHECK(std::abs(a) < 1e-12);
  CHECK(b * b + v == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_FALSE(model.natural_from_standardized(VectorXd::Constant(1, 1.5)));
}

TEST_CASE("one-step trait estimation") {
  const TraitScenario s = scenario(800);
  const TraitSample sample = gen_trait_data(s, 11);
  const IrtStep1Fit fit = irt_step1_fit_all(sample.data, {"eta1", "eta2"});
  const TraitStep2Result r2 = irt_step2_fit(sample.data, fit.measurement, kRegression);
  const IrtOneStepResult one = irt_onestep(sample.data, fit.measurement, kRegression, r2.theta2.values());
  CHECK(one.converged);
  CHECK(one.loglik >= r2.loglik - 1e-8);
  CHECK(one.measurement_size == 16);
  CHECK(one.theta.names().back() == "eta2~eta1");
  CHECK(std::abs(one.theta2_natural(1) - r2.theta2["eta2~eta1"]) < 0.1);
  CHECK(one.covariance.satisfies_invariants());
}

TEST_CASE("trait refits reproduce the step-2 fit") {
  const TraitSample sample = gen_trait_data(scenario(500), 12);
  const IrtStep1Fit fit = irt_step1_fit_all(sample.data, {"eta1", "eta2"});
  const TraitStep2Result r2 = irt_step2_fit(sample.data, fit.measurement, kRegression);
  const TraitTwoStepProblem problem(sample.data, fit.measurement, kRegression, r2.theta2.values(), {},
                                    r2.inverse_hessian);
  const auto again = problem.refit(fit.measurement.free_values());
  REQUIRE(again);
  CHECK((*again - r2.theta2.values()).cwiseAbs().maxCoeff() < 1e-5);
  const VarianceReport a = asymptotic_variance(problem, fit.measurement.free_values(), r2.theta2.values(), fit.sigma11);
  CHECK(a.total.m(1, 1) >= a.v2.m(1, 1));
}
