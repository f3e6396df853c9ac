#include "twostep/latent_class.hpp"

#include "twostep/linalg.hpp"
#include "twostep/numdiff.hpp"
#include "twostep/optimize.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

namespace twostep {

// ---------------------------------------------------------------------------
// Measurement parameterization

LcaMeasurement LcaMeasurement::zeros(int classes, std::vector<std::string> item_names, std::vector<int> categories) {
  if (classes < 1) throw InputError("latent class count must be at least 1");
  if (item_names.size() != categories.size()) throw InputError("item names and categories differ in length");
  LcaMeasurement m;
  m.classes = classes;
  m.item_names = std::move(item_names);
  m.categories = std::move(categories);
  for (int h : m.categories) {
    m.tau.push_back(VectorXd::Zero(h));
    m.lambda.push_back(MatrixXd::Zero(h, classes));
  }
  return m;
}

LcaMeasurement LcaMeasurement::from_probabilities(const ProbabilityTable& probs, std::vector<std::string> item_names,
                                                  double clamp) {
  if (probs.empty()) throw InputError("empty probability table");
  const int classes = static_cast<int>(probs.front().cols());
  std::vector<int> categories;
  for (const auto& p : probs) categories.push_back(static_cast<int>(p.rows()));
  LcaMeasurement m = zeros(classes, std::move(item_names), std::move(categories));
  for (std::size_t k = 0; k < probs.size(); ++k) {
    MatrixXd p = probs[k].cwiseMax(clamp).cwiseMin(1.0 - clamp);
    for (Index c = 0; c < p.cols(); ++c) p.col(c) /= p.col(c).sum();
    const MatrixXd logit = (p.array().log().rowwise() - p.row(0).array().log()).matrix();
    m.tau[k] = logit.col(0);
    for (Index c = 1; c < classes; ++c) m.lambda[k].col(c) = logit.col(c) - logit.col(0);
  }
  return m;
}

Index LcaMeasurement::free_size() const {
  Index d = 0;
  for (int h : categories) d += static_cast<Index>(h - 1) * classes;
  return d;
}

std::vector<std::string> LcaMeasurement::free_names() const {
  std::vector<std::string> names;
  names.reserve(free_size());
  for (Index k = 0; k < items(); ++k) {
    for (int l = 2; l <= categories[k]; ++l) {
      names.push_back("tau(" + item_names[k] + "," + std::to_string(l) + ")");
      for (int c = 2; c <= classes; ++c)
        names.push_back("lambda(" + item_names[k] + "," + std::to_string(l) + "," + std::to_string(c) + ")");
    }
  }
  return names;
}

VectorXd LcaMeasurement::free_values() const {
  VectorXd v(free_size());
  Index at = 0;
  for (Index k = 0; k < items(); ++k) {
    for (int l = 1; l < categories[k]; ++l) {
      v(at++) = tau[k](l);
      for (int c = 1; c < classes; ++c) v(at++) = lambda[k](l, c);
    }
  }
  return v;
}

void LcaMeasurement::set_free(const Eigen::Ref<const VectorXd>& values) {
  if (values.size() != free_size())
    throw InputError("measurement vector has length " + std::to_string(values.size()) + ", expected " +
                     std::to_string(free_size()));
  Index at = 0;
  for (Index k = 0; k < items(); ++k) {
    for (int l = 1; l < categories[k]; ++l) {
      tau[k](l) = values(at++);
      for (int c = 1; c < classes; ++c) lambda[k](l, c) = values(at++);
    }
  }
}

LcaMeasurement LcaMeasurement::with_free(const Eigen::Ref<const VectorXd>& values) const {
  LcaMeasurement m = *this;
  m.set_free(values);
  return m;
}

ProbabilityTable LcaMeasurement::probabilities() const {
  ProbabilityTable out;
  out.reserve(items());
  for (Index k = 0; k < items(); ++k) {
    MatrixXd p(categories[k], classes);
    for (int c = 0; c < classes; ++c) p.col(c) = softmax((tau[k] + lambda[k].col(c)).eval());
    out.push_back(std::move(p));
  }
  return out;
}

ProbabilityTable lca_item_response_probs(const LcaMeasurement& m) { return m.probabilities(); }

namespace {

std::vector<MatrixXd> log_table(const ProbabilityTable& probs) {
  std::vector<MatrixXd> out;
  out.reserve(probs.size());
  for (const auto& p : probs) out.push_back(p.array().log().matrix());
  return out;
}

// Unique response patterns with their multiplicities.
struct PatternTable {
  Eigen::MatrixXi patterns;
  VectorXd counts;
};

PatternTable compress_patterns(const Eigen::MatrixXi& items) {
  std::map<std::vector<int>, double> tally;
  std::vector<int> row(items.cols());
  for (Index i = 0; i < items.rows(); ++i) {
    for (Index k = 0; k < items.cols(); ++k) row[k] = items(i, k);
    tally[row] += 1.0;
  }
  PatternTable t;
  t.patterns.resize(static_cast<Index>(tally.size()), items.cols());
  t.counts.resize(static_cast<Index>(tally.size()));
  Index r = 0;
  for (const auto& [pattern, count] : tally) {
    for (Index k = 0; k < items.cols(); ++k) t.patterns(r, k) = pattern[k];
    t.counts(r++) = count;
  }
  return t;
}

// Row i, class c: sum over observed items of log P(Y_k = y_ik | c).
MatrixXd pattern_loglik(const Eigen::MatrixXi& items, const std::vector<MatrixXd>& logp, int classes) {
  MatrixXd out = MatrixXd::Zero(items.rows(), classes);
  for (Index i = 0; i < items.rows(); ++i) {
    for (Index k = 0; k < items.cols(); ++k) {
      const int y = items(i, k);
      if (y != kMissingItem) out.row(i) += logp[k].row(y - 1);
    }
  }
  return out;
}

// Posterior class membership from log prior + log measurement; returns the
// per-row log-likelihood through `row_ll`.
MatrixXd posterior(const MatrixXd& log_joint, VectorXd& row_ll) {
  row_ll.resize(log_joint.rows());
  MatrixXd w(log_joint.rows(), log_joint.cols());
  for (Index i = 0; i < log_joint.rows(); ++i) {
    row_ll(i) = log_sum_exp(log_joint.row(i));
    w.row(i) = (log_joint.row(i).array() - row_ll(i)).exp().matrix();
  }
  return w;
}

double step1_loglik(const PatternTable& t, const LcaMeasurement& m, const VectorXd& class_logits) {
  VectorXd full(m.classes);
  full(0) = 0.0;
  full.tail(m.classes - 1) = class_logits;
  const VectorXd log_pi = full.array() - log_sum_exp(full);
  MatrixXd lj = pattern_loglik(t.patterns, log_table(m.probabilities()), m.classes);
  lj.rowwise() += log_pi.transpose();
  double ll = 0.0;
  for (Index r = 0; r < lj.rows(); ++r) ll += t.counts(r) * log_sum_exp(lj.row(r));
  return ll;
}

struct EmRun {
  ProbabilityTable probs;
  VectorXd pi;
  double loglik = -std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
  std::vector<double> trace;
};

EmRun run_step1_em(const PatternTable& t, const std::vector<int>& categories, ProbabilityTable probs, VectorXd pi,
                   const LcaStep1Config& config) {
  const int classes = static_cast<int>(pi.size());
  const double n = t.counts.sum();
  EmRun run;
  double prev = -std::numeric_limits<double>::infinity();
  for (int it = 0; it < config.max_iter; ++it) {
    MatrixXd lj = pattern_loglik(t.patterns, log_table(probs), classes);
    lj.rowwise() += pi.array().log().matrix().transpose();
    VectorXd row_ll;
    const MatrixXd w = posterior(lj, row_ll);
    const double ll = t.counts.dot(row_ll);
    run.trace.push_back(ll);
    run.iterations = it + 1;
    if (std::isfinite(prev) && std::abs(ll - prev) <= config.rel_tol * std::abs(prev)) {
      run.converged = true;
      break;
    }
    prev = ll;
    const MatrixXd cw = w.array().colwise() * t.counts.array();
    pi = cw.colwise().sum().transpose() / n;
    for (std::size_t k = 0; k < probs.size(); ++k) {
      MatrixXd num = MatrixXd::Zero(categories[k], classes);
      for (Index r = 0; r < t.patterns.rows(); ++r) {
        const int y = t.patterns(r, static_cast<Index>(k));
        if (y != kMissingItem) num.row(y - 1) += cw.row(r);
      }
      for (int c = 0; c < classes; ++c) {
        const double total = num.col(c).sum();
        if (total > 1e-12) probs[k].col(c) = num.col(c) / total;
      }
    }
  }
  run.probs = std::move(probs);
  run.pi = std::move(pi);
  run.loglik = run.trace.empty() ? run.loglik : run.trace.back();
  return run;
}

}  // namespace

double lca_pattern_prob(const LcaMeasurement& m, const VectorXd& class_proportions, const Eigen::VectorXi& pattern) {
  if (pattern.size() != m.items()) throw InputError("pattern length does not match the item count");
  if (class_proportions.size() != m.classes) throw InputError("class proportions do not match the class count");
  const ProbabilityTable probs = m.probabilities();
  double total = 0.0;
  for (int c = 0; c < m.classes; ++c) {
    double prod = class_proportions(c);
    for (Index k = 0; k < m.items(); ++k) {
      const int y = pattern(k);
      if (y == kMissingItem) continue;
      if (y < 1 || y > m.categories[k])
        throw InputError("invalid code " + std::to_string(y) + " for item " + m.item_names[k]);
      prod *= probs[k](y - 1, c);
    }
    total += prod;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Label handling

std::vector<int> align_classes(const ProbabilityTable& estimated, const ProbabilityTable& reference) {
  if (estimated.size() != reference.size()) throw InputError("align_classes: item counts differ");
  const int classes = static_cast<int>(reference.front().cols());
  if (estimated.front().cols() != classes) throw InputError("align_classes: class counts differ");
  // cost(e, r) = sum over items and categories |est(., e) - ref(., r)|
  MatrixXd cost = MatrixXd::Zero(classes, classes);
  for (std::size_t k = 0; k < reference.size(); ++k)
    for (int e = 0; e < classes; ++e)
      for (int r = 0; r < classes; ++r) cost(e, r) += (estimated[k].col(e) - reference[k].col(r)).cwiseAbs().sum();

  std::vector<int> perm(classes);
  std::iota(perm.begin(), perm.end(), 0);
  if (classes > 8) {
    // Greedy assignment; exhaustive search is only practical for small C.
    std::vector<bool> used(classes, false);
    for (int r = 0; r < classes; ++r) {
      int best = -1;
      for (int e = 0; e < classes; ++e)
        if (!used[e] && (best < 0 || cost(e, r) < cost(best, r))) best = e;
      perm[r] = best;
      used[best] = true;
    }
    return perm;
  }
  std::vector<int> best = perm;
  double best_cost = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (int r = 0; r < classes; ++r) total += cost(perm[r], r);
    if (total < best_cost) {
      best_cost = total;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

std::vector<int> align_classes(const LcaMeasurement& estimated, const ProbabilityTable& reference) {
  return align_classes(estimated.probabilities(), reference);
}

ProbabilityTable permute_classes(const ProbabilityTable& probs, const std::vector<int>& perm) {
  ProbabilityTable out;
  for (const auto& p : probs) {
    MatrixXd q(p.rows(), p.cols());
    for (std::size_t c = 0; c < perm.size(); ++c) q.col(static_cast<Index>(c)) = p.col(perm[c]);
    out.push_back(std::move(q));
  }
  return out;
}

std::vector<int> canonical_class_order(const ProbabilityTable& probs) {
  const int classes = static_cast<int>(probs.front().cols());
  std::vector<int> order(classes);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    for (const auto& p : probs) {
      const double pa = p(p.rows() - 1, a);
      const double pb = p(p.rows() - 1, b);
      if (pa != pb) return pa > pb;
    }
    return false;
  });
  return order;
}

// ---------------------------------------------------------------------------
// Step 1

double lca_step1_loglik(const Dataset& data, const LcaMeasurement& m, const VectorXd& class_logits) {
  return step1_loglik(compress_patterns(data.items), m, class_logits);
}

LcaStep1Result lca_step1_em(const Dataset& data, int classes, const LcaStep1Config& config) {
  if (classes < 1) throw InputError("latent class count must be at least 1");
  if (data.p() == 0) throw InputError("latent class model needs at least one item");
  for (Index k = 0; k < data.p(); ++k) {
    std::vector<bool> seen(data.categories[k] + 1, false);
    int distinct = 0;
    for (Index i = 0; i < data.n(); ++i) {
      const int y = data.items(i, k);
      if (y != kMissingItem && !seen[y]) {
        seen[y] = true;
        ++distinct;
      }
    }
    if (distinct < 2) throw InputError("item " + data.item_names[k] + " has fewer than 2 observed categories");
  }
  const PatternTable table = compress_patterns(data.items);

  EmRun best;
  bool have_converged = false;
  const int starts = classes == 1 ? 1 : std::max(1, config.starts);
  for (int s = 0; s < starts; ++s) {
    RngStream rng(config.seed, static_cast<std::uint64_t>(s));
    ProbabilityTable probs;
    for (int h : data.categories) {
      MatrixXd p(h, classes);
      for (int c = 0; c < classes; ++c) {
        for (int l = 0; l < h; ++l) p(l, c) = rng.exponential();
        p.col(c) /= p.col(c).sum();
      }
      probs.push_back(std::move(p));
    }
    EmRun run = run_step1_em(table, data.categories, std::move(probs), VectorXd::Constant(classes, 1.0 / classes),
                             config);
    const bool better = run.converged ? (!have_converged || run.loglik > best.loglik)
                                      : (!have_converged && run.loglik > best.loglik);
    if (better) {
      have_converged = have_converged || run.converged;
      best = std::move(run);
    }
  }
  if (!have_converged)
    throw ConvergenceError("latent class EM did not converge in " + std::to_string(config.max_iter) +
                               " iterations from any start",
                           best.pi, best.loglik);

  std::vector<int> perm = config.reference ? align_classes(best.probs, *config.reference)
                                           : canonical_class_order(best.probs);
  ProbabilityTable probs = permute_classes(best.probs, perm);
  VectorXd pi(classes);
  for (int c = 0; c < classes; ++c) pi(c) = best.pi(perm[c]);

  LcaStep1Result r;
  r.raw_probabilities = probs;
  r.boundary = false;
  for (const auto& p : probs)
    if (p.minCoeff() < config.clamp || p.maxCoeff() > 1.0 - config.clamp) r.boundary = true;
  r.measurement = LcaMeasurement::from_probabilities(probs, data.item_names, config.clamp);
  r.class_proportions = pi;
  r.loglik = best.loglik;
  r.iterations = best.iterations;
  r.converged = best.converged;
  r.trace = std::move(best.trace);

  // Information over (tau, lambda, class logits); Sigma11 is the measurement block of its inverse.
  const Index d1 = r.measurement.free_size();
  VectorXd theta(d1 + classes - 1);
  theta.head(d1) = r.measurement.free_values();
  const VectorXd clamped_pi = pi.cwiseMax(config.clamp);
  for (int c = 1; c < classes; ++c) theta(d1 + c - 1) = std::log(clamped_pi(c) / clamped_pi(0));
  const LcaMeasurement shape = r.measurement;
  const MatrixXd info = numeric_information(
      [&](const VectorXd& x) {
        return step1_loglik(table, shape.with_free(x.head(d1)), x.tail(classes - 1));
      },
      theta);
  const MatrixXd inv = spd_inverse(info, "step-1 latent class information matrix");
  r.sigma11 = CovMatrix(inv.topLeftCorner(d1, d1), r.measurement.free_names());
  return r;
}

// ---------------------------------------------------------------------------
// Structural models

LcaStructuralModel::LcaStructuralModel(const Dataset& data, const LcaMeasurement& shape, LcaStructuralSpec spec)
    : spec_(std::move(spec)), shape_(shape) {
  if (shape_.items() != data.p()) throw InputError("measurement model and dataset have different item counts");
  std::vector<Index> zc, yc;
  if (spec_.form == LcaStructuralForm::covariate) {
    for (const auto& name : spec_.covariates) zc.push_back(data.covariate_index(name));
  } else {
    if (spec_.outcome.empty()) throw InputError("distal model needs an outcome column");
    yc.push_back(data.outcome_index(spec_.outcome));
  }
  rows_ = data.complete_rows(zc, yc);
  if (rows_.empty()) throw InputError("no units with complete structural data");
  const Index n2 = n_used();
  items_.resize(n2, data.p());
  design_.resize(n2, static_cast<Index>(zc.size()) + 1);
  outcome_.resize(yc.empty() ? 0 : n2);
  for (Index r = 0; r < n2; ++r) {
    const Index i = rows_[r];
    items_.row(r) = data.items.row(i);
    design_(r, 0) = 1.0;
    for (std::size_t j = 0; j < zc.size(); ++j) design_(r, static_cast<Index>(j) + 1) = data.covariates(i, zc[j]);
    if (!yc.empty()) outcome_(r) = data.outcomes(i, yc[0]);
  }
}

std::vector<std::string> LcaStructuralModel::structural_names() const {
  std::vector<std::string> names;
  const int classes = shape_.classes;
  if (spec_.form == LcaStructuralForm::covariate) {
    for (int c = 2; c <= classes; ++c) {
      names.push_back("beta0(" + std::to_string(c) + ")");
      for (const auto& z : spec_.covariates) names.push_back("beta(" + z + "," + std::to_string(c) + ")");
    }
  } else {
    for (int c = 2; c <= classes; ++c) names.push_back("alpha(" + std::to_string(c) + ")");
    names.push_back("beta0");
    for (int c = 2; c <= classes; ++c) names.push_back("beta1(" + std::to_string(c) + ")");
    names.push_back("sigma");
  }
  return names;
}

MatrixXd LcaStructuralModel::measurement_loglik(const VectorXd& theta1) const {
  return pattern_loglik(items_, log_table(shape_.with_free(theta1).probabilities()), shape_.classes);
}

MatrixXd LcaStructuralModel::class_log_prior(const VectorXd& theta2) const {
  const int classes = shape_.classes;
  const Index n2 = n_used();
  MatrixXd out(n2, classes);
  if (spec_.form == LcaStructuralForm::covariate) {
    const Index q1 = design_.cols();
    MatrixXd logits = MatrixXd::Zero(n2, classes);
    for (int c = 1; c < classes; ++c) logits.col(c) = design_ * theta2.segment((c - 1) * q1, q1);
    for (Index i = 0; i < n2; ++i) out.row(i) = logits.row(i).array() - log_sum_exp(logits.row(i));
    return out;
  }
  VectorXd alpha(classes);
  alpha(0) = 0.0;
  alpha.tail(classes - 1) = theta2.head(classes - 1);
  const VectorXd log_pi = alpha.array() - log_sum_exp(alpha);
  const double beta0 = theta2(classes - 1);
  const double sigma = theta2(theta2.size() - 1);
  if (!(sigma > 0)) return MatrixXd::Constant(n2, classes, -std::numeric_limits<double>::infinity());
  const double log_norm = -std::log(sigma) - 0.5 * std::log(2.0 * M_PI);
  for (int c = 0; c < classes; ++c) {
    const double mu = beta0 + (c > 0 ? theta2(classes - 1 + c) : 0.0);
    out.col(c) = (log_pi(c) + log_norm - 0.5 * ((outcome_.array() - mu) / sigma).square()).matrix();
  }
  return out;
}

double LcaStructuralModel::loglik_given(const MatrixXd& log_meas, const VectorXd& theta2) const {
  const MatrixXd lj = class_log_prior(theta2) + log_meas;
  double ll = 0.0;
  for (Index i = 0; i < lj.rows(); ++i) ll += log_sum_exp(lj.row(i));
  return ll;
}

double LcaStructuralModel::loglik(const VectorXd& theta1, const VectorXd& theta2) const {
  return loglik_given(measurement_loglik(theta1), theta2);
}

namespace {

// Newton step for the multinomial logit part of the M-step: maximizes
// sum_i sum_c w_ic log softmax_c(x_i B) from the current B, with step halving.
void multinomial_mstep(const MatrixXd& design, const MatrixXd& w, VectorXd& theta2, int classes) {
  const Index q1 = design.cols();
  const Index d = theta2.size();
  auto q_value = [&](const VectorXd& t, MatrixXd* pi_out) {
    MatrixXd logits = MatrixXd::Zero(design.rows(), classes);
    for (int c = 1; c < classes; ++c) logits.col(c) = design * t.segment((c - 1) * q1, q1);
    double q = 0.0;
    if (pi_out) pi_out->resize(design.rows(), classes);
    for (Index i = 0; i < design.rows(); ++i) {
      const double lse = log_sum_exp(logits.row(i));
      q += w.row(i).dot((logits.row(i).array() - lse).matrix());
      if (pi_out) pi_out->row(i) = (logits.row(i).array() - lse).exp().matrix();
    }
    return q;
  };
  MatrixXd pi;
  const double q0 = q_value(theta2, &pi);
  VectorXd g = VectorXd::Zero(d);
  MatrixXd h = MatrixXd::Zero(d, d);
  for (Index i = 0; i < design.rows(); ++i) {
    const Eigen::RowVectorXd x = design.row(i);
    for (int c = 1; c < classes; ++c) {
      g.segment((c - 1) * q1, q1) += (w(i, c) - pi(i, c)) * x.transpose();
      for (int e = 1; e < classes; ++e) {
        const double v = (c == e ? pi(i, c) : 0.0) - pi(i, c) * pi(i, e);
        h.block((c - 1) * q1, (e - 1) * q1, q1, q1).noalias() += v * x.transpose() * x;
      }
    }
  }
  if (g.lpNorm<Eigen::Infinity>() == 0.0) return;
  const VectorXd step = h.ldlt().solve(g);
  double t = 1.0;
  for (int k = 0; k < 40; ++k) {
    const VectorXd trial = theta2 + t * step;
    if (step.allFinite() && q_value(trial, nullptr) >= q0) {
      theta2 = trial;
      return;
    }
    t *= 0.5;
  }
}

// Closed-form M-step of the distal outcome model.
void distal_mstep(const VectorXd& y, const MatrixXd& w, VectorXd& theta2, int classes, double sigma_floor) {
  const VectorXd mass = w.colwise().sum().transpose();
  const double n = static_cast<double>(y.size());
  VectorXd mu(classes);
  for (int c = 0; c < classes; ++c) mu(c) = mass(c) > 0 ? w.col(c).dot(y) / mass(c) : theta2(classes - 1);
  double ss = 0.0;
  for (int c = 0; c < classes; ++c) ss += w.col(c).dot(((y.array() - mu(c)).square()).matrix());
  const VectorXd pi = (mass / n).cwiseMax(1e-300);
  for (int c = 1; c < classes; ++c) theta2(c - 1) = std::log(pi(c) / pi(0));
  theta2(classes - 1) = mu(0);
  for (int c = 1; c < classes; ++c) theta2(classes - 1 + c) = mu(c) - mu(0);
  theta2(theta2.size() - 1) = std::max(std::sqrt(ss / n), sigma_floor);
}

}  // namespace

VectorXd LcaStructuralModel::score(const MatrixXd& log_meas, const VectorXd& theta2) const {
  const int classes = shape_.classes;
  const MatrixXd prior = class_log_prior(theta2);
  VectorXd row_ll;
  const MatrixXd w = posterior(prior + log_meas, row_ll);
  VectorXd g = VectorXd::Zero(theta2.size());
  if (spec_.form == LcaStructuralForm::covariate) {
    const Index q1 = design_.cols();
    const MatrixXd pi = prior.array().exp().matrix();
    for (int c = 1; c < classes; ++c)
      g.segment((c - 1) * q1, q1) = design_.transpose() * (w.col(c) - pi.col(c));
    return g;
  }
  VectorXd alpha(classes);
  alpha(0) = 0.0;
  alpha.tail(classes - 1) = theta2.head(classes - 1);
  const VectorXd pi = softmax(alpha);
  const double n = static_cast<double>(n_used());
  const double sigma = theta2(theta2.size() - 1);
  const double beta0 = theta2(classes - 1);
  const VectorXd mass = w.colwise().sum().transpose();
  for (int c = 1; c < classes; ++c) g(c - 1) = mass(c) - n * pi(c);
  double g_sigma = 0.0;
  for (int c = 0; c < classes; ++c) {
    const double mu = beta0 + (c > 0 ? theta2(classes - 1 + c) : 0.0);
    const VectorXd r = outcome_.array() - mu;
    const double gm = w.col(c).dot(r) / (sigma * sigma);
    g(classes - 1) += gm;
    if (c > 0) g(classes - 1 + c) = gm;
    g_sigma += w.col(c).dot((r.array().square() / (sigma * sigma * sigma) - 1.0 / sigma).matrix());
  }
  g(g.size() - 1) = g_sigma;
  return g;
}

bool LcaStructuralModel::em_step(const MatrixXd& log_meas, VectorXd& theta2, const LcaStep2Config& config) const {
  VectorXd row_ll;
  const MatrixXd w = posterior(class_log_prior(theta2) + log_meas, row_ll);
  if (spec_.form == LcaStructuralForm::covariate)
    multinomial_mstep(design_, w, theta2, shape_.classes);
  else
    distal_mstep(outcome_, w, theta2, shape_.classes, config.sigma_floor);
  return theta2.allFinite();
}

namespace {

void check_divergence(const VectorXd& theta2, const std::vector<std::string>& names, double bound, bool skip_last) {
  const Index last = skip_last ? theta2.size() - 1 : theta2.size();
  for (Index j = 0; j < last; ++j) {
    if (!(std::abs(theta2(j)) <= bound))
      throw ConvergenceError("step-2 estimate of " + names[j] + " diverged (|value| > " + std::to_string(bound) + ")",
                             theta2);
  }
}

}  // namespace

LcaStep2Result LcaStructuralModel::fit(const VectorXd& theta1, const std::optional<VectorXd>& start,
                                       const LcaStep2Config& config, bool with_variance) const {
  const int classes = shape_.classes;
  const auto names = structural_names();
  const Index d2 = static_cast<Index>(names.size());
  const MatrixXd log_meas = measurement_loglik(theta1);
  VectorXd theta2;
  if (start) {
    if (start->size() != d2) throw InputError("structural start vector has the wrong length");
    theta2 = *start;
  } else {
    theta2 = VectorXd::Zero(d2);
    if (spec_.form == LcaStructuralForm::distal) {
      const double mean = outcome_.mean();
      theta2(classes - 1) = mean;
      theta2(d2 - 1) = std::max(std::sqrt((outcome_.array() - mean).square().mean()), config.sigma_floor);
    }
  }
  const bool distal = spec_.form == LcaStructuralForm::distal;
  const double n = static_cast<double>(n_used());

  LcaStep2Result r;
  r.n_used = n_used();
  for (r.iterations = 0; r.iterations < config.max_iter; ++r.iterations) {
    if (score(log_meas, theta2).lpNorm<Eigen::Infinity>() <= config.grad_tol * n) {
      r.converged = true;
      break;
    }
    if (!em_step(log_meas, theta2, config)) throw ConvergenceError("step-2 EM produced non-finite estimates");
    check_divergence(theta2, names, config.divergence_bound, distal);
  }
  if (!r.converged) {
    // Slow EM: finish with quasi-Newton on the exact log-likelihood.
    BfgsOptions opts;
    opts.grad_tol = 1e-10;
    const BfgsResult polished =
        bfgs_maximize([&](const VectorXd& t) { return loglik_given(log_meas, t); }, theta2, opts);
    theta2 = polished.x;
    r.converged = score(log_meas, theta2).lpNorm<Eigen::Infinity>() <= 10 * config.grad_tol * n;
    if (!r.converged)
      throw ConvergenceError("step-2 latent class fit did not converge", theta2, loglik_given(log_meas, theta2));
  }
  check_divergence(theta2, names, config.divergence_bound, distal);
  r.loglik = loglik_given(log_meas, theta2);
  r.theta2 = ParamVector(theta2, names);
  if (with_variance) {
    const MatrixXd info =
        numeric_information([&](const VectorXd& t) { return loglik_given(log_meas, t); }, theta2);
    r.v2 = CovMatrix(spd_inverse(info, "step-2 information matrix"), names);
  }
  return r;
}

LcaStructuralModel::JointFit LcaStructuralModel::fit_joint(const VectorXd& theta1_start, const VectorXd& theta2_start,
                                                           const LcaStep2Config& config, double clamp) const {
  const int classes = shape_.classes;
  const bool distal = spec_.form == LcaStructuralForm::distal;
  JointFit f;
  f.theta1 = theta1_start;
  f.theta2 = theta2_start;
  double prev = -std::numeric_limits<double>::infinity();
  int quiet = 0;
  for (f.iterations = 0; f.iterations < config.max_iter; ++f.iterations) {
    const MatrixXd log_meas = measurement_loglik(f.theta1);
    VectorXd row_ll;
    const MatrixXd w = posterior(class_log_prior(f.theta2) + log_meas, row_ll);
    f.loglik = row_ll.sum();
    quiet = (std::abs(f.loglik - prev) <= 1e-12 * std::abs(f.loglik)) ? quiet + 1 : 0;
    if (quiet >= 3) {
      f.converged = true;
      break;
    }
    prev = f.loglik;
    ProbabilityTable probs;
    for (Index k = 0; k < shape_.items(); ++k) {
      MatrixXd num = MatrixXd::Constant(shape_.categories[k], classes, 0.0);
      for (Index i = 0; i < items_.rows(); ++i) {
        const int y = items_(i, k);
        if (y != kMissingItem) num.row(y - 1) += w.row(i);
      }
      for (int c = 0; c < classes; ++c) num.col(c) /= std::max(num.col(c).sum(), 1e-300);
      probs.push_back(std::move(num));
    }
    f.theta1 = LcaMeasurement::from_probabilities(probs, shape_.item_names, clamp).free_values();
    if (distal)
      distal_mstep(outcome_, w, f.theta2, classes, config.sigma_floor);
    else
      multinomial_mstep(design_, w, f.theta2, classes);
    if (!f.theta2.allFinite()) throw ConvergenceError("one-step EM produced non-finite estimates");
  }
  check_divergence(f.theta2, structural_names(), config.divergence_bound, distal);
  f.loglik = loglik(f.theta1, f.theta2);
  return f;
}

LcaStep2Result lca_step2(const Dataset& data, const LcaMeasurement& m_fixed, const LcaStructuralSpec& spec,
                         const LcaStep2Config& config) {
  const LcaStructuralModel model(data, m_fixed, spec);
  return model.fit(m_fixed.free_values(), std::nullopt, config);
}

LcaStep2Result lca_step2_covariate(const Dataset& data, const LcaMeasurement& m_fixed,
                                   const std::vector<std::string>& covariates, const LcaStep2Config& config) {
  return lca_step2(data, m_fixed, {LcaStructuralForm::covariate, covariates, {}}, config);
}

LcaStep2Result lca_step2_distal(const Dataset& data, const LcaMeasurement& m_fixed, const std::string& outcome,
                                const LcaStep2Config& config) {
  return lca_step2(data, m_fixed, {LcaStructuralForm::distal, {}, outcome}, config);
}

LcaTwoStepProblem::LcaTwoStepProblem(const Dataset& data, const LcaMeasurement& measurement, LcaStructuralSpec spec,
                                     VectorXd theta2_hat, LcaStep2Config config)
    : model_(data, measurement, std::move(spec)), theta2_hat_(std::move(theta2_hat)), config_(config) {}

std::optional<VectorXd> LcaTwoStepProblem::refit(const VectorXd& theta1) const {
  try {
    LcaStep2Result r = model_.fit(theta1, theta2_hat_, config_, false);
    if (!r.converged) return std::nullopt;
    return r.theta2.values();
  } catch (const ConvergenceError&) {
    return std::nullopt;
  } catch (const NumericalError&) {
    return std::nullopt;
  }
}

LcaOneStepResult lca_onestep(const Dataset& data, const LcaMeasurement& measurement_start,
                             const LcaStructuralSpec& spec, const VectorXd& theta2_start,
                             const LcaOneStepConfig& config) {
  const LcaStructuralModel model(data, measurement_start, spec);
  const VectorXd theta1_start = measurement_start.free_values();
  const Index d1 = theta1_start.size();
  const bool distal = spec.form == LcaStructuralForm::distal;

  std::optional<LcaStructuralModel::JointFit> best;
  for (int s = 0; s < std::max(1, config.starts); ++s) {
    VectorXd t1 = theta1_start;
    VectorXd t2 = theta2_start;
    if (s > 0) {
      RngStream rng(config.seed, static_cast<std::uint64_t>(s));
      for (Index j = 0; j < t1.size(); ++j) t1(j) += config.jitter * rng.normal();
      for (Index j = 0; j < t2.size(); ++j) {
        if (distal && j == t2.size() - 1)
          t2(j) *= std::exp(0.5 * config.jitter * rng.normal());
        else
          t2(j) += config.jitter * rng.normal();
      }
    }
    try {
      auto fit = model.fit_joint(t1, t2, config.step2);
      if (!best || (fit.converged && !best->converged) ||
          (fit.converged == best->converged && fit.loglik > best->loglik))
        best = std::move(fit);
    } catch (const ConvergenceError&) {
    }
  }
  if (!best) throw ConvergenceError("one-step latent class estimation failed from every start");

  std::vector<std::string> names = measurement_start.free_names();
  const auto structural = model.structural_names();
  names.insert(names.end(), structural.begin(), structural.end());
  VectorXd theta(d1 + best->theta2.size());
  theta << best->theta1, best->theta2;

  LcaOneStepResult r;
  r.theta = ParamVector(theta, names);
  r.loglik = best->loglik;
  r.converged = best->converged;
  r.measurement_size = d1;
  const MatrixXd info = numeric_information(
      [&](const VectorXd& x) { return model.loglik(x.head(d1), x.tail(x.size() - d1)); }, theta);
  r.covariance = CovMatrix(spd_inverse(info, "one-step information matrix"), names);
  return r;
}

}  // namespace twostep
