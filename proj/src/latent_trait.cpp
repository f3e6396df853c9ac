#include "twostep/latent_trait.hpp"

#include "twostep/linalg.hpp"
#include "twostep/numdiff.hpp"
#include "twostep/quadrature.hpp"

#include <cmath>
#include <map>
#include <set>

namespace twostep {

double irt_item_prob(double tau, double lambda, double eta) { return logistic(tau + lambda * eta); }

std::vector<std::string> IrtBlock::free_names() const {
  std::vector<std::string> names;
  for (const auto& item : item_names) {
    names.push_back("tau(" + item + ")");
    names.push_back("lambda(" + item + ")");
  }
  return names;
}

VectorXd IrtBlock::free_values() const {
  VectorXd v(2 * items());
  for (Index k = 0; k < items(); ++k) {
    v(2 * k) = tau(k);
    v(2 * k + 1) = lambda(k);
  }
  return v;
}

void IrtBlock::set_free(const Eigen::Ref<const VectorXd>& values) {
  if (values.size() != 2 * items()) throw InputError("measurement block " + trait + " has the wrong length");
  for (Index k = 0; k < items(); ++k) {
    tau(k) = values(2 * k);
    lambda(k) = values(2 * k + 1);
  }
}

Index IrtMeasurement::free_size() const {
  Index d = 0;
  for (const auto& b : blocks) d += 2 * b.items();
  return d;
}

std::vector<std::string> IrtMeasurement::free_names() const {
  std::vector<std::string> names;
  for (const auto& b : blocks) {
    auto n = b.free_names();
    names.insert(names.end(), n.begin(), n.end());
  }
  return names;
}

VectorXd IrtMeasurement::free_values() const {
  VectorXd v(free_size());
  Index at = 0;
  for (const auto& b : blocks) {
    v.segment(at, 2 * b.items()) = b.free_values();
    at += 2 * b.items();
  }
  return v;
}

void IrtMeasurement::set_free(const Eigen::Ref<const VectorXd>& values) {
  if (values.size() != free_size())
    throw InputError("measurement vector has length " + std::to_string(values.size()) + ", expected " +
                     std::to_string(free_size()));
  Index at = 0;
  for (auto& b : blocks) {
    b.set_free(values.segment(at, 2 * b.items()));
    at += 2 * b.items();
  }
}

IrtMeasurement IrtMeasurement::with_free(const Eigen::Ref<const VectorXd>& values) const {
  IrtMeasurement m = *this;
  m.set_free(values);
  return m;
}

const IrtBlock& IrtMeasurement::block(const std::string& trait) const {
  for (const auto& b : blocks)
    if (b.trait == trait) return b;
  throw InputError("no measurement block for trait " + trait);
}

namespace {

// Rows: response patterns; columns: trait values. Entry = log P(pattern | eta).
// Item log-probabilities summed per pattern, laid out eta x patterns.
MatrixXd block_loglik_t(const Eigen::MatrixXi& patterns, const VectorXd& tau, const VectorXd& lambda,
                        const VectorXd& eta) {
  MatrixXd out = MatrixXd::Zero(eta.size(), patterns.rows());
  VectorXd lp1(eta.size()), lp0(eta.size());
  for (Index k = 0; k < tau.size(); ++k) {
    for (Index e = 0; e < eta.size(); ++e) {
      const double z = tau(k) + lambda(k) * eta(e);
      lp1(e) = -log1p_exp(-z);
      lp0(e) = lp1(e) - z;
    }
    for (Index r = 0; r < patterns.rows(); ++r) {
      const int y = patterns(r, k);
      if (y == kIrtYes)
        out.col(r) += lp1;
      else if (y == kIrtNo)
        out.col(r) += lp0;
    }
  }
  return out;
}

MatrixXd block_loglik(const Eigen::MatrixXi& patterns, const VectorXd& tau, const VectorXd& lambda,
                      const VectorXd& eta) {
  return block_loglik_t(patterns, tau, lambda, eta).transpose();
}

// Per-row marginal log-likelihood under N(mu, sigma2).
VectorXd marginal_rows(const Eigen::MatrixXi& patterns, const VectorXd& tau, const VectorXd& lambda, double mu,
                       double sigma2, const GaussHermite& gh) {
  const VectorXd eta = (mu + std::sqrt(sigma2) * gh.nodes.array()).matrix();
  MatrixXd l = block_loglik(patterns, tau, lambda, eta);
  l.rowwise() += gh.log_weights.transpose();
  VectorXd out(l.rows());
  for (Index r = 0; r < l.rows(); ++r) out(r) = log_sum_exp(l.row(r));
  return out;
}

struct Patterns {
  Eigen::MatrixXi rows;
  VectorXd counts;
  std::vector<Index> index_of_unit;
};

Patterns compress(const Eigen::MatrixXi& items) {
  std::map<std::vector<int>, Index> seen;
  std::vector<std::vector<int>> order;
  std::vector<double> counts;
  Patterns p;
  p.index_of_unit.resize(items.rows());
  std::vector<int> row(items.cols());
  for (Index i = 0; i < items.rows(); ++i) {
    for (Index k = 0; k < items.cols(); ++k) row[k] = items(i, k);
    auto [it, fresh] = seen.emplace(row, static_cast<Index>(order.size()));
    if (fresh) {
      order.push_back(row);
      counts.push_back(0.0);
    }
    counts[it->second] += 1.0;
    p.index_of_unit[i] = it->second;
  }
  p.rows.resize(static_cast<Index>(order.size()), items.cols());
  for (std::size_t r = 0; r < order.size(); ++r)
    for (Index k = 0; k < items.cols(); ++k) p.rows(static_cast<Index>(r), k) = order[r][k];
  p.counts = Eigen::Map<VectorXd>(counts.data(), static_cast<Index>(counts.size()));
  return p;
}

Eigen::MatrixXi block_items(const Dataset& data, const std::vector<Index>& columns, const std::vector<Index>& rows) {
  Eigen::MatrixXi out(static_cast<Index>(rows.size()), static_cast<Index>(columns.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t k = 0; k < columns.size(); ++k)
      out(static_cast<Index>(r), static_cast<Index>(k)) = data.items(rows[r], columns[k]);
  return out;
}

void check_binary(const Dataset& data, Index column) {
  bool yes = false, no = false;
  for (Index i = 0; i < data.n(); ++i) {
    const int y = data.items(i, column);
    if (y == kIrtYes) yes = true;
    else if (y == kIrtNo) no = true;
    else if (y != kMissingItem)
      throw InputError("item " + data.item_names[column] + " is not binary (code " + std::to_string(y) + ")");
  }
  if (!(yes && no)) throw InputError("item " + data.item_names[column] + " does not have both responses observed");
}

}  // namespace

double gh_marginal_loglik(const Eigen::MatrixXi& items, const VectorXd& tau, const VectorXd& lambda, double mu,
                          double sigma2, int nodes) {
  if (nodes < 2) throw InputError("quadrature needs at least 2 nodes");
  if (!(sigma2 > 0)) throw InputError("trait variance must be positive");
  if (items.cols() != tau.size() || tau.size() != lambda.size()) throw InputError("item parameter lengths differ");
  return marginal_rows(items, tau, lambda, mu, sigma2, gauss_hermite(nodes)).sum();
}

// ---------------------------------------------------------------------------
// Step 1

IrtStep1Result irt_step1_fit(const Dataset& data, const std::string& trait, const IrtStep1Config& config) {
  const ItemBlock& block = data.block(trait);
  if (block.items.size() < 2) throw InputError("trait " + trait + " needs at least 2 items");
  for (Index k : block.items) check_binary(data, k);
  std::vector<Index> all(data.n());
  for (Index i = 0; i < data.n(); ++i) all[i] = i;
  const Patterns pat = compress(block_items(data, block.items, all));
  const GaussHermite& gh = gauss_hermite(config.nodes);
  const Index p = static_cast<Index>(block.items.size());

  auto objective = [&](const VectorXd& x) {
    VectorXd tau(p), lambda(p);
    for (Index k = 0; k < p; ++k) {
      tau(k) = x(2 * k);
      lambda(k) = x(2 * k + 1);
    }
    return pat.counts.dot(marginal_rows(pat.rows, tau, lambda, 0.0, 1.0, gh));
  };

  VectorXd x0(2 * p);
  for (Index k = 0; k < p; ++k) {
    double yes = 0, seen = 0;
    for (Index i = 0; i < data.n(); ++i) {
      const int y = data.items(i, block.items[k]);
      if (y != kMissingItem) {
        seen += 1;
        yes += (y == kIrtYes);
      }
    }
    const double q = yes / seen;
    x0(2 * k) = std::log(q / (1 - q));
    x0(2 * k + 1) = 1.0;
  }
  const BfgsResult opt = bfgs_maximize(objective, x0, config.bfgs);
  if (!opt.converged)
    throw ConvergenceError("step-1 fit of trait " + trait + " did not converge", opt.x, opt.value);

  IrtStep1Result r;
  r.block.trait = trait;
  for (Index k : block.items) r.block.item_names.push_back(data.item_names[k]);
  r.block.tau.resize(p);
  r.block.lambda.resize(p);
  r.block.set_free(opt.x);
  if (r.block.lambda(0) < 0) r.block.lambda = -r.block.lambda;
  for (Index k = 0; k < p; ++k) {
    if (!(std::abs(r.block.lambda(k)) <= config.lambda_bound))
      throw ConvergenceError("loading of " + r.block.item_names[k] + " exceeds " + std::to_string(config.lambda_bound) +
                                 " in absolute value (quasi-complete separation)",
                             opt.x, opt.value);
  }
  const VectorXd x = r.block.free_values();
  r.loglik = objective(x);
  r.iterations = opt.iterations;
  r.converged = true;
  r.gradient = numeric_gradient(objective, x);
  r.sigma11 = CovMatrix(spd_inverse(numeric_information(objective, x), "step-1 trait information matrix"),
                        r.block.free_names());
  return r;
}

IrtStep1Fit irt_step1_fit_all(const Dataset& data, const std::vector<std::string>& traits,
                              const IrtStep1Config& config) {
  IrtStep1Fit fit;
  std::vector<CovMatrix> covs;
  for (const auto& t : traits) {
    fit.blocks.push_back(irt_step1_fit(data, t, config));
    fit.measurement.blocks.push_back(fit.blocks.back().block);
    covs.push_back(fit.blocks.back().sigma11);
  }
  fit.sigma11 = assemble_sigma11(covs);
  return fit;
}

// ---------------------------------------------------------------------------
// Structural model

TraitStructuralModel::TraitStructuralModel(const Dataset& data, const IrtMeasurement& shape, TraitStructuralSpec spec,
                                           int nodes, bool force_per_unit)
    : spec_(std::move(spec)), shape_(shape), nodes_(nodes) {
  const Index traits = static_cast<Index>(shape_.blocks.size());
  if (traits < 1 || traits > 2) throw InputError("trait structural models support one or two traits");
  if (nodes_ < 2) throw InputError("quadrature needs at least 2 nodes");
  auto trait_index = [&](const std::string& name) {
    for (Index j = 0; j < traits; ++j)
      if (shape_.blocks[j].trait == name) return j;
    throw InputError("unknown trait " + name + " in structural specification");
  };
  for (const auto& b : shape_.blocks) {
    std::vector<Index> cols;
    for (const auto& item : b.item_names) {
      const Index c = data.item_index(item);
      check_binary(data, c);
      cols.push_back(c);
    }
    item_columns_.push_back(std::move(cols));
  }

  // Covariate columns of the design, in order of first mention.
  std::vector<Index> covariate_cols;
  auto design_col = [&](const std::string& name) {
    const Index c = data.covariate_index(name);
    for (std::size_t j = 0; j < covariate_cols.size(); ++j)
      if (covariate_cols[j] == c) return static_cast<Index>(j);
    covariate_cols.push_back(c);
    return static_cast<Index>(covariate_cols.size() - 1);
  };

  std::vector<Equation> by_trait(traits);
  for (Index j = 0; j < traits; ++j) by_trait[j].trait = j;
  std::set<Index> declared;
  for (const auto& e : spec_.equations) {
    const Index j = trait_index(e.trait);
    if (!declared.insert(j).second) throw InputError("trait " + e.trait + " has more than one equation");
    Equation& q = by_trait[j];
    q.endogenous = true;
    q.intercept = dim_++;
    names_.push_back(e.trait + "~1");
    q.slopes = dim_;
    for (const auto& z : e.covariates) {
      q.covariates.push_back(design_col(z));
      names_.push_back(e.trait + "~" + z);
      ++dim_;
    }
    if (e.traits.size() > 1) throw InputError("trait " + e.trait + " regresses on more than one trait");
    for (const auto& t : e.traits) {
      if (trait_index(t) == j) throw InputError("trait " + e.trait + " cannot regress on itself");
      q.trait_slope = dim_++;
      names_.push_back(e.trait + "~" + t);
    }
    q.variance = dim_++;
    names_.push_back(e.trait + "~~" + e.trait);
    variance_slots_.push_back(q.variance);
  }
  if (traits == 2 && by_trait[0].trait_slope >= 0 && by_trait[1].trait_slope >= 0)
    throw InputError("trait equations are cyclic");
  const Index first = (traits == 2 && by_trait[0].trait_slope >= 0) ? 1 : 0;
  eq_.push_back(by_trait[first]);
  if (traits == 2) eq_.push_back(by_trait[1 - first]);
  if (traits == 2 && spec_.residual_correlation && eq_[0].endogenous && eq_[1].endogenous && eq_[1].trait_slope < 0) {
    rho_ = dim_++;
    names_.push_back(spec_.equations[0].trait + "~~" + spec_.equations[1].trait);
  }
  if (dim_ == 0) throw InputError("structural specification has no free parameters");

  rows_ = data.complete_rows(covariate_cols, {});
  if (rows_.empty()) throw InputError("no units with complete covariates for step 2");
  design_.resize(n_used(), static_cast<Index>(covariate_cols.size()));
  for (Index r = 0; r < n_used(); ++r)
    for (std::size_t c = 0; c < covariate_cols.size(); ++c)
      design_(r, static_cast<Index>(c)) = data.covariates(rows_[r], covariate_cols[c]);

  shared_ = covariate_cols.empty() && !force_per_unit;
  for (Index j = 0; j < traits; ++j) items_.push_back(block_items(data, item_columns_[j], rows_));
  if (shared_) {
    std::vector<Patterns> per_block;
    for (Index j = 0; j < traits; ++j) per_block.push_back(compress(items_[j]));
    std::map<std::vector<Index>, Index> groups;
    std::vector<std::vector<Index>> keys;
    std::vector<double> counts;
    std::vector<Index> key(traits);
    for (Index i = 0; i < n_used(); ++i) {
      for (Index j = 0; j < traits; ++j) key[j] = per_block[j].index_of_unit[i];
      auto [it, fresh] = groups.emplace(key, static_cast<Index>(keys.size()));
      if (fresh) {
        keys.push_back(key);
        counts.push_back(0.0);
      }
      counts[it->second] += 1.0;
    }
    group_index_.resize(static_cast<Index>(keys.size()), traits);
    for (std::size_t g = 0; g < keys.size(); ++g)
      for (Index j = 0; j < traits; ++j) group_index_(static_cast<Index>(g), j) = static_cast<int>(keys[g][j]);
    group_count_ = Eigen::Map<VectorXd>(counts.data(), static_cast<Index>(counts.size()));
    for (auto& p : per_block) block_patterns_.push_back(std::move(p.rows));
  }
}

std::vector<std::string> TraitStructuralModel::structural_names() const { return names_; }

TraitStructuralModel::Moments TraitStructuralModel::moments(const VectorXd& theta2) const {
  const Index units = shared_ ? 1 : n_used();
  auto conditional_mean = [&](const Equation& q) {
    VectorXd m = VectorXd::Zero(units);
    if (!q.endogenous) return m;
    m.setConstant(theta2(q.intercept));
    for (std::size_t c = 0; c < q.covariates.size(); ++c)
      m += theta2(q.slopes + static_cast<Index>(c)) * design_.col(q.covariates[c]).head(units);
    return m;
  };
  Moments mo;
  mo.mean_first = conditional_mean(eq_[0]);
  mo.var_first = eq_[0].endogenous ? theta2(eq_[0].variance) : 1.0;
  if (eq_.size() == 2) {
    mo.base_second = conditional_mean(eq_[1]);
    const double v = eq_[1].endogenous ? theta2(eq_[1].variance) : 1.0;
    mo.var_second = v;
    if (eq_[1].trait_slope >= 0) {
      mo.slope = theta2(eq_[1].trait_slope);
    } else if (rho_ >= 0) {
      const double r = theta2(rho_);
      mo.slope = r * std::sqrt(v / mo.var_first);
      mo.base_second -= mo.slope * mo.mean_first;
      mo.var_second = v * (1 - r * r);
    }
  }
  return mo;
}

double TraitStructuralModel::loglik_shared(const IrtMeasurement& m, const Moments& mo) const {
  const GaussHermite& gh = gauss_hermite(nodes_);
  const Index q = gh.order();
  const Index f = eq_[0].trait;
  const VectorXd eta_first = (mo.mean_first(0) + std::sqrt(mo.var_first) * gh.nodes.array()).matrix();
  MatrixXd lf = block_loglik(block_patterns_[f], m.blocks[f].tau, m.blocks[f].lambda, eta_first);
  lf.rowwise() += gh.log_weights.transpose();

  MatrixXd inner;  // distinct second-block patterns x first-trait nodes
  if (eq_.size() == 2) {
    const Index s = eq_[1].trait;
    VectorXd eta(q * q);
    const double sd = std::sqrt(mo.var_second);
    for (Index a = 0; a < q; ++a)
      eta.segment(a * q, q) = (mo.base_second(0) + mo.slope * eta_first(a) + sd * gh.nodes.array()).matrix();
    MatrixXd ls = block_loglik_t(block_patterns_[s], m.blocks[s].tau, m.blocks[s].lambda, eta);
    inner.resize(ls.cols(), q);
    for (Index r = 0; r < ls.cols(); ++r)
      for (Index a = 0; a < q; ++a) {
        auto seg = ls.col(r).segment(a * q, q);
        seg += gh.log_weights;
        inner(r, a) = log_sum_exp(seg);
      }
  }
  double total = 0.0;
  for (Index g = 0; g < group_index_.rows(); ++g) {
    Eigen::RowVectorXd terms = lf.row(group_index_(g, f));
    if (eq_.size() == 2) terms += inner.row(group_index_(g, eq_[1].trait));
    total += group_count_(g) * log_sum_exp(terms);
  }
  return total;
}

double TraitStructuralModel::loglik_per_unit(const IrtMeasurement& m, const Moments& mo) const {
  const GaussHermite& gh = gauss_hermite(nodes_);
  const Index q = gh.order();
  const Index f = eq_[0].trait;
  const double sd_first = std::sqrt(mo.var_first);
  const double sd_second = std::sqrt(mo.var_second);
  VectorXd eta_first(q), eta(q * q);
  double total = 0.0;
  for (Index i = 0; i < n_used(); ++i) {
    eta_first = (mo.mean_first(i) + sd_first * gh.nodes.array()).matrix();
    Eigen::RowVectorXd terms =
        block_loglik(items_[f].row(i), m.blocks[f].tau, m.blocks[f].lambda, eta_first).row(0) +
        gh.log_weights.transpose();
    if (eq_.size() == 2) {
      const Index s = eq_[1].trait;
      for (Index a = 0; a < q; ++a)
        eta.segment(a * q, q) = (mo.base_second(i) + mo.slope * eta_first(a) + sd_second * gh.nodes.array()).matrix();
      const Eigen::RowVectorXd ls = block_loglik(items_[s].row(i), m.blocks[s].tau, m.blocks[s].lambda, eta).row(0);
      for (Index a = 0; a < q; ++a) terms(a) += log_sum_exp((ls.segment(a * q, q) + gh.log_weights.transpose()).eval());
    }
    total += log_sum_exp(terms);
  }
  return total;
}

double TraitStructuralModel::loglik(const VectorXd& theta1, const VectorXd& theta2) const {
  if (theta2.size() != dim_) throw InputError("structural vector has the wrong length");
  for (Index v : variance_slots_)
    if (!(theta2(v) > 0)) return -std::numeric_limits<double>::infinity();
  if (rho_ >= 0 && !(std::abs(theta2(rho_)) < 1)) return -std::numeric_limits<double>::infinity();
  const IrtMeasurement m = shape_.with_free(theta1);
  const Moments mo = moments(theta2);
  return shared_ ? loglik_shared(m, mo) : loglik_per_unit(m, mo);
}

VectorXd TraitStructuralModel::to_working(const VectorXd& theta2) const {
  VectorXd w = theta2;
  for (Index v : variance_slots_) w(v) = std::log(theta2(v));
  if (rho_ >= 0) w(rho_) = std::atanh(theta2(rho_));
  return w;
}

VectorXd TraitStructuralModel::from_working(const VectorXd& working) const {
  VectorXd t = working;
  for (Index v : variance_slots_) t(v) = std::exp(working(v));
  if (rho_ >= 0) t(rho_) = std::tanh(working(rho_));
  return t;
}

VectorXd TraitStructuralModel::default_start() const {
  VectorXd t = VectorXd::Zero(dim_);
  for (Index v : variance_slots_) t(v) = 1.0;
  return t;
}

TraitStep2Result TraitStructuralModel::fit(const VectorXd& theta1, const std::optional<VectorXd>& start,
                                           const TraitStep2Config& config, bool with_variance,
                                           const std::optional<MatrixXd>& inverse_hessian) const {
  const VectorXd t0 = start ? *start : default_start();
  if (t0.size() != dim_) throw InputError("structural start vector has the wrong length");
  auto objective = [&](const VectorXd& w) {
    const double v = loglik(theta1, from_working(w));
    return std::isfinite(v) ? v : -std::numeric_limits<double>::infinity();
  };
  const BfgsResult opt = bfgs_maximize(objective, to_working(t0), config.bfgs, inverse_hessian);
  const VectorXd theta2 = from_working(opt.x);
  if (!opt.converged || !theta2.allFinite())
    throw ConvergenceError("step-2 trait fit did not converge", theta2, opt.value);

  TraitStep2Result r;
  r.theta2 = ParamVector(theta2, names_);
  r.loglik = opt.value;
  r.iterations = opt.iterations;
  r.converged = true;
  r.n_used = n_used();
  r.inverse_hessian = opt.inverse_hessian;
  if (with_variance) {
    const MatrixXd info = numeric_information([&](const VectorXd& t) { return loglik(theta1, t); }, theta2);
    r.v2 = CovMatrix(spd_inverse(info, "step-2 information matrix"), names_);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Standardized family for the one-step fit

std::vector<std::string> TraitStructuralModel::standardized_names() const {
  std::vector<std::string> names;
  for (const auto& q : eq_) {
    if (!q.endogenous) continue;
    for (std::size_t c = 0; c < q.covariates.size(); ++c) names.push_back(names_[q.slopes + static_cast<Index>(c)]);
    if (q.trait_slope >= 0) names.push_back(names_[q.trait_slope]);
  }
  if (rho_ >= 0) names.push_back(names_[rho_]);
  return names;
}

namespace {

double mean_square(const VectorXd& v) { return v.size() ? v.squaredNorm() / static_cast<double>(v.size()) : 0.0; }

}  // namespace

std::optional<VectorXd> TraitStructuralModel::natural_from_standardized(const VectorXd& free) const {
  VectorXd theta2 = VectorXd::Zero(dim_);
  Index at = 0;
  for (const auto& q : eq_) {
    if (!q.endogenous) continue;
    for (std::size_t c = 0; c < q.covariates.size(); ++c) theta2(q.slopes + static_cast<Index>(c)) = free(at++);
    if (q.trait_slope >= 0) theta2(q.trait_slope) = free(at++);
  }
  if (rho_ >= 0) theta2(rho_) = free(at++);
  if (at != free.size()) throw InputError("standardized structural vector has the wrong length");

  const Eigen::RowVectorXd zbar = design_.colwise().mean();
  const MatrixXd zc = design_.rowwise() - zbar;
  auto centred = [&](const Equation& q, double& intercept) {
    VectorXd lin = VectorXd::Zero(n_used());
    intercept = 0.0;
    for (std::size_t c = 0; c < q.covariates.size(); ++c) {
      const double b = theta2(q.slopes + static_cast<Index>(c));
      lin += b * zc.col(q.covariates[c]);
      intercept -= b * zbar(q.covariates[c]);
    }
    return lin;
  };
  double intercept = 0.0;
  VectorXd lin_first = VectorXd::Zero(n_used());
  double var_first = 1.0;
  if (eq_[0].endogenous) {
    lin_first = centred(eq_[0], intercept);
    var_first = 1.0 - mean_square(lin_first);
    theta2(eq_[0].intercept) = intercept;
    theta2(eq_[0].variance) = var_first;
    if (!(var_first > 0)) return std::nullopt;
  }
  if (eq_.size() == 2 && eq_[1].endogenous) {
    VectorXd lin = centred(eq_[1], intercept);
    double v;
    if (eq_[1].trait_slope >= 0) {
      const double b = theta2(eq_[1].trait_slope);
      lin += b * lin_first;
      v = 1.0 - mean_square(lin) - b * b * var_first;
    } else {
      v = 1.0 - mean_square(lin);
    }
    theta2(eq_[1].intercept) = intercept;
    theta2(eq_[1].variance) = v;
    if (!(v > 0)) return std::nullopt;
  }
  if (rho_ >= 0 && !(std::abs(theta2(rho_)) < 1)) return std::nullopt;
  return theta2;
}

std::pair<VectorXd, VectorXd> TraitStructuralModel::standardize(const VectorXd& theta1, const VectorXd& theta2) const {
  auto conditional_mean = [&](const Equation& q) {
    VectorXd m = VectorXd::Zero(n_used());
    if (!q.endogenous) return m;
    m.setConstant(theta2(q.intercept));
    for (std::size_t c = 0; c < q.covariates.size(); ++c)
      m += theta2(q.slopes + static_cast<Index>(c)) * design_.col(q.covariates[c]);
    return m;
  };
  auto population_var = [](const VectorXd& v) { return (v.array() - v.mean()).square().mean(); };

  const VectorXd m_first = conditional_mean(eq_[0]);
  const double v_first = eq_[0].endogenous ? theta2(eq_[0].variance) : 1.0;
  std::vector<double> mean(shape_.blocks.size(), 0.0), sd(shape_.blocks.size(), 1.0);
  mean[eq_[0].trait] = m_first.mean();
  sd[eq_[0].trait] = std::sqrt(population_var(m_first) + v_first);
  double b = 0.0;
  if (eq_.size() == 2) {
    VectorXd m_second = conditional_mean(eq_[1]);
    const double v_second = eq_[1].endogenous ? theta2(eq_[1].variance) : 1.0;
    double var;
    if (eq_[1].trait_slope >= 0) {
      b = theta2(eq_[1].trait_slope);
      m_second += b * m_first;
      var = population_var(m_second) + b * b * v_first + v_second;
    } else {
      var = population_var(m_second) + v_second;
    }
    mean[eq_[1].trait] = m_second.mean();
    sd[eq_[1].trait] = std::sqrt(var);
  }

  IrtMeasurement m = shape_.with_free(theta1);
  for (std::size_t j = 0; j < m.blocks.size(); ++j) {
    m.blocks[j].tau += mean[j] * m.blocks[j].lambda;
    m.blocks[j].lambda *= sd[j];
  }
  VectorXd free(static_cast<Index>(standardized_names().size()));
  Index at = 0;
  for (const auto& q : eq_) {
    if (!q.endogenous) continue;
    for (std::size_t c = 0; c < q.covariates.size(); ++c)
      free(at++) = theta2(q.slopes + static_cast<Index>(c)) / sd[q.trait];
    if (q.trait_slope >= 0) free(at++) = b * sd[eq_[0].trait] / sd[q.trait];
  }
  if (rho_ >= 0) free(at++) = theta2(rho_);
  return {m.free_values(), free};
}

TraitStep2Result irt_step2_fit(const Dataset& data, const IrtMeasurement& m_fixed, const TraitStructuralSpec& spec,
                               const TraitStep2Config& config) {
  const TraitStructuralModel model(data, m_fixed, spec, config.nodes);
  return model.fit(m_fixed.free_values(), std::nullopt, config);
}

TraitTwoStepProblem::TraitTwoStepProblem(const Dataset& data, const IrtMeasurement& measurement,
                                         TraitStructuralSpec spec, VectorXd theta2_hat, TraitStep2Config config,
                                         std::optional<MatrixXd> inverse_hessian)
    : model_(data, measurement, std::move(spec), config.nodes),
      theta2_hat_(std::move(theta2_hat)),
      config_(config),
      inverse_hessian_(std::move(inverse_hessian)) {}

std::optional<VectorXd> TraitTwoStepProblem::refit(const VectorXd& theta1) const {
  try {
    return model_.fit(theta1, theta2_hat_, config_, false, inverse_hessian_).theta2.values();
  } catch (const ConvergenceError&) {
    return std::nullopt;
  } catch (const NumericalError&) {
    return std::nullopt;
  }
}

IrtOneStepResult irt_onestep(const Dataset& data, const IrtMeasurement& measurement_start,
                             const TraitStructuralSpec& spec, const VectorXd& theta2_start,
                             const IrtOneStepConfig& config) {
  const TraitStructuralModel model(data, measurement_start, spec, config.step2.nodes);
  const auto [theta1, free] = model.standardize(measurement_start.free_values(), theta2_start);
  const Index d1 = theta1.size();
  VectorXd x0(d1 + free.size());
  x0 << theta1, free;
  auto objective = [&](const VectorXd& x) {
    const auto theta2 = model.natural_from_standardized(x.tail(x.size() - d1));
    if (!theta2) return -std::numeric_limits<double>::infinity();
    return model.loglik(x.head(d1), *theta2);
  };

  std::optional<BfgsResult> best;
  for (int s = 0; s < std::max(1, config.starts); ++s) {
    VectorXd start = x0;
    if (s > 0) {
      RngStream rng(config.seed, static_cast<std::uint64_t>(s));
      for (Index j = 0; j < start.size(); ++j) start(j) += config.jitter * rng.normal();
      if (!std::isfinite(objective(start))) continue;
    }
    try {
      BfgsResult r = bfgs_maximize(objective, start, config.step2.bfgs);
      if (!best || (r.converged && !best->converged) || (r.converged == best->converged && r.value > best->value))
        best = std::move(r);
    } catch (const NumericalError&) {
    }
  }
  if (!best) throw ConvergenceError("one-step trait estimation failed from every start");

  std::vector<std::string> names = measurement_start.free_names();
  const auto structural = model.standardized_names();
  names.insert(names.end(), structural.begin(), structural.end());
  IrtOneStepResult r;
  r.theta = ParamVector(best->x, names);
  r.theta2_natural = *model.natural_from_standardized(best->x.tail(best->x.size() - d1));
  r.loglik = best->value;
  r.converged = best->converged;
  r.measurement_size = d1;
  r.covariance =
      CovMatrix(spd_inverse(numeric_information(objective, best->x), "one-step information matrix"), names);
  return r;
}

}  // namespace twostep
