#include "twostep/core.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <set>

namespace twostep {

ParamVector::ParamVector(VectorXd values, std::vector<std::string> names)
    : values_(std::move(values)), names_(std::move(names)) {
  if (static_cast<Index>(names_.size()) != values_.size()) {
    throw InputError("parameter vector has " + std::to_string(values_.size()) + " values but " +
                     std::to_string(names_.size()) + " names");
  }
  for (Index i = 0; i < values_.size(); ++i) {
    if (!layout_.emplace(names_[i], i).second) throw InputError("duplicate parameter name " + names_[i]);
  }
}

bool ParamVector::contains(std::string_view name) const { return layout_.count(std::string(name)) > 0; }

Index ParamVector::index(std::string_view name) const {
  auto it = layout_.find(std::string(name));
  if (it == layout_.end()) throw InputError("unknown parameter " + std::string(name));
  return it->second;
}

ParamVector ParamVector::with_values(VectorXd values) const {
  if (values.size() != values_.size()) throw InputError("parameter vector length mismatch");
  ParamVector out = *this;
  out.values_ = std::move(values);
  return out;
}

CovMatrix::CovMatrix(MatrixXd matrix, std::vector<std::string> axis_names)
    : m(std::move(matrix)), axes(std::move(axis_names)) {
  if (m.rows() != m.cols()) throw InputError("covariance matrix must be square");
  if (static_cast<Index>(axes.size()) != m.rows()) throw InputError("covariance axis labels do not match dimension");
}

VectorXd CovMatrix::standard_errors() const { return m.diagonal().cwiseMax(0.0).cwiseSqrt(); }

bool CovMatrix::satisfies_invariants() const {
  if (m.size() == 0) return true;
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-10) return false;
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(m, Eigen::EigenvaluesOnly);
  const double largest = es.eigenvalues().maxCoeff();
  return es.eigenvalues().minCoeff() >= -1e-8 * std::max(largest, 0.0);
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

namespace {
std::mt19937_64 seeded_engine(std::uint64_t seed, std::uint64_t stream_id) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream_id), static_cast<std::uint32_t>(stream_id >> 32),
                    0x7a3cU};
  return std::mt19937_64(seq);
}
}  // namespace

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id), engine_(seeded_engine(seed, stream_id)) {}

double RngStream::normal() { return normal_(engine_); }
double RngStream::uniform() { return uniform_(engine_); }
double RngStream::exponential() { return exponential_(engine_); }

Index RngStream::categorical(const Eigen::Ref<const VectorXd>& weights) {
  const double u = uniform() * weights.sum();
  double acc = 0.0;
  for (Index c = 0; c < weights.size(); ++c) {
    acc += weights(c);
    if (u < acc) return c;
  }
  return weights.size() - 1;
}

std::uint64_t RngStream::derive_seed(std::uint64_t tag) const {
  return splitmix64(splitmix64(seed_ ^ splitmix64(stream_id_)) ^ (tag * 0xd1342543de82ef95ULL + 1));
}

Index Dataset::item_index(std::string_view name) const {
  auto it = std::find(item_names.begin(), item_names.end(), name);
  if (it == item_names.end()) throw InputError("unknown item column " + std::string(name));
  return it - item_names.begin();
}

Index Dataset::covariate_index(std::string_view name) const {
  auto it = std::find(covariate_names.begin(), covariate_names.end(), name);
  if (it == covariate_names.end()) throw InputError("unknown covariate column " + std::string(name));
  return it - covariate_names.begin();
}

Index Dataset::outcome_index(std::string_view name) const {
  auto it = std::find(outcome_names.begin(), outcome_names.end(), name);
  if (it == outcome_names.end()) throw InputError("unknown outcome column " + std::string(name));
  return it - outcome_names.begin();
}

const ItemBlock& Dataset::block(std::string_view name) const {
  for (const auto& b : blocks)
    if (b.name == name) return b;
  throw InputError("unknown item block " + std::string(name));
}

bool Dataset::row_flagged(Index i) const {
  for (Index j = 0; j < covariates.cols(); ++j)
    if (std::isnan(covariates(i, j))) return true;
  for (Index j = 0; j < outcomes.cols(); ++j)
    if (std::isnan(outcomes(i, j))) return true;
  return false;
}

std::vector<Index> Dataset::complete_rows(const std::vector<Index>& covariate_cols,
                                          const std::vector<Index>& outcome_cols) const {
  std::vector<Index> rows;
  rows.reserve(n());
  for (Index i = 0; i < n(); ++i) {
    bool ok = true;
    for (Index j : covariate_cols) ok = ok && !std::isnan(covariates(i, j));
    for (Index j : outcome_cols) ok = ok && !std::isnan(outcomes(i, j));
    if (ok) rows.push_back(i);
  }
  return rows;
}

void Dataset::validate() const {
  if (static_cast<Index>(item_names.size()) != p() || static_cast<Index>(categories.size()) != p())
    throw InputError("item names/categories do not match the item matrix");
  if (covariates.rows() != n() && covariates.size() != 0) throw InputError("covariate rows do not match unit count");
  if (outcomes.rows() != n() && outcomes.size() != 0) throw InputError("outcome rows do not match unit count");
  for (Index k = 0; k < p(); ++k) {
    if (categories[k] < 2) throw InputError("item " + item_names[k] + " needs at least 2 categories");
    for (Index i = 0; i < n(); ++i) {
      const int code = items(i, k);
      if (code != kMissingItem && (code < 1 || code > categories[k]))
        throw InputError("item " + item_names[k] + " has code " + std::to_string(code) + " outside 1.." +
                         std::to_string(categories[k]));
    }
  }
  std::vector<int> seen(p(), 0);
  for (const auto& b : blocks) {
    if (b.items.empty()) throw InputError("item block " + b.name + " is empty");
    for (Index k : b.items) {
      if (k < 0 || k >= p()) throw InputError("item block " + b.name + " references a missing item");
      ++seen[k];
    }
  }
  if (!blocks.empty()) {
    for (Index k = 0; k < p(); ++k)
      if (seen[k] != 1) throw InputError("item " + item_names[k] + " must belong to exactly one block");
  }
  std::set<std::string> names;
  for (const auto& b : blocks)
    if (!names.insert(b.name).second) throw InputError("duplicate item block " + b.name);
}

}  // namespace twostep
