#ifndef TWOSTEP_CORE_HPP
#define TWOSTEP_CORE_HPP

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace twostep {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// Bad user input: unknown columns, malformed files, invalid configuration.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// An optimizer or EM run that did not reach its stopping rule.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, VectorXd best_so_far = {}, double best_loglik = 0.0)
      : std::runtime_error(what), best_(std::move(best_so_far)), best_loglik_(best_loglik) {}
  const VectorXd& best_so_far() const { return best_; }
  double best_loglik() const { return best_loglik_; }

 private:
  VectorXd best_;
  double best_loglik_;
};

// Singular or indefinite matrices, non-finite likelihood probes and similar.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flat parameter vector with one label per entry. Labels double as the
/// layout: each model role (an item intercept, a class loading, ...) has a
/// unique name that maps to exactly one index.
class ParamVector {
 public:
  ParamVector() = default;
  ParamVector(VectorXd values, std::vector<std::string> names);

  Index size() const { return values_.size(); }
  const VectorXd& values() const { return values_; }
  VectorXd& values() { return values_; }
  const std::vector<std::string>& names() const { return names_; }

  bool contains(std::string_view name) const;
  Index index(std::string_view name) const;
  double operator[](std::string_view name) const { return values_(index(name)); }
  double& operator[](std::string_view name) { return values_(index(name)); }

  // Same layout, new values.
  ParamVector with_values(VectorXd values) const;

 private:
  VectorXd values_;
  std::vector<std::string> names_;
  std::unordered_map<std::string, Index> layout_;
};

/// Symmetric covariance matrix with labelled axes.
struct CovMatrix {
  MatrixXd m;
  std::vector<std::string> axes;

  CovMatrix() = default;
  CovMatrix(MatrixXd matrix, std::vector<std::string> axis_names);

  Index dim() const { return m.rows(); }
  VectorXd standard_errors() const;
  // Symmetric within 1e-10 and numerically PSD (min eigenvalue >= -1e-8 * max).
  bool satisfies_invariants() const;
};

/// Deterministic random stream. Equal (seed, stream_id) pairs produce equal
/// sequences; distinct stream ids seed the engine from distinct seed sequences.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  double normal();
  double uniform();
  double exponential();
  // Index drawn with probabilities proportional to `weights`.
  Index categorical(const Eigen::Ref<const VectorXd>& weights);

  // Independent stream family keyed by `tag`; the child's own stream ids
  // are then free for per-draw or per-replication use.
  std::uint64_t derive_seed(std::uint64_t tag) const;
  RngStream child(std::uint64_t tag, std::uint64_t stream_id = 0) const {
    return RngStream(derive_seed(tag), stream_id);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
  std::exponential_distribution<double> exponential_{1.0};
};

std::uint64_t splitmix64(std::uint64_t x);

// Item cells hold codes 1..h_k; this code marks a missing response.
inline constexpr int kMissingItem = 0;

struct ItemBlock {
  std::string name;
  std::vector<Index> items;  // column indices into Dataset::items
};

/// Unit-level data: categorical items plus covariate (Z_p) and outcome (Z_o)
/// columns. Missing covariate or outcome cells are NaN.
struct Dataset {
  Eigen::MatrixXi items;
  std::vector<std::string> item_names;
  std::vector<int> categories;
  std::vector<ItemBlock> blocks;

  MatrixXd covariates;
  std::vector<std::string> covariate_names;
  MatrixXd outcomes;
  std::vector<std::string> outcome_names;

  std::vector<std::string> unit_ids;

  Index n() const { return items.rows(); }
  Index p() const { return items.cols(); }

  Index item_index(std::string_view name) const;
  Index covariate_index(std::string_view name) const;
  Index outcome_index(std::string_view name) const;
  const ItemBlock& block(std::string_view name) const;

  // Any covariate or outcome cell missing.
  bool row_flagged(Index i) const;
  // Rows with every listed covariate and outcome column observed.
  std::vector<Index> complete_rows(const std::vector<Index>& covariate_cols,
                                   const std::vector<Index>& outcome_cols) const;

  // Throws InputError if codes fall outside 1..h_k or the blocks do not
  // partition the items.
  void validate() const;
};

}  // namespace twostep

#endif  // TWOSTEP_CORE_HPP
