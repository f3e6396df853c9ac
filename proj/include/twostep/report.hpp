#ifndef TWOSTEP_REPORT_HPP
#define TWOSTEP_REPORT_HPP

#include "twostep/core.hpp"
#include "twostep/variance.hpp"

#include <json.hpp>

#include <optional>
#include <string>

namespace twostep {

using nlohmann::json;

inline constexpr const char* kResultSchema = "twostep-lv/result/1";
inline constexpr const char* kStep1CacheSchema = "twostep-lv/step1/1";

std::uint64_t fnv1a64(std::string_view text);
std::string config_hash(const json& config);  // "fnv1a64:<16 hex digits>"

json matrix_to_json(const MatrixXd& m);
MatrixXd matrix_from_json(const json& j);
json vector_to_json(const VectorXd& v);
VectorXd vector_from_json(const json& j);

json to_json(const CovMatrix& c);
CovMatrix cov_from_json(const json& j);

json to_json(const ParamVector& p);  // {"names": [...], "estimates": [...]}
ParamVector param_vector_from_json(const json& j);

// One variance method: matrices, standard errors and Wald intervals for the
// structural estimates.
json to_json(const VarianceReport& r, const VectorXd& estimates, double level);

/// Everything step 2 needs from step 1: the measurement estimates, their
/// covariance and the simulation draws, plus a model-specific `shape`
/// document for rebuilding the measurement model.
struct Step1Cache {
  std::string model;  // "lca" or "irt"
  ParamVector theta1;
  CovMatrix sigma11;
  json shape;
  std::uint64_t seed = 0;
  std::uint64_t draw_seed = 0;
  MatrixXd draws;  // one theta1 draw per row (may be empty)
};

json to_json(const Step1Cache& c);
Step1Cache step1_cache_from_json(const json& j);
void save_step1_cache(const Step1Cache& c, const std::string& path);
Step1Cache load_step1_cache(const std::string& path);

}  // namespace twostep

#endif  // TWOSTEP_REPORT_HPP
