#include "twostep/report.hpp"

#include <fmt/format.h>

#include <fstream>

namespace twostep {

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const json& config) { return fmt::format("fnv1a64:{:016x}", fnv1a64(config.dump())); }

json matrix_to_json(const MatrixXd& m) {
  json rows = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

MatrixXd matrix_from_json(const json& j) {
  if (!j.is_array()) throw InputError("matrix must be a JSON array of rows");
  const Index rows = static_cast<Index>(j.size());
  const Index cols = rows ? static_cast<Index>(j.at(0).size()) : 0;
  MatrixXd m(rows, cols);
  for (Index i = 0; i < rows; ++i) {
    if (static_cast<Index>(j.at(i).size()) != cols) throw InputError("matrix rows have different lengths");
    for (Index c = 0; c < cols; ++c) m(i, c) = j.at(i).at(c).get<double>();
  }
  return m;
}

json vector_to_json(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

VectorXd vector_from_json(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Index>(v.size()));
}

json to_json(const CovMatrix& c) { return {{"axes", c.axes}, {"values", matrix_to_json(c.m)}}; }

CovMatrix cov_from_json(const json& j) {
  return CovMatrix(matrix_from_json(j.at("values")), j.at("axes").get<std::vector<std::string>>());
}

json to_json(const ParamVector& p) { return {{"names", p.names()}, {"estimates", vector_to_json(p.values())}}; }

ParamVector param_vector_from_json(const json& j) {
  return ParamVector(vector_from_json(j.at("estimates")), j.at("names").get<std::vector<std::string>>());
}

json to_json(const VarianceReport& r, const VectorXd& estimates, double level) {
  const VectorXd se = r.standard_errors();
  json intervals = json::array();
  for (Index i = 0; i < se.size(); ++i) {
    const auto [lo, hi] = wald_interval(estimates(i), se(i), level);
    intervals.push_back({lo, hi});
  }
  json j{{"method", r.request.label()},
         {"information", r.information},
         {"se", vector_to_json(se)},
         {"intervals", intervals},
         {"level", level},
         {"v2", to_json(r.v2)},
         {"v1", to_json(r.v1)},
         {"total", to_json(r.total)}};
  if (r.request.method == VarianceMethod::simulation) {
    j["draws"] = r.request.draws;
    j["draws_used"] = r.draws_used;
    j["failed_refits"] = r.failed_refits;
  }
  return j;
}

json to_json(const Step1Cache& c) {
  return {{"schema", kStep1CacheSchema},
          {"model", c.model},
          {"theta1", to_json(c.theta1)},
          {"sigma11", to_json(c.sigma11)},
          {"shape", c.shape},
          {"seed", c.seed},
          {"draw_seed", c.draw_seed},
          {"draws", matrix_to_json(c.draws)}};
}

Step1Cache step1_cache_from_json(const json& j) {
  if (j.value("schema", "") != kStep1CacheSchema) throw InputError("not a step-1 cache file");
  Step1Cache c;
  c.model = j.at("model").get<std::string>();
  c.theta1 = param_vector_from_json(j.at("theta1"));
  c.sigma11 = cov_from_json(j.at("sigma11"));
  c.shape = j.at("shape");
  c.seed = j.at("seed").get<std::uint64_t>();
  c.draw_seed = j.at("draw_seed").get<std::uint64_t>();
  c.draws = matrix_from_json(j.at("draws"));
  if (c.sigma11.axes != c.theta1.names()) throw InputError("step-1 cache: Sigma11 axes do not match theta1");
  if (c.draws.size() && c.draws.cols() != c.theta1.size())
    throw InputError("step-1 cache: draw matrix has the wrong width");
  return c;
}

void save_step1_cache(const Step1Cache& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write step-1 cache " + path);
  out << to_json(c).dump(1) << '\n';
}

Step1Cache load_step1_cache(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open step-1 cache " + path);
  try {
    return step1_cache_from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw InputError("step-1 cache " + path + ": " + e.what());
  }
}

}  // namespace twostep
