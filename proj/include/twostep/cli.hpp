#ifndef TWOSTEP_CLI_HPP
#define TWOSTEP_CLI_HPP

#include "twostep/sim_study.hpp"

#include <json.hpp>

#include <iosfwd>
#include <string>
#include <vector>

namespace twostep {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConvergence = 2;
inline constexpr int kExitInput = 3;

/// A parsed study file: scenarios plus the estimators compared on each.
struct StudyPlan {
  std::vector<StudyScenario> scenarios;
  StudyEstimators estimators;
  std::uint64_t seed = 1;
};

StudyPlan parse_study_plan(const nlohmann::json& j, std::optional<std::uint64_t> seed_override = std::nullopt,
                           const std::vector<std::string>& estimator_override = {});

/// twostep-lv entry point. Exit codes: 0 success, 2 convergence failure,
/// 3 invalid input, 1 anything else.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace twostep

#endif  // TWOSTEP_CLI_HPP
