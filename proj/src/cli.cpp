#include "twostep/cli.hpp"

#include "twostep/dataset_io.hpp"
#include "twostep/latent_class.hpp"
#include "twostep/latent_trait.hpp"
#include "twostep/linalg.hpp"
#include "twostep/parallel.hpp"
#include "twostep/report.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>

namespace twostep {

namespace {

struct CommonOptions {
  std::string data;
  std::string config;
  std::vector<std::string> variance;
  std::optional<std::uint64_t> seed;
  int jobs = default_jobs();
  std::string out;
  std::string step1_cache;
};

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw InputError("config " + path + ": " + e.what());
  }
}

std::uint64_t resolve_seed(const CommonOptions& o, const json& cfg) {
  if (o.seed) return *o.seed;
  if (cfg.contains("seed")) return cfg.at("seed").get<std::uint64_t>();
  if (const char* env = std::getenv("TWOSTEP_LV_SEED")) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw InputError(std::string("TWOSTEP_LV_SEED is not an unsigned integer: '") + env + "'");
  }
  return 1;
}

std::vector<VarianceRequest> resolve_variance(const CommonOptions& o, const json& cfg) {
  std::vector<std::string> labels = o.variance;
  if (labels.empty()) labels = cfg.value("variance", std::vector<std::string>{"naive", "asymptotic"});
  std::vector<VarianceRequest> out;
  for (const auto& l : labels) {
    const VarianceRequest r = parse_variance_request(l);
    if (std::find(out.begin(), out.end(), r) == out.end()) out.push_back(r);
  }
  return out;
}

int max_draws(const std::vector<VarianceRequest>& requests) {
  int m = 0;
  for (const auto& r : requests)
    if (r.method == VarianceMethod::simulation) m = std::max(m, r.draws);
  return m;
}

std::vector<VarianceReport> run_variance(const StepTwoProblem& problem, const VectorXd& theta1,
                                         const VectorXd& theta2, const CovMatrix& v2, const Step1Cache& cache,
                                         const std::vector<VarianceRequest>& requests, int jobs) {
  std::vector<VarianceReport> reports(requests.size());
  std::vector<int> counts;
  for (std::size_t i = 0; i < requests.size(); ++i) {
    switch (requests[i].method) {
      case VarianceMethod::naive: {
        VarianceReport r;
        r.request = requests[i];
        r.v2 = v2;
        r.v1 = CovMatrix(MatrixXd::Zero(v2.dim(), v2.dim()), v2.axes);
        r.total = v2;
        reports[i] = std::move(r);
        break;
      }
      case VarianceMethod::asymptotic:
        reports[i] = asymptotic_variance(problem, theta1, theta2, cache.sigma11);
        break;
      case VarianceMethod::simulation:
        counts.push_back(requests[i].draws);
        break;
    }
  }
  if (!counts.empty()) {
    const int needed = *std::max_element(counts.begin(), counts.end());
    const MatrixXd draws = cache.draws.rows() >= needed
                               ? MatrixXd(cache.draws.topRows(needed))
                               : mvn_draw_matrix(theta1, cache.sigma11.m, needed, cache.draw_seed);
    auto sims = simulation_variance_from_draws(problem, v2, draws, counts, jobs);
    std::size_t k = 0;
    for (std::size_t i = 0; i < requests.size(); ++i)
      if (requests[i].method == VarianceMethod::simulation) reports[i] = std::move(sims[k++]);
  }
  return reports;
}

void print_summary(std::ostream& out, const ParamVector& theta2, const std::vector<VarianceReport>& reports) {
  std::size_t width = 9;
  for (const auto& n : theta2.names()) width = std::max(width, n.size());
  fmt::print(out, "{:<{}}  {:>12}", "parameter", width, "estimate");
  for (const auto& r : reports) fmt::print(out, "  {:>16}", "se(" + r.request.label() + ")");
  out << '\n';
  for (Index i = 0; i < theta2.size(); ++i) {
    fmt::print(out, "{:<{}}  {:>12}", theta2.names()[i], width, fmt::format("{:.6g}", theta2.values()(i)));
    for (const auto& r : reports) fmt::print(out, "  {:>16}", fmt::format("{:.6g}", std::sqrt(r.total.m(i, i))));
    out << '\n';
  }
}

void emit_result(const json& result, const CommonOptions& o, const ParamVector& theta2,
                 const std::vector<VarianceReport>& reports, std::ostream& out) {
  if (o.out.empty()) {
    out << result.dump(2) << '\n';
    return;
  }
  std::ofstream f(o.out);
  if (!f) throw InputError("cannot write " + o.out);
  f << result.dump(2) << '\n';
  print_summary(out, theta2, reports);
}

json result_header(const std::string& command, const CommonOptions& o, const json& cfg, std::uint64_t seed,
                   const std::vector<VarianceRequest>& requests) {
  json effective = cfg;
  effective["seed"] = seed;
  std::vector<std::string> labels;
  for (const auto& r : requests) labels.push_back(r.label());
  effective["variance"] = labels;
  return {{"schema", kResultSchema},
          {"command", command},
          {"seed", seed},
          {"config_hash", config_hash(effective)},
          {"config", effective},
          {"data", {{"path", o.data}}}};
}

Step1Cache with_draws(Step1Cache cache, int needed) {
  if (needed > 0 && cache.draws.rows() < needed)
    cache.draws = mvn_draw_matrix(cache.theta1.values(), cache.sigma11.m, needed, cache.draw_seed);
  return cache;
}

std::optional<Step1Cache> existing_cache(const CommonOptions& o, const std::string& model) {
  if (o.step1_cache.empty() || !std::filesystem::exists(o.step1_cache)) return std::nullopt;
  Step1Cache c = load_step1_cache(o.step1_cache);
  if (c.model != model) throw InputError("step-1 cache " + o.step1_cache + " holds a " + c.model + " model");
  return c;
}

// ---------------------------------------------------------------------------
// fit-lca

LcaStructuralSpec parse_lca_structural(const json& j) {
  LcaStructuralSpec s;
  const std::string form = j.value("form", "covariate");
  if (form == "covariate") {
    s.form = LcaStructuralForm::covariate;
    s.covariates = j.value("covariates", std::vector<std::string>{});
  } else if (form == "distal") {
    s.form = LcaStructuralForm::distal;
    if (!j.contains("outcome")) throw InputError("distal structural model needs an \"outcome\" column");
    s.outcome = j.at("outcome").get<std::string>();
  } else {
    throw InputError("unknown structural form '" + form + "' (covariate|distal)");
  }
  return s;
}

int cmd_fit_lca(const CommonOptions& o, std::ostream& out) {
  const json cfg = load_json(o.config);
  if (!cfg.contains("items")) throw InputError("config needs an \"items\" declaration");
  if (!cfg.contains("classes")) throw InputError("config needs \"classes\"");
  const auto requests = resolve_variance(o, cfg);
  const std::uint64_t seed = resolve_seed(o, cfg);
  const RngStream master(seed, 0);
  const Dataset data = read_dataset_csv(o.data, parse_item_declaration(cfg.at("items")));
  const int classes = cfg.at("classes").get<int>();
  const LcaStructuralSpec spec = parse_lca_structural(cfg.value("structural", json::object()));
  const double level = cfg.value("level", 0.95);

  json step1_json;
  LcaMeasurement measurement;
  Step1Cache cache;
  if (auto cached = existing_cache(o, "lca")) {
    cache = std::move(*cached);
    const auto& shape = cache.shape;
    measurement = LcaMeasurement::zeros(shape.at("classes").get<int>(),
                                        shape.at("items").get<std::vector<std::string>>(),
                                        shape.at("categories").get<std::vector<int>>());
    if (measurement.item_names != data.item_names) throw InputError("step-1 cache items do not match the dataset");
    if (measurement.free_names() != cache.theta1.names()) throw InputError("step-1 cache layout does not match");
    measurement.set_free(cache.theta1.values());
    step1_json = {{"source", "cache"}, {"path", o.step1_cache}, {"class_proportions", shape.at("class_proportions")}};
  } else {
    LcaStep1Config c1;
    c1.seed = master.derive_seed(1);
    if (cfg.contains("step1")) {
      const auto& s = cfg.at("step1");
      c1.starts = s.value("starts", c1.starts);
      c1.max_iter = s.value("max_iter", c1.max_iter);
      c1.rel_tol = s.value("tol", c1.rel_tol);
    }
    const LcaStep1Result r = lca_step1_em(data, classes, c1);
    measurement = r.measurement;
    cache.model = "lca";
    cache.theta1 = measurement.free_parameters();
    cache.sigma11 = r.sigma11;
    cache.seed = seed;
    cache.draw_seed = simulation_draw_seed(master);
    cache.shape = {{"classes", classes},
                   {"items", measurement.item_names},
                   {"categories", measurement.categories},
                   {"class_proportions", vector_to_json(r.class_proportions)},
                   {"loglik", r.loglik}};
    cache = with_draws(std::move(cache), max_draws(requests));
    if (!o.step1_cache.empty()) save_step1_cache(cache, o.step1_cache);
    step1_json = {{"source", "fit"},
                  {"loglik", r.loglik},
                  {"iterations", r.iterations},
                  {"converged", r.converged},
                  {"boundary", r.boundary},
                  {"class_proportions", vector_to_json(r.class_proportions)}};
  }
  if (measurement.classes != classes) throw InputError("step-1 cache has a different class count");
  step1_json["parameters"] = to_json(cache.theta1);
  step1_json["sigma11"] = to_json(cache.sigma11);

  const LcaStructuralModel model(data, measurement, spec);
  const VectorXd theta1 = cache.theta1.values();
  const LcaStep2Result step2 = model.fit(theta1, std::nullopt, {}, true);
  const LcaTwoStepProblem problem(data, measurement, spec, step2.theta2.values());
  const auto reports = run_variance(problem, theta1, step2.theta2.values(), step2.v2, cache, requests, o.jobs);

  json result = result_header("fit-lca", o, cfg, seed, requests);
  result["data"]["n"] = data.n();
  result["data"]["n_step2"] = step2.n_used;
  result["information"] = "observed";
  result["step1"] = step1_json;
  result["step2"] = {{"names", step2.theta2.names()},
                     {"estimates", vector_to_json(step2.theta2.values())},
                     {"loglik", step2.loglik},
                     {"iterations", step2.iterations},
                     {"converged", step2.converged}};
  result["variance"] = json::array();
  for (const auto& r : reports) result["variance"].push_back(to_json(r, step2.theta2.values(), level));
  if (cfg.value("onestep", false)) {
    LcaOneStepConfig c;
    c.seed = master.derive_seed(2);
    const LcaOneStepResult one = lca_onestep(data, measurement, spec, step2.theta2.values(), c);
    result["onestep"] = {{"names", one.theta.names()},
                         {"estimates", vector_to_json(one.theta.values())},
                         {"se", vector_to_json(one.covariance.standard_errors())},
                         {"loglik", one.loglik},
                         {"converged", one.converged}};
  }
  emit_result(result, o, step2.theta2, reports, out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// fit-irt

TraitStructuralSpec parse_trait_structural(const json& cfg) {
  TraitStructuralSpec s;
  if (!cfg.contains("equations")) throw InputError("config needs trait \"equations\"");
  for (const auto& e : cfg.at("equations")) {
    TraitEquation q;
    q.trait = e.at("trait").get<std::string>();
    q.covariates = e.value("covariates", std::vector<std::string>{});
    q.traits = e.value("traits", std::vector<std::string>{});
    s.equations.push_back(std::move(q));
  }
  s.residual_correlation = cfg.value("residual_correlation", true);
  return s;
}

int cmd_fit_irt(const CommonOptions& o, std::ostream& out) {
  const json cfg = load_json(o.config);
  if (!cfg.contains("items")) throw InputError("config needs an \"items\" declaration");
  const auto requests = resolve_variance(o, cfg);
  const std::uint64_t seed = resolve_seed(o, cfg);
  const RngStream master(seed, 0);
  const Dataset data = read_dataset_csv(o.data, parse_item_declaration(cfg.at("items")));
  const TraitStructuralSpec spec = parse_trait_structural(cfg);
  const int nodes = cfg.value("nodes", 31);
  const double level = cfg.value("level", 0.95);
  std::vector<std::string> traits;
  for (const auto& b : data.blocks) traits.push_back(b.name);

  json step1_json;
  IrtMeasurement measurement;
  Step1Cache cache;
  if (auto cached = existing_cache(o, "irt")) {
    cache = std::move(*cached);
    for (const auto& b : cache.shape.at("blocks")) {
      IrtBlock block;
      block.trait = b.at("trait").get<std::string>();
      block.item_names = b.at("items").get<std::vector<std::string>>();
      block.tau = VectorXd::Zero(static_cast<Index>(block.item_names.size()));
      block.lambda = block.tau;
      measurement.blocks.push_back(std::move(block));
    }
    if (measurement.free_names() != cache.theta1.names()) throw InputError("step-1 cache layout does not match");
    measurement.set_free(cache.theta1.values());
    step1_json = {{"source", "cache"}, {"path", o.step1_cache}};
  } else {
    IrtStep1Config c1;
    c1.nodes = nodes;
    const IrtStep1Fit fit = irt_step1_fit_all(data, traits, c1);
    measurement = fit.measurement;
    cache.model = "irt";
    cache.theta1 = ParamVector(measurement.free_values(), measurement.free_names());
    cache.sigma11 = fit.sigma11;
    cache.seed = seed;
    cache.draw_seed = simulation_draw_seed(master);
    json blocks = json::array();
    json logliks = json::array();
    for (const auto& b : fit.blocks) {
      blocks.push_back({{"trait", b.block.trait}, {"items", b.block.item_names}});
      logliks.push_back(b.loglik);
    }
    cache.shape = {{"blocks", blocks}, {"nodes", nodes}};
    cache = with_draws(std::move(cache), max_draws(requests));
    if (!o.step1_cache.empty()) save_step1_cache(cache, o.step1_cache);
    step1_json = {{"source", "fit"}, {"loglik", logliks}, {"converged", true}};
  }
  step1_json["parameters"] = to_json(cache.theta1);
  step1_json["sigma11"] = to_json(cache.sigma11);

  TraitStep2Config c2;
  c2.nodes = nodes;
  const TraitStructuralModel model(data, measurement, spec, nodes);
  const VectorXd theta1 = cache.theta1.values();
  const TraitStep2Result step2 = model.fit(theta1, std::nullopt, c2, true);
  const TraitTwoStepProblem problem(data, measurement, spec, step2.theta2.values(), c2, step2.inverse_hessian);
  const auto reports = run_variance(problem, theta1, step2.theta2.values(), step2.v2, cache, requests, o.jobs);

  json result = result_header("fit-irt", o, cfg, seed, requests);
  result["data"]["n"] = data.n();
  result["data"]["n_step2"] = step2.n_used;
  result["information"] = "observed";
  result["step1"] = step1_json;
  result["step2"] = {{"names", step2.theta2.names()},
                     {"estimates", vector_to_json(step2.theta2.values())},
                     {"loglik", step2.loglik},
                     {"iterations", step2.iterations},
                     {"converged", step2.converged}};
  result["variance"] = json::array();
  for (const auto& r : reports) result["variance"].push_back(to_json(r, step2.theta2.values(), level));
  if (cfg.value("onestep", false)) {
    IrtOneStepConfig c;
    c.seed = master.derive_seed(2);
    c.step2 = c2;
    const IrtOneStepResult one = irt_onestep(data, measurement, spec, step2.theta2.values(), c);
    result["onestep"] = {{"names", one.theta.names()},
                         {"estimates", vector_to_json(one.theta.values())},
                         {"se", vector_to_json(one.covariance.standard_errors())},
                         {"structural", vector_to_json(one.theta2_natural)},
                         {"loglik", one.loglik},
                         {"converged", one.converged}};
  }
  emit_result(result, o, step2.theta2, reports, out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// study

int cmd_study(const CommonOptions& o, std::ostream& out, std::ostream& err) {
  const json cfg = load_json(o.config);
  std::optional<std::uint64_t> seed = o.seed;
  if (!seed && !cfg.contains("seed")) {
    CommonOptions probe;
    seed = resolve_seed(probe, cfg);
  }
  const StudyPlan plan = parse_study_plan(cfg, seed, o.variance);
  const std::filesystem::path dir = o.out.empty() ? std::filesystem::path("study-output") : std::filesystem::path(o.out);
  std::filesystem::create_directories(dir);

  StudyOptions options;
  options.jobs = o.jobs;
  std::vector<StudyMetrics> studies;
  for (const auto& s : plan.scenarios) {
    fmt::print(err, "running {} ({} replications)\n", scenario_id(s), scenario_replications(s));
    studies.push_back(run_study(s, plan.estimators, options));
  }
  {
    std::ofstream f(dir / "replications.csv");
    write_replications_csv(studies, f);
  }
  {
    std::ofstream f(dir / "metrics.csv");
    write_metrics_csv(studies, f);
  }
  {
    std::ofstream f(dir / "tables.txt");
    print_metrics_tables(studies, f);
  }
  json summary{{"schema", "twostep-lv/study/1"},
               {"seed", plan.seed},
               {"config_hash", config_hash(cfg)},
               {"config", cfg},
               {"scenarios", json::array()}};
  for (const auto& s : studies) {
    json row{{"id", s.scenario},
             {"parameter", s.parameter},
             {"truth", s.truth},
             {"replications", s.replications},
             {"failed", s.failed},
             {"omitted", s.omitted},
             {"estimators", json::array()}};
    for (const auto& e : s.estimators)
      row["estimators"].push_back({{"estimator", e.estimator},
                                   {"used", e.used},
                                   {"mean_se", e.mean_se},
                                   {"sd_estimate", e.sd_estimate},
                                   {"se_ratio", e.se_ratio},
                                   {"coverage", e.coverage}});
    summary["scenarios"].push_back(std::move(row));
  }
  {
    std::ofstream f(dir / "study.json");
    f << summary.dump(2) << '\n';
  }
  print_metrics_tables(studies, out);
  return kExitOk;
}

}  // namespace

StudyPlan parse_study_plan(const json& j, std::optional<std::uint64_t> seed_override,
                           const std::vector<std::string>& estimator_override) {
  if (!j.is_object() || !j.contains("scenarios")) throw InputError("study file needs a \"scenarios\" list");
  StudyPlan plan;
  plan.seed = seed_override ? *seed_override : j.value("seed", std::uint64_t{1});
  std::vector<std::string> labels = estimator_override;
  if (labels.empty()) labels = j.value("estimators", std::vector<std::string>{"naive", "asymptotic"});
  if (j.value("onestep", false)) labels.push_back("onestep");
  plan.estimators = StudyEstimators::parse(labels);
  const int default_reps = j.value("replications", 100);
  std::set<std::string> ids;
  for (const auto& s : j.at("scenarios")) {
    const std::string model = s.value("model", "");
    const std::string id = s.value("id", model + "-" + std::to_string(plan.scenarios.size() + 1));
    if (!ids.insert(id).second) throw InputError("duplicate scenario id " + id);
    const std::uint64_t seed = seed_override ? *seed_override : s.value("seed", plan.seed);
    if (model == "trait") {
      TraitScenario t;
      t.id = id;
      t.n = s.value("n", t.n);
      t.r_eta_sq = s.value("r_eta_sq", t.r_eta_sq);
      t.r_y_sq = s.value("r_y_sq", t.r_y_sq);
      t.items_per_trait = s.value("items_per_trait", t.items_per_trait);
      t.replications = s.value("replications", default_reps);
      t.seed = seed;
      t.validate();
      plan.scenarios.emplace_back(t);
    } else if (model == "class") {
      ClassScenario c;
      c.id = id;
      c.n = s.value("n", c.n);
      c.effect = parse_class_effect(s.value("effect", std::string("mild")));
      c.separation = s.value("separation", c.separation);
      c.replications = s.value("replications", default_reps);
      c.seed = seed;
      c.validate();
      plan.scenarios.emplace_back(c);
    } else {
      throw InputError("scenario " + id + ": unknown model '" + model + "' (trait|class)");
    }
  }
  if (plan.scenarios.empty()) throw InputError("study file has no scenarios");
  return plan;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-step estimation of latent class and latent trait models with step-1-aware variances",
               "twostep-lv"};
  app.require_subcommand(1);
  CommonOptions o;
  std::uint64_t seed_value = 0;

  auto add_common = [&](CLI::App* sub, bool fit) {
    if (fit) sub->add_option("--data", o.data, "dataset CSV")->required()->check(CLI::ExistingFile);
    sub->add_option("--config", o.config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--variance", o.variance, "naive|asymptotic|simulation:M (repeatable, comma separated)")
        ->delimiter(',');
    sub->add_option("--seed", seed_value, "random seed (fallback: TWOSTEP_LV_SEED)");
    sub->add_option("--jobs", o.jobs, "maximum concurrent replications or refits")->check(CLI::PositiveNumber);
    sub->add_option("--out", o.out, "output file (fit) or directory (study)");
  };
  CLI::App* fit_lca = app.add_subcommand("fit-lca", "two-step latent class model");
  add_common(fit_lca, true);
  fit_lca->add_option("--step1-cache", o.step1_cache, "step-1 artifact: reused when present, written otherwise");
  CLI::App* fit_irt = app.add_subcommand("fit-irt", "two-step latent trait model");
  add_common(fit_irt, true);
  fit_irt->add_option("--step1-cache", o.step1_cache, "step-1 artifact: reused when present, written otherwise");
  CLI::App* study = app.add_subcommand("study", "simulation study from a study file");
  add_common(study, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  }

  for (auto* sub : {fit_lca, fit_irt, study})
    if (sub->parsed() && sub->count("--seed")) o.seed = seed_value;

  try {
    if (fit_lca->parsed()) return cmd_fit_lca(o, out);
    if (fit_irt->parsed()) return cmd_fit_irt(o, out);
    return cmd_study(o, out, err);
  } catch (const InputError& e) {
    err << "input error: " << e.what() << '\n';
    return kExitInput;
  } catch (const json::exception& e) {
    err << "input error: " << e.what() << '\n';
    return kExitInput;
  } catch (const ConvergenceError& e) {
    err << "convergence failure: " << e.what() << '\n';
    return kExitConvergence;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kExitConvergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace twostep
