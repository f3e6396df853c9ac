#include "twostep/cli.hpp"
#include "twostep/dataset_io.hpp"
#include "twostep/report.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

using namespace twostep;
namespace fs = std::filesystem;

namespace {

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "twostep-lv");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "twostep-cli-test" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& path, const std::string& text) { std::ofstream(path) << text; }

std::string read_file(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string class_items_json() {
  json items = json::array();
  for (int k = 1; k <= 10; ++k) items.push_back("item." + std::to_string(k));
  return json{{"blocks", {{{"name", "eta"}, {"items", items}}}}, {"categories", 2}}.dump();
}

}  // namespace

TEST_CASE("config hash") {
  const std::string h = config_hash(json{{"b", 1}, {"a", {1, 2}}});
  CHECK(std::regex_match(h, std::regex("fnv1a64:[0-9a-f]{16}")));
  CHECK(h == config_hash(json::parse(R"({"a": [1, 2], "b": 1})")));
  CHECK(h != config_hash(json{{"b", 2}, {"a", {1, 2}}}));
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("step-1 cache round trip") {
  Step1Cache c;
  c.model = "irt";
  c.theta1 = ParamVector(VectorXd::LinSpaced(2, 0.25, 1.5), {"tau(a)", "lambda(a)"});
  MatrixXd s(2, 2);
  s << 0.04, 0.01, 0.01, 0.09;
  c.sigma11 = CovMatrix(s, c.theta1.names());
  c.shape = {{"nodes", 31}};
  c.seed = 11;
  c.draw_seed = 0xfeedfacecafebeefULL;
  c.draws = MatrixXd::Random(3, 2) / 3.0;
  const Step1Cache back = step1_cache_from_json(json::parse(to_json(c).dump()));
  CHECK(back.model == "irt");
  CHECK(back.theta1.names() == c.theta1.names());
  CHECK(back.theta1.values() == c.theta1.values());
  CHECK(back.sigma11.m == c.sigma11.m);
  CHECK(back.draws == c.draws);
  CHECK(back.draw_seed == c.draw_seed);
  CHECK(back.shape == c.shape);
  CHECK_THROWS_AS(step1_cache_from_json(json{{"schema", "other"}}), InputError);
}

TEST_CASE("study plan parsing") {
  const json ok = json::parse(R"({"seed": 5, "estimators": ["naive", "simulation:20"],
    "scenarios": [{"id": "a", "model": "trait", "n": 300, "r_eta_sq": 0.2, "r_y_sq": 0.6},
                  {"id": "b", "model": "class", "n": 300, "effect": "mild", "separation": 0.87}]})");
  const StudyPlan p = parse_study_plan(ok);
  CHECK(p.seed == 5);
  CHECK(p.scenarios.size() == 2);
  CHECK(p.estimators.labels() == std::vector<std::string>{"naive", "simulation:20"});
  CHECK(parse_study_plan(ok, 9).seed == 9);

  json dup = ok;
  dup["scenarios"][1]["id"] = "a";
  CHECK_THROWS_AS(parse_study_plan(dup), InputError);
  json model = ok;
  model["scenarios"][0]["model"] = "factor";
  CHECK_THROWS_AS(parse_study_plan(model), InputError);
  json reps = ok;
  reps["replications"] = 1;
  CHECK_THROWS_AS(parse_study_plan(reps), InputError);
  json est = ok;
  est["estimators"] = {"bootstrap"};
  CHECK_THROWS_AS(parse_study_plan(est), InputError);
}

TEST_CASE("exit codes") {
  const fs::path dir = scratch("exit");
  CHECK(cli({"--help"}).code == 0);
  CHECK(cli({"fit-lca", "--bogus"}).code == kExitInput);
  CHECK(cli({"study", "--config", (dir / "missing.json").string()}).code == kExitInput);

  write_file(dir / "data.csv", "item.1,item.2\n1,2\n2,1\n");
  write_file(dir / "irt.json", R"({"items": {"blocks": [{"name": "eta1", "items": ["item.1", "item.2", "item.3"]}],
      "categories": 2}, "equations": []})");
  const CliRun r = cli({"fit-irt", "--data", (dir / "data.csv").string(), "--config", (dir / "irt.json").string()});
  CHECK(r.code == kExitInput);
  CHECK(r.err.find("item.3") != std::string::npos);

  write_file(dir / "study.json",
             R"({"replications": 1, "scenarios": [{"id": "a", "model": "trait", "n": 300}]})");
  CHECK(cli({"study", "--config", (dir / "study.json").string(), "--out", (dir / "o").string()}).code == kExitInput);

  write_file(dir / "bad.json", "{not json");
  CHECK(cli({"fit-lca", "--data", (dir / "data.csv").string(), "--config", (dir / "bad.json").string()}).code ==
        kExitInput);
}

TEST_CASE("fit-lca end to end") {
  const fs::path dir = scratch("lca");
  ClassScenario s;
  s.n = 1000;
  s.effect = ClassEffect::mild;
  const ClassSample sample = gen_class_data(s, 0);
  {
    std::ofstream csv(dir / "data.csv");
    write_dataset_csv(sample.data, csv);
  }
  write_file(dir / "config.json", R"({"items": )" + class_items_json() + R"(, "classes": 3,
      "structural": {"form": "covariate", "covariates": ["z.x"]}, "step1": {"starts": 5}})");
  const std::vector<std::string> base{"fit-lca",   "--data", (dir / "data.csv").string(),
                                      "--config",  (dir / "config.json").string(),
                                      "--variance", "naive,asymptotic,simulation:100",
                                      "--seed",    "4"};

  const CliRun first = cli(base);
  REQUIRE(first.code == 0);
  const json result = json::parse(first.out);
  for (const char* key : {"schema", "command", "seed", "config_hash", "config", "data", "step1", "step2", "variance"})
    CHECK(result.contains(key));
  CHECK(result["schema"] == kResultSchema);
  CHECK(result["seed"] == 4);
  CHECK(result["data"]["n"] == 1000);
  REQUIRE(result["variance"].size() == 3);
  CHECK(result["variance"][2]["method"] == "simulation:100");
  CHECK(result["variance"][2]["draws_used"] == 100);

  const auto names = result["step2"]["names"].get<std::vector<std::string>>();
  CHECK(names == std::vector<std::string>{"beta0(2)", "beta(z.x,2)", "beta0(3)", "beta(z.x,3)"});
  const auto naive = result["variance"][0]["se"].get<std::vector<double>>();
  const auto asym = result["variance"][1]["se"].get<std::vector<double>>();
  const auto sim = result["variance"][2]["se"].get<std::vector<double>>();
  for (std::size_t i = 0; i < names.size(); ++i) {
    CHECK(naive[i] > 0);
    CHECK(naive[i] <= asym[i]);
    CHECK(naive[i] <= sim[i]);
  }

  SUBCASE("rerun through the step-1 cache reproduces the result") {
    std::vector<std::string> cached = base;
    cached.push_back("--step1-cache");
    cached.push_back((dir / "step1.json").string());
    const CliRun write = cli(cached);
    REQUIRE(write.code == 0);
    CHECK(fs::exists(dir / "step1.json"));
    const CliRun read = cli(cached);
    REQUIRE(read.code == 0);
    const json a = json::parse(write.out), b = json::parse(read.out);
    CHECK(a["step2"] == b["step2"]);
    CHECK(a["variance"] == b["variance"]);
    CHECK(a["step2"] == result["step2"]);
    CHECK(a["variance"] == result["variance"]);
    CHECK(b["step1"]["source"] == "cache");
  }

  SUBCASE("--out writes the document and prints a summary") {
    std::vector<std::string> args = base;
    args.push_back("--out");
    args.push_back((dir / "fit.json").string());
    const CliRun r = cli(args);
    REQUIRE(r.code == 0);
    CHECK(json::parse(read_file(dir / "fit.json"))["step2"] == result["step2"]);
    CHECK(r.out.find("beta(z.x,2)") != std::string::npos);
  }
}

TEST_CASE("study command") {
  const fs::path dir = scratch("study");
  write_file(dir / "study.json", R"({"seed": 3, "replications": 3,
      "estimators": ["naive", "asymptotic", "simulation:20"],
      "scenarios": [{"id": "t", "model": "trait", "n": 300, "r_eta_sq": 0.2, "r_y_sq": 0.6},
                    {"id": "c", "model": "class", "n": 300, "effect": "none", "separation": 0.91}]})");
  const auto run = [&](const std::string& out, const std::string& jobs) {
    return cli({"study", "--config", (dir / "study.json").string(), "--out", (dir / out).string(), "--jobs", jobs});
  };
  const CliRun a = run("a", "1");
  const CliRun b = run("b", "2");
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  for (const char* f : {"replications.csv", "metrics.csv", "tables.txt"})
    CHECK(read_file(dir / "a" / f) == read_file(dir / "b" / f));
  CHECK(a.out.find("M=20") != std::string::npos);
  const json summary = json::parse(read_file(dir / "a" / "study.json"));
  CHECK(summary["schema"] == "twostep-lv/study/1");
  CHECK(summary["scenarios"].size() == 2);
  CHECK(summary["scenarios"][0]["parameter"] == "eta2~eta1");
}
