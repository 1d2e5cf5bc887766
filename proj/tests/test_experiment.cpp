#include <gtest/gtest.h>

#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mpcpa/error.hpp"
#include "mpcpa/experiment.hpp"

using namespace mpcpa;
using namespace mpcpa::experiment;
namespace fs = std::filesystem;

namespace {

Json quick_json() {
  return Json::parse(R"({
    "seed": 3,
    "n_clients": 3,
    "data": {"count": 300},
    "diffusion": {"steps": 10, "hidden": [8], "epochs": 5, "batch_size": 16, "epoch_scale": null},
    "classifier": {"hidden": [8], "epochs": 5, "batch_size": 16},
    "gen_count": 10,
    "fedavg": {"iters": 3},
    "audit": {"mia_size": 20}
  })");
}

ExperimentConfig quick(const std::string& arm = "mpcpa") {
  auto j = quick_json();
  j["run"]["arm"] = arm;
  return ExperimentConfig::from_json(j);
}

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() / ("mpcpa_test_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                         "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

Json without_info(Json report) {
  report.erase("info");
  return report;
}

std::string config_error(const Json& j) {
  try {
    ExperimentConfig::from_json(j);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "<accepted>";
}

const Json& row(const Json& report, const std::string& method) {
  for (const auto& r : report["accuracies"]) {
    if (r["method"] == method) return r;
  }
  throw std::runtime_error("no row " + method);
}

}  // namespace

TEST(Config, DefaultsAndRoundTrip) {
  const auto def = ExperimentConfig::from_json(Json::object());
  EXPECT_EQ(def.seed, 1u);
  EXPECT_EQ(def.n_clients, 3u);
  EXPECT_EQ(def.num_classes(), 2u);
  EXPECT_EQ(def.gen_count, 400u);
  EXPECT_EQ(def.audit.delta, 0.1);
  EXPECT_EQ(def.arm.kind, ArmKind::kMpcpa);

  const auto cfg = quick();
  const auto again = ExperimentConfig::from_json(cfg.to_json());
  EXPECT_EQ(again.to_json().dump(), cfg.to_json().dump());
  EXPECT_EQ(again.diffusion.steps, 10u);
  EXPECT_FALSE(again.diffusion.epoch_scale.has_value());
}

TEST(Config, UnknownKeysAreErrorsWithPaths) {
  auto j = quick_json();
  j["sed"] = 1;
  EXPECT_EQ(config_error(j), "sed: unknown key");
  j = quick_json();
  j["diffusion"]["beta_mn"] = 0.1;
  EXPECT_EQ(config_error(j), "diffusion.beta_mn: unknown key");
  j = quick_json();
  j["run"] = {{"arm", "mpcpa"}, {"gen_count", 3}};
  EXPECT_EQ(config_error(j), "run.gen_count: unknown key");
}

TEST(Config, TypeErrorsNameTheField) {
  auto j = quick_json();
  j["n_clients"] = -2;
  EXPECT_EQ(config_error(j), "n_clients: expected a nonnegative integer");
  j = quick_json();
  j["diffusion"]["beta_min"] = "small";
  EXPECT_EQ(config_error(j), "diffusion.beta_min: expected a number");
  j = quick_json();
  j["data"] = 5;
  EXPECT_EQ(config_error(j), "data: expected an object");
}

struct Rejection {
  const char* patch;  // JSON merge patch over quick_json()
  const char* field;  // expected message prefix
};

void PrintTo(const Rejection& r, std::ostream* os) { *os << r.patch; }

class ConfigRejection : public ::testing::TestWithParam<Rejection> {};

TEST_P(ConfigRejection, NamesField) {
  auto j = quick_json();
  j.merge_patch(Json::parse(GetParam().patch));
  const std::string msg = config_error(j);
  EXPECT_EQ(msg.rfind(GetParam().field, 0), 0u) << msg;
}

INSTANTIATE_TEST_SUITE_P(
    CrossField, ConfigRejection,
    ::testing::Values(Rejection{R"({"n_clients": 1})", "n_clients:"},
                      Rejection{R"({"num_classes": 3})", "num_classes:"},
                      Rejection{R"({"data": {"means": [[0, 0]], "sigmas": [1], "weights": [1]}})", "data.means:"},
                      Rejection{R"({"data": {"sigmas": [0.2]}})", "data.sigmas:"},
                      Rejection{R"({"data": {"weights": [0.2, 0.3, 0.5]}})", "data.weights:"},
                      Rejection{R"({"data": {"weights": [0.2, 0.3]}})", "data:"},
                      Rejection{R"({"data": {"sigmas": [0.2, -1]}})", "data:"},
                      Rejection{R"({"data": {"count": 0}})", "data.count:"},
                      Rejection{R"({"data": {"count": 3}})", "data.count:"},
                      Rejection{R"({"partition": {"mode": "random"}})", "partition.mode:"},
                      Rejection{R"({"partition": {"mode": "label_skew", "alpha": 0}})", "partition.alpha:"},
                      Rejection{R"({"partition": {"mode": "site_shift", "offsets": [[0, 0]]}})", "partition.offsets:"},
                      Rejection{R"({"partition": {"mode": "site_shift", "offsets": [[0], [0], [0]]}})",
                                "partition.offsets:"},
                      Rejection{R"({"partition": {"max_retries": 0}})", "partition.max_retries:"},
                      Rejection{R"({"split": {"train": 0.8}})", "split:"},
                      Rejection{R"({"split": {"train": 1.0, "validation": 0.0, "test": 0.0}})", "split:"},
                      Rejection{R"({"diffusion": {"steps": 1}})", "diffusion.steps:"},
                      Rejection{R"({"diffusion": {"beta_min": 0}})", "diffusion.beta_min:"},
                      Rejection{R"({"diffusion": {"beta_min": 0.5, "beta_max": 0.1}})", "diffusion.beta_max:"},
                      Rejection{R"({"diffusion": {"beta_max": 1.5}})", "diffusion.beta_max:"},
                      Rejection{R"({"diffusion": {"hidden": [8, 0]}})", "diffusion.hidden:"},
                      Rejection{R"({"diffusion": {"learning_rate": 0}})", "diffusion.learning_rate:"},
                      Rejection{R"({"diffusion": {"epoch_scale": -1}})", "diffusion.epoch_scale:"},
                      Rejection{R"({"classifier": {"batch_size": 0}})", "classifier.batch_size:"},
                      Rejection{R"({"classifier": {"epochs": 0}})", "classifier.epochs:"},
                      Rejection{R"({"aggregation": {"mode": "median"}})", "aggregation.mode:"},
                      Rejection{R"({"aggregation": {"weights": [0.5, 0.5]}})", "aggregation.weights:"},
                      Rejection{R"({"aggregation": {"weights": [0.5, 0.25, 0.5]}})", "aggregation.weights:"},
                      Rejection{R"({"aggregation": {"mode": "vote_weighted"}})", "aggregation.weights:"},
                      Rejection{R"({"aggregation": {"mode": "vote_relative", "weights": [0.2, 0.3, 0.5]}})",
                                "aggregation.weights:"},
                      Rejection{R"({"audit": {"delta": -0.1}})", "audit.delta:"},
                      Rejection{R"({"audit": {"mia_size": 0}})", "audit.mia_size:"},
                      Rejection{R"({"fedavg": {"iters": 0}})", "fedavg.iters:"},
                      Rejection{R"({"run": {"arm": "everything"}})", "run.arm:"},
                      Rejection{R"({"run": {"arm": "centralized", "source": "single_client:3"}})", "run.source:"},
                      Rejection{R"({"run": {"arm": "centralized", "source": "nowhere"}})", "run.source:"},
                      Rejection{R"({"gen_count": 0, "run": {"arm": "centralized", "source": "all_generated"}})",
                                "gen_count:"},
                      Rejection{R"({"gen_count": 0, "run": {"arm": "ablation_grid"}})", "gen_count:"},
                      Rejection{R"({"run": {"arm": "gen_count_sweep"}})", "run.gen_counts:"}),
    [](const ::testing::TestParamInfo<Rejection>& info) {
      std::string name;
      for (const char* c = info.param.field; *c; ++c) {
        if (std::isalnum(static_cast<unsigned char>(*c))) name += *c;
        else if (*c == '.' || *c == '_') name += '_';
      }
      return name + "_" + std::to_string(info.index);
    });

TEST(Config, LoadReportsPathOnBadJson) {
  TempDir tmp;
  const auto p = tmp.path() / "bad.json";
  std::ofstream(p) << "{ nope";
  try {
    ExperimentConfig::load(p);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(p.string()), std::string::npos);
  }
  EXPECT_THROW(ExperimentConfig::load(tmp.path() / "missing.json"), FormatError);
}

TEST(PreparedData, SplitAndPartitionSizes) {
  const auto cfg = quick();
  const auto d = prepare_data(cfg);
  EXPECT_EQ(d.split.train.size(), 210u);
  EXPECT_EQ(d.split.validation.size(), 45u);
  EXPECT_EQ(d.split.test.size(), 45u);
  ASSERT_EQ(d.clients.size(), 3u);
  EXPECT_EQ(d.clients[0].size() + d.clients[1].size() + d.clients[2].size(), 210u);
}

TEST(RunArm, MpcpaPersistsEverything) {
  TempDir tmp;
  const auto out = tmp.path() / "run";
  const auto report = cmd_run(quick(), out);
  EXPECT_EQ(report["ledger"]["total"], 9);
  EXPECT_EQ(report["ledger"]["by_kind"]["DdpmUpload"], 3);
  EXPECT_EQ(report["accuracies"].size(), 4u);
  for (const auto& r : report["accuracies"]) {
    EXPECT_GE(r["test"].get<double>(), 0.0);
    EXPECT_LE(r["test"].get<double>(), 1.0);
  }
  for (const auto& name : report["artifacts"]) EXPECT_TRUE(fs::exists(out / name.get<std::string>())) << name;
  EXPECT_TRUE(fs::exists(out / "denoiser2.mpdd"));
  EXPECT_TRUE(fs::exists(out / "ledger.jsonl"));
  std::ifstream in(out / "report.json");
  EXPECT_EQ(without_info(Json::parse(in)), without_info(report));
  // No staging directory is left next to the run.
  std::size_t entries = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(tmp.path())) ++entries;
  EXPECT_EQ(entries, 1u);
}

TEST(RunArm, ReportsAreDeterministicAndSelfDescribing) {
  TempDir tmp;
  const auto a = cmd_run(quick(), tmp.path() / "a", {1});
  const auto b = cmd_run(quick(), tmp.path() / "b", {3});
  EXPECT_EQ(without_info(a).dump(), without_info(b).dump());
  const auto echoed = ExperimentConfig::load(tmp.path() / "a" / "config.json");
  const auto c = cmd_run(echoed, tmp.path() / "c");
  EXPECT_EQ(without_info(a).dump(), without_info(c).dump());
  for (const char* f : {"denoiser0.mpdd", "classifier1.mpnn", "synthetic2.txt", "ledger.jsonl"}) {
    std::ifstream x(tmp.path() / "a" / f, std::ios::binary), y(tmp.path() / "b" / f, std::ios::binary);
    std::stringstream xs, ys;
    xs << x.rdbuf();
    ys << y.rdbuf();
    EXPECT_EQ(xs.str(), ys.str()) << f;
  }
}

TEST(RunArm, FedAvgCountsTwoNIters) {
  auto j = quick_json();
  j["run"]["arm"] = "fedavg";
  j["fedavg"] = {{"iters", 200}, {"local_epochs", 0}};
  j["classifier"]["hidden"] = Json::array();
  const auto report = run_arm(ExperimentConfig::from_json(j)).report;
  EXPECT_EQ(report["ledger"]["total"], 1200);
  EXPECT_EQ(report["ledger"]["by_kind"]["FedAvgUpdate"], 600);
  EXPECT_EQ(report["accuracies"][0]["method"], "FedAvg");
}

TEST(RunArm, CentralizedReportsOneRow) {
  auto j = quick_json();
  j["run"] = {{"arm", "centralized"}, {"source", "client_plus_generated:1"}};
  const auto out = run_arm(ExperimentConfig::from_json(j));
  ASSERT_EQ(out.report["accuracies"].size(), 1u);
  EXPECT_EQ(out.report["accuracies"][0]["method"], "B2");
  const auto data = prepare_data(ExperimentConfig::from_json(j));
  EXPECT_EQ(out.report["train_size"], data.clients[1].size() + 2 * 2 * 10);
  EXPECT_FALSE(out.report.contains("ledger"));
}

TEST(RunArm, AblationGridAndZeroSweepAgree) {
  const auto grid = run_arm(quick("ablation_grid")).report;
  std::vector<std::string> methods;
  for (const auto& r : grid["accuracies"]) methods.push_back(r["method"]);
  EXPECT_EQ(methods, (std::vector<std::string>{"all_original", "all_generated", "A1", "A2", "A3", "B1", "B2", "B3",
                                               "aggregate(A)", "aggregate(B)"}));

  auto j = quick_json();
  j["run"] = {{"arm", "gen_count_sweep"}, {"gen_counts", {0, 10}}};
  const auto sweep = run_arm(ExperimentConfig::from_json(j)).report;
  for (int k = 1; k <= 3; ++k) {
    const std::string a = "A" + std::to_string(k), b = "B" + std::to_string(k);
    EXPECT_EQ(row(sweep, b + "@0"), Json({{"method", b + "@0"}, {"validation", row(grid, a)["validation"]},
                                          {"test", row(grid, a)["test"]}}));
    EXPECT_EQ(row(sweep, b + "@10")["test"], row(grid, b)["test"]);
  }
  EXPECT_EQ(row(sweep, "aggregate(B)@0")["test"], row(grid, "aggregate(A)")["test"]);
  EXPECT_EQ(row(sweep, "aggregate(B)@0")["validation"], row(grid, "aggregate(A)")["validation"]);
  EXPECT_EQ(row(sweep, "aggregate(B)@10")["test"], row(grid, "aggregate(B)")["test"]);
}

TEST(RunArm, MpcpaClientsMatchAblationB) {
  const auto m = run_arm(quick("mpcpa")).report;
  const auto grid = run_arm(quick("ablation_grid")).report;
  for (int k = 1; k <= 3; ++k) {
    EXPECT_EQ(row(m, "C" + std::to_string(k))["test"], row(grid, "B" + std::to_string(k))["test"]);
  }
  EXPECT_EQ(row(m, "MPCPA")["test"], row(grid, "aggregate(B)")["test"]);
}

TEST(RunArm, AuditMatchesOfflineAudit) {
  TempDir tmp;
  const auto report = cmd_run(quick("audit"), tmp.path() / "run");
  ASSERT_TRUE(report.contains("audit"));
  EXPECT_EQ(report["audit"]["memorization"].size(), 3u);
  EXPECT_EQ(report["audit"]["mia"].size(), 3u);
  for (const auto& m : report["audit"]["mia"]) {
    EXPECT_GE(m["best_accuracy"].get<double>(), 0.5);
    EXPECT_LE(m["size"].get<std::size_t>(), 20u);
  }
  EXPECT_TRUE(fs::exists(tmp.path() / "run" / "mia_client0.tsv"));
  EXPECT_EQ(audit_run_directory(tmp.path() / "run"), report["audit"]);
  const auto strict = audit_run_directory(tmp.path() / "run", 0.0, 5);
  EXPECT_EQ(strict["delta"], 0.0);
  EXPECT_EQ(strict["mia"][0]["size"], 5);
  EXPECT_THROW(audit_run_directory(tmp.path() / "nowhere"), FormatError);
}

TEST(WriteRun, RefusesNonEmptyDirectoriesAndLeavesNothingOnFailure) {
  TempDir tmp;
  const auto out = tmp.path() / "busy";
  fs::create_directories(out);
  std::ofstream(out / "keep.txt") << "x";
  EXPECT_THROW(cmd_run(quick(), out), ConfigError);
  EXPECT_TRUE(fs::exists(out / "keep.txt"));

  fs::create_directories(tmp.path() / "empty");
  EXPECT_NO_THROW(cmd_run(quick("centralized"), tmp.path() / "empty"));
  EXPECT_TRUE(fs::exists(tmp.path() / "empty" / "report.json"));

  auto bad = quick();
  bad.n_clients = 1;
  EXPECT_THROW(cmd_run(bad, tmp.path() / "never"), ConfigError);
  EXPECT_FALSE(fs::exists(tmp.path() / "never"));
}

TEST(Report, SingleCentralizedRunHasOneRow) {
  TempDir tmp;
  cmd_run(quick("centralized"), tmp.path() / "solo");
  const auto t = cmd_report({tmp.path() / "solo"});
  std::istringstream lines(t.tsv);
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) ++n;
  EXPECT_EQ(n, 2u);
  EXPECT_NE(t.text.find("all_original"), std::string::npos);
  EXPECT_EQ(t.text.find("Communication"), std::string::npos);
}

TEST(Report, CellsPassThroughExactly) {
  TempDir tmp;
  const auto m = cmd_run(quick("mpcpa"), tmp.path() / "m");
  const auto f = cmd_run(quick("fedavg"), tmp.path() / "f");
  const auto t = cmd_report({tmp.path() / "m", tmp.path() / "f"});
  EXPECT_NE(t.text.find("Communication"), std::string::npos);
  std::istringstream lines(t.tsv);
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, "run\tarm\tmethod\tvalidation\ttest\tmessages\tbytes");
  std::size_t rows = 0;
  while (std::getline(lines, line)) {
    std::istringstream cells(line);
    std::string run, arm, method, val, test, msgs, bytes;
    std::getline(cells, run, '\t');
    std::getline(cells, arm, '\t');
    std::getline(cells, method, '\t');
    std::getline(cells, val, '\t');
    std::getline(cells, test, '\t');
    std::getline(cells, msgs, '\t');
    std::getline(cells, bytes, '\t');
    const Json& src = run == "m" ? m : f;
    const auto& r = row(src, method);
    EXPECT_EQ(std::stod(val), r["validation"].get<double>());
    EXPECT_EQ(std::stod(test), r["test"].get<double>());
    EXPECT_EQ(std::stoull(msgs), src["ledger"]["total"].get<std::uint64_t>());
    EXPECT_EQ(std::stoull(bytes), src["ledger"]["total_bytes"].get<std::uint64_t>());
    ++rows;
  }
  EXPECT_EQ(rows, 5u);
}

TEST(Report, MissingOrCorruptReportsNameThePath) {
  TempDir tmp;
  fs::create_directories(tmp.path() / "empty");
  fs::create_directories(tmp.path() / "corrupt");
  std::ofstream(tmp.path() / "corrupt" / "report.json") << "{\"arm\": ";
  for (const char* d : {"empty", "corrupt"}) {
    try {
      cmd_report({tmp.path() / d});
      ADD_FAILURE() << d;
    } catch (const FormatError& e) {
      EXPECT_NE(std::string(e.what()).find((tmp.path() / d / "report.json").string()), std::string::npos);
    }
  }
}

TEST(Render, HumanReadableSummary) {
  const auto report = run_arm(quick("mpcpa")).report;
  const auto text = render_report(report);
  EXPECT_NE(text.find("arm: mpcpa"), std::string::npos);
  EXPECT_NE(text.find("MPCPA"), std::string::npos);
  EXPECT_NE(text.find("communication: 9 messages"), std::string::npos);
}

TEST(RunArm, BvcDecomposesBothEnsembles) {
  auto j = quick_json();
  j["run"]["arm"] = "bvc";
  j["bvc"]["trials"] = 3;
  const auto cfg = ExperimentConfig::from_json(j);
  const auto a = run_arm(cfg).report;
  const auto b = run_arm(cfg, {3}).report;
  EXPECT_EQ(without_info(a).dump(), without_info(b).dump());
  ASSERT_TRUE(a.contains("bvc"));
  EXPECT_EQ(a["bvc"]["trials"], 3);
  EXPECT_EQ(a["bvc"]["samples"], 45);
  for (const char* which : {"mpcpa", "local"}) {
    const auto& d = a["bvc"][which];
    EXPECT_EQ(d["learners"], 3);
    EXPECT_LE(d["reconstruction_residual"].get<double>(), 1e-10);
    EXPECT_GE(d["variance"].get<double>(), 0.0);
    const double mse = d["ensemble_mse"].get<double>();
    EXPECT_NEAR(mse,
                d["bias_sq"].get<double>() + d["variance"].get<double>() / 3 +
                    (2.0 / 3.0) * d["covariance"].get<double>(),
                1e-12);
  }
  EXPECT_EQ(a["accuracies"].size(), 2u);
  EXPECT_NE(render_report(a).find("bias-variance-covariance over 3 training draws"), std::string::npos);

  j["bvc"]["trials"] = 1;
  EXPECT_EQ(config_error(j).rfind("bvc.trials:", 0), 0u);
}
