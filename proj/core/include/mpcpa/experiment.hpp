#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mpcpa/aggregation.hpp"
#include "mpcpa/classifier.hpp"
#include "mpcpa/datagen.hpp"
#include "mpcpa/diffusion.hpp"
#include "mpcpa/protocol.hpp"

namespace mpcpa::experiment {

using Json = nlohmann::ordered_json;

enum class ArmKind { kMpcpa, kFedAvg, kCentralized, kAblationGrid, kGenCountSweep, kAudit, kBvc };

std::string to_string(ArmKind kind);
ArmKind parse_arm(const std::string& name);

struct ArmSpec {
  ArmKind kind = ArmKind::kMpcpa;
  protocol::CentralizedSource source;  // kCentralized
  std::vector<std::size_t> gen_counts;  // kGenCountSweep
};

struct AuditSettings {
  double delta = 0.1;
  std::size_t mia_size = 200;  // per side; capped by the available data
};

struct FedAvgSettings {
  std::size_t iters = 200;
  std::size_t local_epochs = 1;
  bool weighted = false;
};

// Training-set redraws for the bias-variance-covariance arm. Evaluation sets
// and model seeds stay fixed across trials.
struct BvcSettings {
  std::size_t trials = 10;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::size_t n_clients = 3;
  data::MixtureSpec mixture = data::MixtureSpec::benchmark();
  std::size_t sample_count = 3000;
  // partition.n_clients mirrors the top-level n_clients.
  data::PartitionSpec partition = [] {
    data::PartitionSpec p;
    p.n_clients = 3;
    return p;
  }();
  data::SplitFractions split;
  diffusion::DiffusionTrainConfig diffusion;
  nn::ClassifierSpec classifier;
  std::size_t gen_count = 400;
  aggregation::AggregationMode aggregation;
  AuditSettings audit;
  FedAvgSettings fedavg;
  BvcSettings bvc;
  ArmSpec arm;

  std::size_t num_classes() const { return mixture.num_classes(); }

  // Throws ConfigError naming the offending field ("diffusion.beta_min: ...").
  void validate() const;

  // Unknown keys anywhere are ConfigErrors. Missing keys keep defaults.
  static ExperimentConfig from_json(const Json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  Json to_json() const;
};

// The mixture draw, train/validation/test split and client partition every
// arm starts from.
struct PreparedData {
  data::DatasetSplit split;
  std::vector<data::LabeledDataset> clients;
};

PreparedData prepare_data(const ExperimentConfig& cfg);
protocol::MpcpaConfig mpcpa_config(const ExperimentConfig& cfg, const PreparedData& data, std::size_t parallelism);
protocol::FedAvgConfig fedavg_config(const ExperimentConfig& cfg, const PreparedData& data);

struct AccuracyRow {
  std::string method;
  std::optional<double> validation;
  std::optional<double> test;
};

struct RunOptions {
  std::size_t parallelism = 1;
};

// In-memory outcome of one arm; `write_run` persists it.
struct RunOutcome {
  Json report;  // RunReport: deterministic except report["info"]
  std::vector<std::pair<std::string, std::string>> text_files;    // relative path, contents
  std::vector<std::pair<std::string, Bytes>> binary_files;         // relative path, contents
};

RunOutcome run_arm(const ExperimentConfig& cfg, const RunOptions& options = {});

// Writes into `out_dir`, which must not exist or be empty. Everything is
// staged in a sibling directory and renamed at the end, so a failure leaves
// no partial run directory behind.
void write_run(const RunOutcome& outcome, const std::filesystem::path& out_dir);

// run_arm + write_run.
Json cmd_run(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, const RunOptions& options = {});

// Audit of a persisted mpcpa/audit run directory: memorization scan of every
// source denoiser's generated samples against that source's training data,
// and the loss-threshold attack against every client classifier.
Json audit_run_directory(const std::filesystem::path& run_dir, std::optional<double> delta = std::nullopt,
                         std::optional<std::size_t> mia_size = std::nullopt);

struct ComparisonTable {
  std::string text;  // methods x splits, then the communication summary
  std::string tsv;   // run, arm, method, validation, test, messages, bytes
};

// Reads <dir>/report.json for every directory; FormatError names the path.
ComparisonTable cmd_report(const std::vector<std::filesystem::path>& run_dirs);

// Human-readable rendering of one RunReport.
std::string render_report(const Json& report);

}  // namespace mpcpa::experiment
