#include "mpcpa/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "mpcpa/error.hpp"
#include "mpcpa/privacy_audit.hpp"
#include "mpcpa/rng.hpp"

namespace mpcpa::experiment {
namespace fs = std::filesystem;

std::string to_string(ArmKind kind) {
  switch (kind) {
    case ArmKind::kMpcpa: return "mpcpa";
    case ArmKind::kFedAvg: return "fedavg";
    case ArmKind::kCentralized: return "centralized";
    case ArmKind::kAblationGrid: return "ablation_grid";
    case ArmKind::kGenCountSweep: return "gen_count_sweep";
    case ArmKind::kAudit: return "audit";
    case ArmKind::kBvc: return "bvc";
  }
  return "?";
}

ArmKind parse_arm(const std::string& name) {
  for (auto k : {ArmKind::kMpcpa, ArmKind::kFedAvg, ArmKind::kCentralized, ArmKind::kAblationGrid,
                 ArmKind::kGenCountSweep, ArmKind::kAudit, ArmKind::kBvc}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("run.arm: unknown arm '" + name + "'");
}

namespace {

// Strict reader over one JSON object: every key must be consumed.
class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail("", "expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    throw ConfigError(field(key) + ": " + what);
  }

  std::string field(const std::string& key) const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  const Json* take(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void count(const std::string& key, std::size_t& out) {
    if (const Json* v = take(key)) out = as_count(*v, key);
  }
  void u64(const std::string& key, std::uint64_t& out) {
    if (const Json* v = take(key)) {
      if (!nonnegative_integer(*v)) fail(key, "expected a nonnegative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void real(const std::string& key, double& out) {
    if (const Json* v = take(key)) out = as_real(*v, key);
  }
  void boolean(const std::string& key, bool& out) {
    if (const Json* v = take(key)) {
      if (!v->is_boolean()) fail(key, "expected true or false");
      out = v->get<bool>();
    }
  }
  void string(const std::string& key, std::string& out) {
    if (const Json* v = take(key)) {
      if (!v->is_string()) fail(key, "expected a string");
      out = v->get<std::string>();
    }
  }
  void counts(const std::string& key, std::vector<std::size_t>& out) {
    if (const Json* v = take(key)) {
      if (!v->is_array()) fail(key, "expected an array of nonnegative integers");
      out.clear();
      for (const auto& e : *v) out.push_back(as_count(e, key));
    }
  }
  void reals(const std::string& key, std::vector<double>& out) {
    if (const Json* v = take(key)) {
      if (!v->is_array()) fail(key, "expected an array of numbers");
      out.clear();
      for (const auto& e : *v) out.push_back(as_real(e, key));
    }
  }
  void vectors(const std::string& key, std::vector<RealVector>& out) {
    if (const Json* v = take(key)) {
      if (!v->is_array()) fail(key, "expected an array of number arrays");
      out.clear();
      for (const auto& row : *v) {
        if (!row.is_array()) fail(key, "expected an array of number arrays");
        RealVector r;
        for (const auto& e : row) r.push_back(as_real(e, key));
        out.push_back(std::move(r));
      }
    }
  }

  std::optional<Section> child(const std::string& key) {
    const Json* v = take(key);
    if (!v) return std::nullopt;
    return Section(*v, field(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) fail(it.key(), "unknown key");
    }
  }

 private:
  // Parsed documents store positive integers as unsigned, values built in
  // code as signed; both are fine as long as they are not negative.
  static bool nonnegative_integer(const Json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  }
  std::size_t as_count(const Json& v, const std::string& key) const {
    if (!nonnegative_integer(v)) fail(key, "expected a nonnegative integer");
    return v.get<std::size_t>();
  }
  double as_real(const Json& v, const std::string& key) const {
    if (!v.is_number()) fail(key, "expected a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) fail(key, "expected a finite number");
    return d;
  }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string partition_mode_name(data::PartitionMode m) {
  switch (m) {
    case data::PartitionMode::kIid: return "iid";
    case data::PartitionMode::kLabelSkew: return "label_skew";
    case data::PartitionMode::kSiteShift: return "site_shift";
  }
  return "?";
}

data::PartitionMode parse_partition_mode(const std::string& s) {
  if (s == "iid") return data::PartitionMode::kIid;
  if (s == "label_skew") return data::PartitionMode::kLabelSkew;
  if (s == "site_shift") return data::PartitionMode::kSiteShift;
  throw ConfigError("partition.mode: unknown mode '" + s + "' (iid, label_skew, site_shift)");
}

std::string source_spec(const protocol::CentralizedSource& s) {
  using Kind = protocol::CentralizedSource::Kind;
  switch (s.kind) {
    case Kind::kAllOriginal: return "all_original";
    case Kind::kAllGenerated: return "all_generated";
    case Kind::kSingleClient: return "single_client:" + std::to_string(s.client);
    case Kind::kClientPlusGenerated: return "client_plus_generated:" + std::to_string(s.client);
  }
  return "?";
}

void check(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError(field + ": " + what);
}

void check_train(const nn::TrainConfig& t, const std::string& prefix) {
  check(t.learning_rate > 0.0, prefix + ".learning_rate", "must be > 0");
  check(t.epochs >= 1, prefix + ".epochs", "must be >= 1");
  check(t.batch_size >= 1, prefix + ".batch_size", "must be >= 1");
}

void check_hidden(const std::vector<std::size_t>& h, const std::string& field) {
  check(std::all_of(h.begin(), h.end(), [](std::size_t w) { return w > 0; }), field, "widths must be positive");
}

}  // namespace

void ExperimentConfig::validate() const {
  check(n_clients >= 2, "n_clients", "must be >= 2");
  check(!mixture.classes.empty(), "data.means", "at least one class mean required");
  check(mixture.classes.size() >= 2, "data.means", "at least two classes required");
  check(mixture.weights.size() == mixture.classes.size(), "data.weights",
        "expected one weight per class (" + std::to_string(mixture.classes.size()) + ")");
  try {
    mixture.validate();
  } catch (const InvalidInput& e) {
    throw ConfigError(std::string("data: ") + e.what());
  }
  check(sample_count >= 1, "data.count", "must be >= 1");

  check(partition.n_clients == n_clients, "partition", "client count must mirror n_clients");
  if (partition.mode == data::PartitionMode::kLabelSkew) check(partition.alpha > 0.0, "partition.alpha", "must be > 0");
  if (partition.mode == data::PartitionMode::kSiteShift) {
    check(partition.offsets.size() == n_clients, "partition.offsets", "expected one offset per client");
    for (const auto& o : partition.offsets) check(o.size() == mixture.dim(), "partition.offsets", "offset dim must equal data dim");
  }
  check(partition.max_retries >= 1, "partition.max_retries", "must be >= 1");

  check(split.train > 0.0 && split.validation > 0.0 && split.test > 0.0, "split", "every fraction must be positive");
  check(std::abs(split.train + split.validation + split.test - 1.0) <= 1e-9, "split", "fractions must sum to 1");
  check(std::llround(split.train * static_cast<double>(sample_count)) >= static_cast<long long>(n_clients), "data.count",
        "training split too small to give every client a point");

  check(diffusion.steps >= 2, "diffusion.steps", "must be >= 2");
  check(diffusion.beta_min > 0.0, "diffusion.beta_min", "must be > 0");
  check(diffusion.beta_min < diffusion.beta_max, "diffusion.beta_max", "must exceed beta_min");
  check(diffusion.beta_max < 1.0, "diffusion.beta_max", "must be < 1");
  check_hidden(diffusion.hidden, "diffusion.hidden");
  check_train(diffusion.train, "diffusion");
  if (diffusion.epoch_scale) check(*diffusion.epoch_scale > 0.0, "diffusion.epoch_scale", "must be > 0");

  check_hidden(classifier.hidden, "classifier.hidden");
  check_train(classifier.train, "classifier");

  using AK = aggregation::AggregationMode::Kind;
  if (!aggregation.weights.empty()) {
    check(aggregation.kind == AK::kAverage || aggregation.kind == AK::kVoteWeighted, "aggregation.weights",
          "only average and vote_weighted accept weights");
    check(aggregation.weights.size() == n_clients, "aggregation.weights", "expected one weight per client");
    double sum = 0.0;
    for (double w : aggregation.weights) {
      check(w >= 0.0, "aggregation.weights", "must be nonnegative");
      sum += w;
    }
    check(std::abs(sum - 1.0) <= 1e-9, "aggregation.weights", "must sum to 1");
  }
  if (aggregation.kind == AK::kVoteWeighted) check(!aggregation.weights.empty(), "aggregation.weights", "required for vote_weighted");

  check(audit.delta >= 0.0, "audit.delta", "must be >= 0");
  check(audit.mia_size >= 1, "audit.mia_size", "must be >= 1");
  check(fedavg.iters >= 1, "fedavg.iters", "must be >= 1");
  check(bvc.trials >= 2, "bvc.trials", "must be >= 2");

  using SK = protocol::CentralizedSource::Kind;
  if (arm.kind == ArmKind::kCentralized) {
    if (arm.source.kind == SK::kSingleClient || arm.source.kind == SK::kClientPlusGenerated) {
      check(arm.source.client < n_clients, "run.source", "client index must be < n_clients");
    }
    if (arm.source.kind == SK::kAllGenerated) check(gen_count > 0, "gen_count", "all_generated needs gen_count > 0");
  }
  if (arm.kind == ArmKind::kAblationGrid) check(gen_count > 0, "gen_count", "ablation_grid needs gen_count > 0");
  if (arm.kind == ArmKind::kGenCountSweep) check(!arm.gen_counts.empty(), "run.gen_counts", "at least one count required");
}

ExperimentConfig ExperimentConfig::from_json(const Json& j) {
  ExperimentConfig c;
  Section root(j, "");
  root.u64("seed", c.seed);
  root.count("n_clients", c.n_clients);
  std::optional<std::size_t> declared_classes;
  if (root.has("num_classes")) {
    std::size_t n = 0;
    root.count("num_classes", n);
    declared_classes = n;
  }
  root.count("gen_count", c.gen_count);

  if (auto s = root.child("data")) {
    s->count("count", c.sample_count);
    std::vector<RealVector> means;
    std::vector<double> sigmas, weights;
    for (const auto& comp : c.mixture.classes) {
      means.push_back(comp.mean);
      sigmas.push_back(comp.sigma);
    }
    weights = c.mixture.weights;
    s->vectors("means", means);
    s->reals("sigmas", sigmas);
    s->reals("weights", weights);
    s->finish();
    if (sigmas.size() != means.size()) throw ConfigError("data.sigmas: expected one sigma per class mean");
    c.mixture.classes.clear();
    for (std::size_t k = 0; k < means.size(); ++k) c.mixture.classes.push_back({means[k], sigmas[k]});
    c.mixture.weights = weights;
  }
  if (declared_classes && *declared_classes != c.mixture.num_classes()) {
    throw ConfigError("num_classes: declared " + std::to_string(*declared_classes) + " but data.means defines " +
                      std::to_string(c.mixture.num_classes()) + " classes");
  }

  if (auto s = root.child("partition")) {
    std::string mode = partition_mode_name(c.partition.mode);
    s->string("mode", mode);
    c.partition.mode = parse_partition_mode(mode);
    s->real("alpha", c.partition.alpha);
    s->vectors("offsets", c.partition.offsets);
    s->count("max_retries", c.partition.max_retries);
    s->finish();
  }
  c.partition.n_clients = c.n_clients;

  if (auto s = root.child("split")) {
    s->real("train", c.split.train);
    s->real("validation", c.split.validation);
    s->real("test", c.split.test);
    s->finish();
  }

  if (auto s = root.child("diffusion")) {
    s->count("steps", c.diffusion.steps);
    s->real("beta_min", c.diffusion.beta_min);
    s->real("beta_max", c.diffusion.beta_max);
    s->counts("hidden", c.diffusion.hidden);
    s->real("learning_rate", c.diffusion.train.learning_rate);
    s->count("batch_size", c.diffusion.train.batch_size);
    s->count("epochs", c.diffusion.train.epochs);
    if (const Json* v = s->take("epoch_scale")) {
      if (v->is_null()) {
        c.diffusion.epoch_scale.reset();
      } else {
        if (!v->is_number()) s->fail("epoch_scale", "expected a number or null");
        c.diffusion.epoch_scale = v->get<double>();
      }
    }
    s->finish();
  }

  if (auto s = root.child("classifier")) {
    s->counts("hidden", c.classifier.hidden);
    s->real("learning_rate", c.classifier.train.learning_rate);
    s->count("batch_size", c.classifier.train.batch_size);
    s->count("epochs", c.classifier.train.epochs);
    s->finish();
  }

  if (auto s = root.child("aggregation")) {
    std::string mode = c.aggregation.name();
    s->string("mode", mode);
    try {
      c.aggregation.kind = aggregation::AggregationMode::parse(mode).kind;
    } catch (const InvalidInput& e) {
      throw ConfigError(std::string("aggregation.mode: ") + e.what());
    }
    s->reals("weights", c.aggregation.weights);
    s->finish();
  }

  if (auto s = root.child("audit")) {
    s->real("delta", c.audit.delta);
    s->count("mia_size", c.audit.mia_size);
    s->finish();
  }

  if (auto s = root.child("fedavg")) {
    s->count("iters", c.fedavg.iters);
    s->count("local_epochs", c.fedavg.local_epochs);
    s->boolean("weighted", c.fedavg.weighted);
    s->finish();
  }

  if (auto s = root.child("bvc")) {
    s->count("trials", c.bvc.trials);
    s->finish();
  }

  if (auto s = root.child("run")) {
    std::string arm = to_string(c.arm.kind);
    s->string("arm", arm);
    c.arm.kind = parse_arm(arm);
    std::string source = source_spec(c.arm.source);
    s->string("source", source);
    try {
      c.arm.source = protocol::CentralizedSource::parse(source);
    } catch (const InvalidInput& e) {
      throw ConfigError(std::string("run.source: ") + e.what());
    }
    s->counts("gen_counts", c.arm.gen_counts);
    s->finish();
  }
  root.finish();
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": not valid JSON: " + e.what());
  }
  return from_json(j);
}

Json ExperimentConfig::to_json() const {
  Json j;
  j["seed"] = seed;
  j["n_clients"] = n_clients;
  j["num_classes"] = num_classes();
  j["gen_count"] = gen_count;
  Json means = Json::array(), sigmas = Json::array();
  for (const auto& comp : mixture.classes) {
    means.push_back(comp.mean);
    sigmas.push_back(comp.sigma);
  }
  j["data"] = {{"count", sample_count}, {"means", means}, {"sigmas", sigmas}, {"weights", mixture.weights}};
  j["partition"] = {{"mode", partition_mode_name(partition.mode)},
                    {"alpha", partition.alpha},
                    {"offsets", partition.offsets},
                    {"max_retries", partition.max_retries}};
  j["split"] = {{"train", split.train}, {"validation", split.validation}, {"test", split.test}};
  j["diffusion"] = {{"steps", diffusion.steps},
                    {"beta_min", diffusion.beta_min},
                    {"beta_max", diffusion.beta_max},
                    {"hidden", diffusion.hidden},
                    {"learning_rate", diffusion.train.learning_rate},
                    {"batch_size", diffusion.train.batch_size},
                    {"epochs", diffusion.train.epochs},
                    {"epoch_scale", diffusion.epoch_scale ? Json(*diffusion.epoch_scale) : Json(nullptr)}};
  j["classifier"] = {{"hidden", classifier.hidden},
                     {"learning_rate", classifier.train.learning_rate},
                     {"batch_size", classifier.train.batch_size},
                     {"epochs", classifier.train.epochs}};
  j["aggregation"] = {{"mode", aggregation.name()}, {"weights", aggregation.weights}};
  j["audit"] = {{"delta", audit.delta}, {"mia_size", audit.mia_size}};
  j["fedavg"] = {{"iters", fedavg.iters}, {"local_epochs", fedavg.local_epochs}, {"weighted", fedavg.weighted}};
  j["bvc"] = {{"trials", bvc.trials}};
  j["run"] = {{"arm", to_string(arm.kind)}, {"source", source_spec(arm.source)}, {"gen_counts", arm.gen_counts}};
  return j;
}

PreparedData prepare_data(const ExperimentConfig& cfg) {
  cfg.validate();
  PreparedData p;
  const auto full = data::generate_mixture(cfg.mixture, cfg.sample_count, derive_seed(cfg.seed, Stream::kMixture));
  p.split = data::split(full, cfg.split, derive_seed(cfg.seed, Stream::kSplit));
  p.clients = data::partition(p.split.train, cfg.partition, derive_seed(cfg.seed, Stream::kPartition));
  return p;
}

protocol::MpcpaConfig mpcpa_config(const ExperimentConfig& cfg, const PreparedData& data, std::size_t parallelism) {
  protocol::MpcpaConfig m;
  m.client_data = data.clients;
  m.num_classes = cfg.num_classes();
  m.diffusion = cfg.diffusion;
  m.classifier = cfg.classifier;
  m.gen_count = cfg.gen_count;
  m.seed = cfg.seed;
  m.parallelism = std::max<std::size_t>(1, parallelism);
  m.aggregation = cfg.aggregation;
  m.eval.validation = data.split.validation;
  m.eval.test = data.split.test;
  return m;
}

protocol::FedAvgConfig fedavg_config(const ExperimentConfig& cfg, const PreparedData& data) {
  protocol::FedAvgConfig f;
  f.client_data = data.clients;
  f.num_classes = cfg.num_classes();
  f.classifier = cfg.classifier;
  f.iters = cfg.fedavg.iters;
  f.local_epochs = cfg.fedavg.local_epochs;
  f.weighted = cfg.fedavg.weighted;
  f.seed = cfg.seed;
  f.eval.validation = data.split.validation;
  f.eval.test = data.split.test;
  return f;
}

namespace {

std::string dataset_text(const data::LabeledDataset& d) {
  std::ostringstream os;
  data::write_dataset(os, d);
  return os.str();
}

Json accuracy_row(const std::string& method, const protocol::Metrics& metrics, const std::string& prefix) {
  Json row;
  row["method"] = method;
  auto v = metrics.find(prefix + "/validation");
  auto t = metrics.find(prefix + "/test");
  row["validation"] = v == metrics.end() ? Json(nullptr) : Json(v->second);
  row["test"] = t == metrics.end() ? Json(nullptr) : Json(t->second);
  return row;
}

Json ensemble_row(const std::string& method, const aggregation::Ensemble& ensemble, const protocol::EvalSets& eval) {
  protocol::Metrics m;
  if (eval.validation) m["x/validation"] = nn::accuracy(ensemble.predict(*eval.validation), eval.validation->labels);
  if (eval.test) m["x/test"] = nn::accuracy(ensemble.predict(*eval.test), eval.test->labels);
  return accuracy_row(method, m, "x");
}

Json ledger_json(const protocol::Ledger& ledger) {
  const auto s = protocol::ledger_summary(ledger);
  Json by_kind;
  for (std::size_t k = 0; k < protocol::kMessageKindCount; ++k) {
    by_kind[protocol::to_string(static_cast<protocol::MessageKind>(k))] = s.by_kind[k];
  }
  return {{"total", s.total}, {"total_bytes", s.total_bytes}, {"by_kind", by_kind}};
}

Json data_json(const PreparedData& d) {
  Json clients = Json::array();
  for (const auto& c : d.clients) clients.push_back({{"size", c.size()}, {"class_counts", c.class_counts()}});
  return {{"train_size", d.split.train.size()},
          {"validation_size", d.split.validation.size()},
          {"test_size", d.split.test.size()},
          {"clients", clients}};
}

struct AuditInputs {
  std::vector<data::LabeledDataset> train;        // R_k
  std::vector<data::LabeledDataset> synthetic;    // S^k
  std::vector<std::vector<std::size_t>> sources;  // source per S^k row
  std::vector<nn::DenseNetwork> classifiers;      // C_k
  data::LabeledDataset holdout;                   // non-member pool
  double delta = audit::kDefaultMemorizationDelta;
  std::size_t mia_size = 200;
  std::uint64_t seed = 0;
};

data::LabeledDataset random_subset(const data::LabeledDataset& d, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(count, idx.size()));
  std::sort(idx.begin(), idx.end());
  return d.subset(idx);
}

Json run_audit(const AuditInputs& in, std::vector<std::pair<std::string, std::string>>& files) {
  const std::size_t n = in.train.size();
  if (in.synthetic.size() != n || in.sources.size() != n || in.classifiers.size() != n) {
    throw FormatError("audit: inconsistent client artifacts");
  }
  Json memo = Json::array();
  for (std::size_t src = 0; src < n; ++src) {
    data::LabeledDataset generated(in.train[src].dim, in.train[src].num_classes);
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t i = 0; i < in.synthetic[k].size(); ++i) {
        if (in.sources[k][i] == src) generated.push_back(in.synthetic[k].points[i], in.synthetic[k].labels[i]);
      }
    }
    Json row{{"source", src}, {"generated", generated.size()}, {"delta", in.delta}};
    if (generated.empty()) {
      row["global_min"] = nullptr;
      row["flag_count"] = 0;
    } else {
      const auto rep = audit::memorization_scan(generated, in.train[src], in.delta);
      row["global_min"] = rep.global_min;
      row["flag_count"] = rep.flag_count;
      std::ostringstream os;
      audit::write_memorization_rows(os, rep);
      files.emplace_back("memorization_source" + std::to_string(src) + ".tsv", os.str());
    }
    memo.push_back(row);
  }
  Json mia = Json::array();
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t m = std::min({in.mia_size, in.train[k].size(), in.holdout.size()});
    const auto members = random_subset(in.train[k], m, derive_seed(in.seed, Stream::kAudit, {k, 0}));
    const auto nonmembers = random_subset(in.holdout, m, derive_seed(in.seed, Stream::kAudit, {k, 1}));
    const auto rep = audit::mia_loss_threshold(in.classifiers[k], members, nonmembers);
    mia.push_back({{"client", k},
                   {"size", m},
                   {"best_tau", rep.best_tau},
                   {"best_accuracy", rep.best_accuracy},
                   {"tau", rep.tau},
                   {"accuracy", rep.accuracy}});
    std::ostringstream os;
    audit::write_mia_rows(os, rep);
    files.emplace_back("mia_client" + std::to_string(k) + ".tsv", os.str());
  }
  return {{"delta", in.delta}, {"memorization", memo}, {"mia", mia}};
}

Json bvc_json(const aggregation::BvcReport& b) {
  return {{"learners", b.learners},       {"bias_sq", b.bias_sq},
          {"variance", b.variance},       {"covariance", b.covariance},
          {"ensemble_mse", b.ensemble_mse}, {"reconstruction_residual", b.reconstruction_residual}};
}

void persist_mpcpa(const protocol::MpcpaResult& res, const PreparedData& prepared, RunOutcome& out) {
  out.text_files.emplace_back("validation.txt", dataset_text(prepared.split.validation));
  out.text_files.emplace_back("test.txt", dataset_text(prepared.split.test));
  for (const auto& c : res.clients) {
    const std::string k = std::to_string(c.id);
    out.text_files.emplace_back("client" + k + "_train.txt", dataset_text(c.local_data));
    out.text_files.emplace_back("synthetic" + k + ".txt", dataset_text(c.synthetic));
    std::ostringstream src;
    for (std::size_t s : c.synthetic_source) src << s << '\n';
    out.text_files.emplace_back("synthetic" + k + "_sources.txt", src.str());
    out.binary_files.emplace_back("denoiser" + k + ".mpdd", diffusion::serialize(*c.denoiser));
    out.binary_files.emplace_back("classifier" + k + ".mpnn", nn::serialize(res.classifiers[c.id]));
  }
  std::ostringstream ledger;
  protocol::write_ledger(ledger, res.ledger);
  out.text_files.emplace_back("ledger.jsonl", ledger.str());
  const auto preds = res.ensemble.predictions(prepared.split.test);
  std::ostringstream p;
  aggregation::write_predictions(p, preds, aggregation::aggregate_average(preds));
  out.text_files.emplace_back("predictions_test.tsv", p.str());
}

}  // namespace

RunOutcome run_arm(const ExperimentConfig& cfg, const RunOptions& options) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const PreparedData prepared = prepare_data(cfg);
  auto mc = mpcpa_config(cfg, prepared, options.parallelism);
  const std::size_t n = cfg.n_clients;

  RunOutcome out;
  Json& report = out.report;
  report["arm"] = to_string(cfg.arm.kind);
  report["config"] = cfg.to_json();
  report["data"] = data_json(prepared);
  Json rows = Json::array();

  switch (cfg.arm.kind) {
    case ArmKind::kMpcpa:
    case ArmKind::kAudit: {
      const auto res = protocol::run_mpcpa(mc);
      rows.push_back(accuracy_row("MPCPA", res.metrics, "mpcpa"));
      for (std::size_t k = 0; k < n; ++k) {
        rows.push_back(accuracy_row("C" + std::to_string(k + 1), res.metrics, "client" + std::to_string(k)));
      }
      report["ledger"] = ledger_json(res.ledger);
      persist_mpcpa(res, prepared, out);
      if (cfg.arm.kind == ArmKind::kAudit) {
        AuditInputs in;
        for (const auto& c : res.clients) {
          in.train.push_back(c.local_data);
          in.synthetic.push_back(c.synthetic);
          in.sources.push_back(c.synthetic_source);
        }
        in.classifiers = res.classifiers;
        in.holdout = prepared.split.test;
        in.delta = cfg.audit.delta;
        in.mia_size = cfg.audit.mia_size;
        in.seed = cfg.seed;
        report["audit"] = run_audit(in, out.text_files);
      }
      break;
    }
    case ArmKind::kFedAvg: {
      const auto res = protocol::run_fedavg(fedavg_config(cfg, prepared));
      rows.push_back(accuracy_row("FedAvg", res.metrics, "fedavg"));
      report["ledger"] = ledger_json(res.ledger);
      std::ostringstream ledger;
      protocol::write_ledger(ledger, res.ledger);
      out.text_files.emplace_back("ledger.jsonl", ledger.str());
      out.binary_files.emplace_back("classifier_global.mpnn", nn::serialize(res.global));
      break;
    }
    case ArmKind::kCentralized: {
      const auto res = protocol::run_centralized(mc, cfg.arm.source);
      rows.push_back(accuracy_row(cfg.arm.source.name(), res.metrics, cfg.arm.source.name()));
      report["train_size"] = res.train_size;
      out.binary_files.emplace_back("classifier_" + cfg.arm.source.name() + ".mpnn", nn::serialize(res.classifier));
      break;
    }
    case ArmKind::kAblationGrid: {
      const auto denoisers = protocol::train_all_denoisers(mc);
      using CS = protocol::CentralizedSource;
      for (const auto& src : {CS::all_original(), CS::all_generated()}) {
        rows.push_back(accuracy_row(src.name(), protocol::run_centralized(mc, src, denoisers).metrics, src.name()));
      }
      std::vector<nn::DenseNetwork> a_members, b_members;
      for (std::size_t k = 0; k < n; ++k) {
        auto r = protocol::run_centralized(mc, CS::single_client(k));
        rows.push_back(accuracy_row(CS::single_client(k).name(), r.metrics, CS::single_client(k).name()));
        a_members.push_back(std::move(r.classifier));
      }
      for (std::size_t k = 0; k < n; ++k) {
        auto r = protocol::run_centralized(mc, CS::client_plus_generated(k), denoisers);
        rows.push_back(accuracy_row(CS::client_plus_generated(k).name(), r.metrics, CS::client_plus_generated(k).name()));
        b_members.push_back(std::move(r.classifier));
      }
      rows.push_back(ensemble_row("aggregate(A)", aggregation::Ensemble(a_members, cfg.aggregation), mc.eval));
      rows.push_back(ensemble_row("aggregate(B)", aggregation::Ensemble(b_members, cfg.aggregation), mc.eval));
      for (std::size_t k = 0; k < n; ++k) {
        out.binary_files.emplace_back("denoiser" + std::to_string(k) + ".mpdd", diffusion::serialize(denoisers[k]));
      }
      break;
    }
    case ArmKind::kBvc:
      break;
    case ArmKind::kGenCountSweep: {
      const bool any_generation = std::any_of(cfg.arm.gen_counts.begin(), cfg.arm.gen_counts.end(),
                                              [](std::size_t c) { return c > 0; });
      std::vector<diffusion::ConditionalDenoiser> denoisers;
      if (any_generation) denoisers = protocol::train_all_denoisers(mc);
      for (std::size_t count : cfg.arm.gen_counts) {
        auto sweep = mc;
        sweep.gen_count = count;
        const std::string suffix = "@" + std::to_string(count);
        std::vector<nn::DenseNetwork> members;
        for (std::size_t k = 0; k < n; ++k) {
          const auto src = protocol::CentralizedSource::client_plus_generated(k);
          auto r = protocol::run_centralized(sweep, src, denoisers);
          rows.push_back(accuracy_row(src.name() + suffix, r.metrics, src.name()));
          members.push_back(std::move(r.classifier));
        }
        rows.push_back(ensemble_row("aggregate(B)" + suffix, aggregation::Ensemble(members, cfg.aggregation), mc.eval));
      }
      break;
    }
  }
  if (cfg.arm.kind == ArmKind::kBvc) {
    // Trial 0 is the prepared draw; later trials redraw a training set of the
    // same size and repartition it. Rows hold accuracies averaged over trials.
    const auto& test = prepared.split.test;
    const std::size_t R = cfg.bvc.trials;
    aggregation::TrialOutputs c_out(R, n, test.size()), a_out(R, n, test.size());
    double sums[4] = {0, 0, 0, 0};
    for (std::size_t r = 0; r < R; ++r) {
      auto trial = mc;
      if (r > 0) {
        const auto redraw = data::generate_mixture(cfg.mixture, prepared.split.train.size(),
                                                   derive_seed(cfg.seed, Stream::kMixture, {r}));
        trial.client_data = data::partition(redraw, cfg.partition, derive_seed(cfg.seed, Stream::kPartition, {r}));
      }
      const aggregation::Ensemble c(protocol::run_mpcpa(trial).classifiers, cfg.aggregation);
      std::vector<nn::DenseNetwork> local;
      for (std::size_t k = 0; k < n; ++k) {
        local.push_back(protocol::run_centralized(trial, protocol::CentralizedSource::single_client(k)).classifier);
      }
      const aggregation::Ensemble a(std::move(local), cfg.aggregation);
      aggregation::record_true_class(c_out, r, c.predictions(test), test.labels);
      aggregation::record_true_class(a_out, r, a.predictions(test), test.labels);
      const auto& val = prepared.split.validation;
      sums[0] += nn::accuracy(c.predict(val), val.labels);
      sums[1] += nn::accuracy(c.predict(test), test.labels);
      sums[2] += nn::accuracy(a.predict(val), val.labels);
      sums[3] += nn::accuracy(a.predict(test), test.labels);
    }
    const double Rd = static_cast<double>(R);
    rows.push_back({{"method", "MPCPA"}, {"validation", sums[0] / Rd}, {"test", sums[1] / Rd}});
    rows.push_back({{"method", "aggregate(A)"}, {"validation", sums[2] / Rd}, {"test", sums[3] / Rd}});
    const std::vector<double> ones(test.size(), 1.0);
    report["bvc"] = {{"trials", R},
                     {"samples", test.size()},
                     {"mpcpa", bvc_json(aggregation::bvc_decompose(c_out, ones))},
                     {"local", bvc_json(aggregation::bvc_decompose(a_out, ones))}};
  }
  report["accuracies"] = rows;

  out.text_files.emplace_back("config.json", cfg.to_json().dump(2) + "\n");
  Json artifacts = Json::array();
  for (const auto& [name, _] : out.text_files) artifacts.push_back(name);
  for (const auto& [name, _] : out.binary_files) artifacts.push_back(name);
  artifacts.push_back("report.json");
  artifacts.push_back("report.txt");
  std::vector<std::string> sorted_names = artifacts.get<std::vector<std::string>>();
  std::sort(sorted_names.begin(), sorted_names.end());
  report["artifacts"] = sorted_names;

  std::uint64_t artifact_bytes = 0;
  for (const auto& [_, t] : out.text_files) artifact_bytes += t.size();
  for (const auto& [_, b] : out.binary_files) artifact_bytes += b.size();
  report["info"] = {{"wall_clock_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()},
                    {"parallelism", mc.parallelism},
                    {"artifact_bytes", artifact_bytes}};
  return out;
}

void write_run(const RunOutcome& outcome, const fs::path& out_dir) {
  std::error_code ec;
  if (fs::exists(out_dir)) {
    if (!fs::is_directory(out_dir) || !fs::is_empty(out_dir)) {
      throw ConfigError("output directory " + out_dir.string() + " exists and is not empty");
    }
    fs::remove(out_dir);
  }
  const fs::path parent = out_dir.has_parent_path() ? out_dir.parent_path() : fs::path(".");
  fs::create_directories(parent);
  const fs::path staging = parent / ("." + out_dir.filename().string() + ".staging");
  fs::remove_all(staging, ec);
  fs::create_directories(staging);
  try {
    auto write_file = [&](const std::string& name, const char* bytes, std::size_t size, bool binary) {
      std::ofstream f(staging / name, binary ? std::ios::binary : std::ios::out);
      f.write(bytes, static_cast<std::streamsize>(size));
      if (!f) throw FormatError("cannot write " + (staging / name).string());
    };
    for (const auto& [name, text] : outcome.text_files) write_file(name, text.data(), text.size(), false);
    for (const auto& [name, bytes] : outcome.binary_files) {
      write_file(name, reinterpret_cast<const char*>(bytes.data()), bytes.size(), true);
    }
    const std::string report = outcome.report.dump(2) + "\n";
    write_file("report.json", report.data(), report.size(), false);
    const std::string text = render_report(outcome.report);
    write_file("report.txt", text.data(), text.size(), false);
    fs::rename(staging, out_dir);
  } catch (...) {
    fs::remove_all(staging, ec);
    throw;
  }
}

Json cmd_run(const ExperimentConfig& cfg, const fs::path& out_dir, const RunOptions& options) {
  if (fs::exists(out_dir) && (!fs::is_directory(out_dir) || !fs::is_empty(out_dir))) {
    throw ConfigError("output directory " + out_dir.string() + " exists and is not empty");
  }
  auto outcome = run_arm(cfg, options);
  write_run(outcome, out_dir);
  return outcome.report;
}

namespace {

std::vector<std::size_t> read_sources(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  std::vector<std::size_t> out;
  std::size_t v = 0;
  while (in >> v) out.push_back(v);
  if (!in.eof()) throw FormatError(path.string() + ": malformed source list");
  return out;
}

Bytes read_binary(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

Json read_report(const fs::path& dir) {
  const fs::path path = dir / "report.json";
  std::ifstream in(path);
  if (!in) throw FormatError(path.string() + ": missing run report");
  try {
    Json j = Json::parse(in);
    if (!j.contains("arm") || !j.contains("accuracies") || !j["accuracies"].is_array()) {
      throw FormatError(path.string() + ": not a run report");
    }
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": corrupt run report: " + e.what());
  }
}

std::string cell(const Json& v) { return v.is_null() ? "-" : v.dump(); }

std::string pct(const Json& v, int width) {
  std::ostringstream os;
  if (v.is_null()) os << std::setw(width) << "-";
  else os << std::setw(width) << std::fixed << std::setprecision(2) << 100.0 * v.get<double>();
  return os.str();
}

}  // namespace

Json audit_run_directory(const fs::path& run_dir, std::optional<double> delta, std::optional<std::size_t> mia_size) {
  const auto cfg = ExperimentConfig::load(run_dir / "config.json");
  AuditInputs in;
  for (std::size_t k = 0; k < cfg.n_clients; ++k) {
    const std::string s = std::to_string(k);
    in.train.push_back(data::load_dataset(run_dir / ("client" + s + "_train.txt")));
    in.synthetic.push_back(data::load_dataset(run_dir / ("synthetic" + s + ".txt")));
    in.sources.push_back(read_sources(run_dir / ("synthetic" + s + "_sources.txt")));
    if (in.sources.back().size() != in.synthetic.back().size()) {
      throw FormatError((run_dir / ("synthetic" + s + "_sources.txt")).string() + ": row count differs from synthetic set");
    }
    in.classifiers.push_back(nn::deserialize_network(read_binary(run_dir / ("classifier" + s + ".mpnn"))));
  }
  in.holdout = data::load_dataset(run_dir / "test.txt");
  in.delta = delta.value_or(cfg.audit.delta);
  in.mia_size = mia_size.value_or(cfg.audit.mia_size);
  in.seed = cfg.seed;
  std::vector<std::pair<std::string, std::string>> files;
  return run_audit(in, files);
}

ComparisonTable cmd_report(const std::vector<fs::path>& run_dirs) {
  if (run_dirs.empty()) throw InvalidInput("report: at least one run directory required");
  std::vector<std::pair<std::string, Json>> runs;
  for (const auto& d : run_dirs) {
    fs::path clean = d;
    if (clean.filename().empty()) clean = clean.parent_path();
    runs.emplace_back(clean.filename().string(), read_report(d));
  }

  std::ostringstream text, tsv;
  tsv << "run\tarm\tmethod\tvalidation\ttest\tmessages\tbytes\n";
  text << std::left << std::setw(20) << "Run" << std::setw(16) << "Arm" << std::setw(22) << "Method" << std::right
       << std::setw(12) << "Validation" << std::setw(10) << "Test" << '\n';
  for (const auto& [name, rep] : runs) {
    const std::string arm = rep["arm"].get<std::string>();
    const Json messages = rep.contains("ledger") ? rep["ledger"]["total"] : Json(nullptr);
    const Json bytes = rep.contains("ledger") ? rep["ledger"]["total_bytes"] : Json(nullptr);
    for (const auto& row : rep["accuracies"]) {
      text << std::left << std::setw(20) << name << std::setw(16) << arm << std::setw(22)
           << row["method"].get<std::string>() << std::right << pct(row["validation"], 12) << pct(row["test"], 10) << '\n';
      tsv << name << '\t' << arm << '\t' << row["method"].get<std::string>() << '\t' << cell(row["validation"]) << '\t'
          << cell(row["test"]) << '\t' << cell(messages) << '\t' << cell(bytes) << '\n';
    }
  }
  bool any_ledger = false;
  for (const auto& [name, rep] : runs) any_ledger |= rep.contains("ledger");
  if (any_ledger) {
    text << "\nCommunication\n"
         << std::left << std::setw(20) << "Run" << std::setw(16) << "Arm" << std::right << std::setw(10) << "Messages"
         << std::setw(14) << "Bytes" << '\n';
    for (const auto& [name, rep] : runs) {
      if (!rep.contains("ledger")) continue;
      text << std::left << std::setw(20) << name << std::setw(16) << rep["arm"].get<std::string>() << std::right
           << std::setw(10) << rep["ledger"]["total"].dump() << std::setw(14) << rep["ledger"]["total_bytes"].dump()
           << '\n';
    }
  }
  return {text.str(), tsv.str()};
}

std::string render_report(const Json& report) {
  std::ostringstream os;
  os << "arm: " << report.value("arm", std::string("?")) << '\n';
  if (report.contains("data")) {
    os << "clients:";
    for (const auto& c : report["data"]["clients"]) os << ' ' << c["size"].dump() << c["class_counts"].dump();
    os << "  validation " << report["data"]["validation_size"].dump() << "  test " << report["data"]["test_size"].dump()
       << '\n';
  }
  os << '\n' << std::left << std::setw(24) << "Method" << std::right << std::setw(12) << "Validation" << std::setw(10)
     << "Test" << '\n';
  for (const auto& row : report["accuracies"]) {
    os << std::left << std::setw(24) << row["method"].get<std::string>() << std::right << pct(row["validation"], 12)
       << pct(row["test"], 10) << '\n';
  }
  if (report.contains("ledger")) {
    const auto& l = report["ledger"];
    os << "\ncommunication: " << l["total"].dump() << " messages, " << l["total_bytes"].dump() << " bytes\n";
    for (auto it = l["by_kind"].begin(); it != l["by_kind"].end(); ++it) {
      if (it.value().get<std::uint64_t>() > 0) os << "  " << it.key() << ": " << it.value().dump() << '\n';
    }
  }
  if (report.contains("bvc")) {
    const auto& b = report["bvc"];
    os << "\nbias-variance-covariance over " << b["trials"].dump() << " training draws (" << b["samples"].dump()
       << " test samples)\n";
    for (const char* which : {"mpcpa", "local"}) {
      const auto& d = b[which];
      os << "  " << which << ": bias^2 " << d["bias_sq"].dump() << ", variance " << d["variance"].dump()
         << ", covariance " << d["covariance"].dump() << ", ensemble mse " << d["ensemble_mse"].dump() << '\n';
    }
  }
  if (report.contains("audit")) {
    const auto& a = report["audit"];
    os << "\nmemorization (delta " << a["delta"].dump() << ")\n";
    for (const auto& m : a["memorization"]) {
      os << "  source " << m["source"].dump() << ": " << m["generated"].dump() << " generated, min distance "
         << m["global_min"].dump() << ", flagged " << m["flag_count"].dump() << '\n';
    }
    os << "membership inference (loss threshold)\n";
    for (const auto& m : a["mia"]) {
      os << "  client " << m["client"].dump() << ": best accuracy " << m["best_accuracy"].dump() << " at tau "
         << m["best_tau"].dump() << " (n=" << m["size"].dump() << " per side)\n";
    }
  }
  return os.str();
}

}  // namespace mpcpa::experiment
