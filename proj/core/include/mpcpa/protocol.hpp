#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mpcpa/aggregation.hpp"
#include "mpcpa/bytes.hpp"
#include "mpcpa/classifier.hpp"
#include "mpcpa/datagen.hpp"
#include "mpcpa/diffusion.hpp"

namespace mpcpa::protocol {

class ActorId {
 public:
  static constexpr ActorId server() { return ActorId(-1); }
  static constexpr ActorId client(std::size_t k) { return ActorId(static_cast<std::int64_t>(k)); }

  bool is_server() const { return value_ < 0; }
  std::size_t client_index() const;
  std::string to_string() const;  // "server" or "client<k>"
  static ActorId parse(const std::string& text);

  friend constexpr bool operator==(ActorId, ActorId) = default;

 private:
  constexpr explicit ActorId(std::int64_t v) : value_(v) {}
  std::int64_t value_;
};

// Only model-bearing kinds exist; raw training data has no message kind.
enum class MessageKind : std::uint8_t {
  kDdpmUpload = 0,
  kDdpmPackage = 1,
  kClassifierUpload = 2,
  kFedAvgBroadcast = 3,
  kFedAvgUpdate = 4,
};
inline constexpr std::size_t kMessageKindCount = 5;

std::string to_string(MessageKind kind);
MessageKind parse_message_kind(const std::string& text);

struct Message {
  ActorId sender = ActorId::server();
  ActorId receiver = ActorId::server();
  MessageKind kind = MessageKind::kDdpmUpload;
  std::uint64_t payload_bytes = 0;
  std::uint64_t round = 0;

  friend bool operator==(const Message&, const Message&) = default;
};

// Append-only record of every transmission.
class Ledger {
 public:
  // Rejects sender == receiver, and messages that do not touch the server.
  void record(const Message& message);
  std::span<const Message> messages() const { return messages_; }
  std::size_t size() const { return messages_.size(); }

 private:
  std::vector<Message> messages_;
};

struct LedgerSummary {
  std::array<std::uint64_t, kMessageKindCount> by_kind{};
  std::uint64_t total = 0;
  std::uint64_t total_bytes = 0;

  std::uint64_t count(MessageKind kind) const { return by_kind[static_cast<std::size_t>(kind)]; }
};

LedgerSummary ledger_summary(const Ledger& ledger);

// Line-delimited JSON records {sender, receiver, kind, bytes, round}.
void write_ledger(std::ostream& out, const Ledger& ledger);
Ledger read_ledger(std::istream& in);

// Wire format of the DDPM package sent to client k: "MPPK", u32 version,
// u32 entry count, then per entry u32 source client, u64 blob size, blob.
struct PackageEntry {
  std::size_t source = 0;
  Bytes denoiser_blob;
};
Bytes serialize_package(std::span<const PackageEntry> entries);
std::vector<PackageEntry> deserialize_package(std::span<const std::uint8_t> blob);

enum class ServerPhase { kCollectingDdpm, kDistributing, kCollectingClassifiers, kDone };
std::string to_string(ServerPhase phase);

// Serialized server actor. Every transfer goes through one of these calls,
// which records the message with the exact payload size.
class Server {
 public:
  explicit Server(std::size_t n_clients);

  ServerPhase phase() const { return phase_; }
  std::size_t n_clients() const { return n_; }
  const Ledger& ledger() const { return ledger_; }

  void receive_denoiser(std::size_t client, Bytes blob);
  // P^k: every received denoiser except client k's own. Requires all n.
  Bytes send_package(std::size_t client);
  void receive_classifier(std::size_t client, Bytes blob);

  const std::vector<std::optional<Bytes>>& denoisers() const { return denoisers_; }
  const std::vector<std::optional<Bytes>>& classifiers() const { return classifiers_; }

  // Done once all n classifiers are in; builds the ensemble from the blobs.
  aggregation::Ensemble ensemble(const aggregation::AggregationMode& mode) const;

 private:
  void check_client(std::size_t client) const;

  std::size_t n_;
  ServerPhase phase_ = ServerPhase::kCollectingDdpm;
  std::vector<std::optional<Bytes>> denoisers_;
  std::vector<bool> package_sent_;
  std::vector<std::optional<Bytes>> classifiers_;
  Ledger ledger_;
};

struct ClientState {
  std::size_t id = 0;
  data::LabeledDataset local_data;                 // R_k
  std::optional<diffusion::ConditionalDenoiser> denoiser;  // f_k
  std::vector<std::pair<std::size_t, diffusion::ConditionalDenoiser>> package;  // P^k
  data::LabeledDataset synthetic;                  // S^k
  std::vector<std::size_t> synthetic_source;       // source client per S^k row
  data::LabeledDataset combined;                   // D_k = S^k ++ R_k
  std::optional<nn::DenseNetwork> classifier;      // C_k
};

using Metrics = std::map<std::string, double>;

struct EvalSets {
  std::optional<data::LabeledDataset> validation;
  std::optional<data::LabeledDataset> test;
};

struct MpcpaConfig {
  std::vector<data::LabeledDataset> client_data;
  std::size_t num_classes = 2;
  diffusion::DiffusionTrainConfig diffusion;  // train.seed is replaced per client
  nn::ClassifierSpec classifier;              // train.seed is replaced per client
  std::size_t gen_count = 400;                // per class per source denoiser
  std::uint64_t seed = 0;
  std::size_t parallelism = 1;
  aggregation::AggregationMode aggregation;
  EvalSets eval;

  // ConfigError on n < 2, empty shards, or inconsistent dims/classes.
  void validate() const;
};

struct MpcpaResult {
  aggregation::Ensemble ensemble;
  std::vector<nn::DenseNetwork> classifiers;
  std::vector<ClientState> clients;
  Ledger ledger;
  Metrics metrics;
};

MpcpaResult run_mpcpa(const MpcpaConfig& config);

// Building blocks shared by run_mpcpa and run_centralized so that equal
// seeds give bitwise-equal artifacts on both paths.
diffusion::ConditionalDenoiser train_client_denoiser(const MpcpaConfig& config, std::size_t client);
std::vector<diffusion::ConditionalDenoiser> train_all_denoisers(const MpcpaConfig& config);

struct SyntheticSet {
  data::LabeledDataset data;
  std::vector<std::size_t> source;
};

// gen_count samples per class from every (source, denoiser) pair; generated
// points inherit the class they were sampled under. `target` selects the
// RNG stream (a client id, or kCentralTarget).
SyntheticSet generate_synthetic(std::span<const std::pair<std::size_t, const diffusion::ConditionalDenoiser*>> sources,
                                std::size_t target, std::size_t gen_count, std::size_t num_classes,
                                std::uint64_t global_seed, std::size_t parallelism = 1);
inline constexpr std::size_t kCentralTarget = 1'000'000;

nn::DenseNetwork train_classifier_for(const MpcpaConfig& config, std::size_t classifier_id,
                                      const data::LabeledDataset& train_set);

struct CentralizedSource {
  enum class Kind { kAllOriginal, kAllGenerated, kSingleClient, kClientPlusGenerated };
  Kind kind = Kind::kAllOriginal;
  std::size_t client = 0;

  static CentralizedSource all_original() { return {Kind::kAllOriginal, 0}; }
  static CentralizedSource all_generated() { return {Kind::kAllGenerated, 0}; }
  static CentralizedSource single_client(std::size_t k) { return {Kind::kSingleClient, k}; }
  static CentralizedSource client_plus_generated(std::size_t k) { return {Kind::kClientPlusGenerated, k}; }

  static CentralizedSource parse(const std::string& text);  // "all_original", "single_client:1", ...
  std::string name() const;  // "all_original", "A1", "B2", ...
};

struct CentralizedResult {
  nn::DenseNetwork classifier;
  std::size_t train_size = 0;
  Metrics metrics;
};

// Trains one classifier on the pooled requested data. Sources that need
// generated data use `denoisers` (indexed by client) when given, otherwise
// train them exactly as run_mpcpa would.
CentralizedResult run_centralized(const MpcpaConfig& config, const CentralizedSource& source,
                                  std::span<const diffusion::ConditionalDenoiser> denoisers = {});

struct FedAvgConfig {
  std::vector<data::LabeledDataset> client_data;
  std::size_t num_classes = 2;
  nn::ClassifierSpec classifier;
  std::size_t iters = 200;
  std::size_t local_epochs = 1;  // 0 = clients return the broadcast unchanged
  bool weighted = false;         // data-size-weighted mean instead of unweighted
  std::uint64_t seed = 0;
  EvalSets eval;

  void validate() const;
};

struct FedAvgResult {
  nn::DenseNetwork global;
  Ledger ledger;
  Metrics metrics;
};

FedAvgResult run_fedavg(const FedAvgConfig& config);

// Elementwise (optionally weighted) mean of parameter vectors.
std::vector<double> average_parameters(std::span<const std::vector<double>> params,
                                       std::span<const double> weights = {});

}  // namespace mpcpa::protocol
