#include "mpcpa/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <istream>
#include <ostream>
#include <string>

#include <nlohmann/json.hpp>

#include "mpcpa/error.hpp"
#include "mpcpa/rng.hpp"
#include "parallel.hpp"

namespace mpcpa::protocol {

std::size_t ActorId::client_index() const {
  if (is_server()) throw InvalidInput("ActorId: server has no client index");
  return static_cast<std::size_t>(value_);
}

std::string ActorId::to_string() const { return is_server() ? "server" : "client" + std::to_string(value_); }

ActorId ActorId::parse(const std::string& text) {
  if (text == "server") return server();
  if (text.rfind("client", 0) == 0 && text.size() > 6) {
    try {
      return client(std::stoull(text.substr(6)));
    } catch (const std::exception&) {
    }
  }
  throw FormatError("unknown actor id '" + text + "'");
}

std::string to_string(MessageKind kind) {
  switch (kind) {
    case MessageKind::kDdpmUpload: return "DdpmUpload";
    case MessageKind::kDdpmPackage: return "DdpmPackage";
    case MessageKind::kClassifierUpload: return "ClassifierUpload";
    case MessageKind::kFedAvgBroadcast: return "FedAvgBroadcast";
    case MessageKind::kFedAvgUpdate: return "FedAvgUpdate";
  }
  return "?";
}

MessageKind parse_message_kind(const std::string& text) {
  for (std::size_t k = 0; k < kMessageKindCount; ++k) {
    const auto kind = static_cast<MessageKind>(k);
    if (to_string(kind) == text) return kind;
  }
  throw FormatError("unknown message kind '" + text + "'");
}

void Ledger::record(const Message& m) {
  if (m.sender == m.receiver) throw ProtocolError("ledger: sender equals receiver (" + m.sender.to_string() + ")");
  const bool upload = m.kind == MessageKind::kDdpmUpload || m.kind == MessageKind::kClassifierUpload ||
                      m.kind == MessageKind::kFedAvgUpdate;
  const bool direction_ok = upload ? (!m.sender.is_server() && m.receiver.is_server())
                                   : (m.sender.is_server() && !m.receiver.is_server());
  if (!direction_ok) {
    throw ProtocolError("ledger: " + to_string(m.kind) + " cannot travel from " + m.sender.to_string() + " to " +
                        m.receiver.to_string());
  }
  messages_.push_back(m);
}

LedgerSummary ledger_summary(const Ledger& ledger) {
  LedgerSummary s;
  for (const auto& m : ledger.messages()) {
    ++s.by_kind[static_cast<std::size_t>(m.kind)];
    ++s.total;
    s.total_bytes += m.payload_bytes;
  }
  return s;
}

void write_ledger(std::ostream& out, const Ledger& ledger) {
  for (const auto& m : ledger.messages()) {
    nlohmann::ordered_json j;
    j["sender"] = m.sender.to_string();
    j["receiver"] = m.receiver.to_string();
    j["kind"] = to_string(m.kind);
    j["bytes"] = m.payload_bytes;
    j["round"] = m.round;
    out << j.dump() << '\n';
  }
}

Ledger read_ledger(std::istream& in) {
  Ledger ledger;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Message m;
      m.sender = ActorId::parse(j.at("sender").get<std::string>());
      m.receiver = ActorId::parse(j.at("receiver").get<std::string>());
      m.kind = parse_message_kind(j.at("kind").get<std::string>());
      m.payload_bytes = j.at("bytes").get<std::uint64_t>();
      m.round = j.at("round").get<std::uint64_t>();
      ledger.record(m);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("ledger line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return ledger;
}

Bytes serialize_package(std::span<const PackageEntry> entries) {
  ByteWriter w;
  w.put_tag("MPPK");
  w.put_u32(1);
  w.put_u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    w.put_u32(static_cast<std::uint32_t>(e.source));
    w.put_u64(e.denoiser_blob.size());
    w.put_bytes(e.denoiser_blob);
  }
  return std::move(w).take();
}

std::vector<PackageEntry> deserialize_package(std::span<const std::uint8_t> blob) {
  ByteReader r(blob);
  r.expect_tag("MPPK");
  if (r.get_u32() != 1) throw FormatError("package: unsupported version");
  const std::uint32_t n = r.get_u32();
  std::vector<PackageEntry> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    PackageEntry e;
    e.source = r.get_u32();
    const std::uint64_t size = r.get_u64();
    if (size > r.remaining()) throw FormatError("package: truncated entry");
    auto bytes = r.get_bytes(static_cast<std::size_t>(size));
    e.denoiser_blob.assign(bytes.begin(), bytes.end());
    out.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw FormatError("package: trailing bytes");
  return out;
}

std::string to_string(ServerPhase phase) {
  switch (phase) {
    case ServerPhase::kCollectingDdpm: return "collecting_ddpm";
    case ServerPhase::kDistributing: return "distributing";
    case ServerPhase::kCollectingClassifiers: return "collecting_classifiers";
    case ServerPhase::kDone: return "done";
  }
  return "?";
}

Server::Server(std::size_t n_clients)
    : n_(n_clients), denoisers_(n_clients), package_sent_(n_clients, false), classifiers_(n_clients) {
  if (n_clients < 2) throw ConfigError("server: at least two clients required");
}

void Server::check_client(std::size_t client) const {
  if (client >= n_) throw ProtocolError("server: unknown client " + std::to_string(client));
}

void Server::receive_denoiser(std::size_t client, Bytes blob) {
  check_client(client);
  if (phase_ != ServerPhase::kCollectingDdpm) throw ProtocolError("server: DDPM upload after collection closed");
  if (denoisers_[client]) throw ProtocolError("server: duplicate DDPM upload from client " + std::to_string(client));
  ledger_.record({ActorId::client(client), ActorId::server(), MessageKind::kDdpmUpload, blob.size(), 0});
  denoisers_[client] = std::move(blob);
}

Bytes Server::send_package(std::size_t client) {
  check_client(client);
  if (phase_ == ServerPhase::kCollectingDdpm) {
    const bool all = std::all_of(denoisers_.begin(), denoisers_.end(), [](const auto& d) { return d.has_value(); });
    if (!all) throw ProtocolError("server: cannot distribute packages before all DDPM models arrive");
    phase_ = ServerPhase::kDistributing;
  }
  if (phase_ != ServerPhase::kDistributing) throw ProtocolError("server: package distribution is closed");
  if (package_sent_[client]) throw ProtocolError("server: package already sent to client " + std::to_string(client));
  std::vector<PackageEntry> entries;
  for (std::size_t i = 0; i < n_; ++i) {
    if (i != client) entries.push_back({i, *denoisers_[i]});
  }
  Bytes blob = serialize_package(entries);
  ledger_.record({ActorId::server(), ActorId::client(client), MessageKind::kDdpmPackage, blob.size(), 1});
  package_sent_[client] = true;
  if (std::all_of(package_sent_.begin(), package_sent_.end(), [](bool b) { return b; })) {
    phase_ = ServerPhase::kCollectingClassifiers;
  }
  return blob;
}

void Server::receive_classifier(std::size_t client, Bytes blob) {
  check_client(client);
  if (phase_ != ServerPhase::kCollectingClassifiers) {
    throw ProtocolError("server: classifier upload in phase " + to_string(phase_));
  }
  if (classifiers_[client]) throw ProtocolError("server: duplicate classifier from client " + std::to_string(client));
  ledger_.record({ActorId::client(client), ActorId::server(), MessageKind::kClassifierUpload, blob.size(), 2});
  classifiers_[client] = std::move(blob);
  if (std::all_of(classifiers_.begin(), classifiers_.end(), [](const auto& c) { return c.has_value(); })) {
    phase_ = ServerPhase::kDone;
  }
}

aggregation::Ensemble Server::ensemble(const aggregation::AggregationMode& mode) const {
  if (phase_ != ServerPhase::kDone) throw ProtocolError("server: ensemble requested before all classifiers arrived");
  std::vector<nn::DenseNetwork> members;
  for (const auto& c : classifiers_) members.push_back(nn::deserialize_network(*c));
  return aggregation::Ensemble(std::move(members), mode);
}

namespace {

void validate_shards(const std::vector<data::LabeledDataset>& shards, std::size_t num_classes, std::size_t min_clients) {
  if (shards.size() < min_clients) {
    throw ConfigError("at least " + std::to_string(min_clients) + " clients required, got " + std::to_string(shards.size()));
  }
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  const std::size_t dim = shards.front().dim;
  for (std::size_t k = 0; k < shards.size(); ++k) {
    const auto& s = shards[k];
    if (s.empty()) throw ConfigError("client " + std::to_string(k) + " has an empty dataset");
    if (s.num_classes != num_classes) throw ConfigError("client " + std::to_string(k) + " dataset class count differs from num_classes");
    if (s.dim != dim) throw ConfigError("client " + std::to_string(k) + " dataset dim differs from client 0");
    try {
      s.validate();
    } catch (const InvalidInput& e) {
      throw ConfigError("client " + std::to_string(k) + ": " + e.what());
    }
  }
}

void validate_eval(const EvalSets& eval, std::size_t dim, std::size_t num_classes) {
  for (const auto* d : {eval.validation ? &*eval.validation : nullptr, eval.test ? &*eval.test : nullptr}) {
    if (!d) continue;
    if (d->empty() || d->dim != dim || d->num_classes != num_classes) {
      throw ConfigError("evaluation set must be nonempty and match the client data dims");
    }
  }
}

void validate_mpcpa(const MpcpaConfig& c, std::size_t min_clients) {
  validate_shards(c.client_data, c.num_classes, min_clients);
  try {
    c.diffusion.validate();
    c.classifier.train.validate();
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
  if (!c.aggregation.weights.empty() && c.aggregation.weights.size() != c.client_data.size()) {
    throw ConfigError("aggregation weights must have one entry per client");
  }
  if (c.aggregation.kind == aggregation::AggregationMode::Kind::kVoteWeighted && c.aggregation.weights.empty()) {
    throw ConfigError("vote_weighted aggregation requires weights");
  }
  validate_eval(c.eval, c.client_data.front().dim, c.num_classes);
}

void evaluate_into(Metrics& metrics, const std::string& prefix, const EvalSets& eval,
                   const std::function<std::vector<std::size_t>(const data::LabeledDataset&)>& predict) {
  if (eval.validation) metrics[prefix + "/validation"] = nn::accuracy(predict(*eval.validation), eval.validation->labels);
  if (eval.test) metrics[prefix + "/test"] = nn::accuracy(predict(*eval.test), eval.test->labels);
}

std::uint64_t classifier_seed(std::uint64_t global, std::size_t id, std::uint64_t part) {
  return derive_seed(global, Stream::kClassifier, {static_cast<std::uint64_t>(id), part});
}

data::LabeledDataset concat(const SyntheticSet& synthetic, const data::LabeledDataset& local) {
  if (synthetic.data.empty()) return local;
  data::LabeledDataset out = synthetic.data;
  out.append(local);
  return out;
}

}  // namespace

void MpcpaConfig::validate() const { validate_mpcpa(*this, 2); }

diffusion::ConditionalDenoiser train_client_denoiser(const MpcpaConfig& config, std::size_t client) {
  if (client >= config.client_data.size()) throw InvalidInput("train_client_denoiser: unknown client");
  auto cfg = config.diffusion;
  cfg.train.seed = derive_seed(config.seed, Stream::kDenoiserTrain, {client});
  return diffusion::diffusion_train(config.client_data[client], cfg);
}

std::vector<diffusion::ConditionalDenoiser> train_all_denoisers(const MpcpaConfig& config) {
  std::vector<diffusion::ConditionalDenoiser> out(config.client_data.size());
  detail::parallel_for(out.size(), config.parallelism, [&](std::size_t k) { out[k] = train_client_denoiser(config, k); });
  return out;
}

SyntheticSet generate_synthetic(std::span<const std::pair<std::size_t, const diffusion::ConditionalDenoiser*>> sources,
                                std::size_t target, std::size_t gen_count, std::size_t num_classes,
                                std::uint64_t global_seed, std::size_t parallelism) {
  SyntheticSet out;
  if (sources.empty()) return out;
  const std::size_t dim = sources.front().second->data_dim();
  out.data = data::LabeledDataset(dim, num_classes);
  if (gen_count == 0) return out;
  for (const auto& [src, den] : sources) {
    require(den->data_dim() == dim && den->num_classes() == num_classes, "generate_synthetic: inconsistent denoisers");
  }
  const std::size_t jobs = sources.size() * num_classes;
  std::vector<std::vector<RealVector>> results(jobs);
  detail::parallel_for(jobs, parallelism, [&](std::size_t j) {
    const auto& [src, den] = sources[j / num_classes];
    const std::size_t y = j % num_classes;
    results[j] = diffusion::sample(*den, y, gen_count,
                                   derive_seed(global_seed, Stream::kGeneration, {target, src, y}));
  });
  for (std::size_t j = 0; j < jobs; ++j) {
    const std::size_t src = sources[j / num_classes].first;
    const std::size_t y = j % num_classes;
    for (auto& p : results[j]) {
      out.data.points.push_back(std::move(p));
      out.data.labels.push_back(y);
      out.source.push_back(src);
    }
  }
  return out;
}

nn::DenseNetwork train_classifier_for(const MpcpaConfig& config, std::size_t classifier_id,
                                      const data::LabeledDataset& train_set) {
  auto net = nn::make_classifier(train_set.dim, config.classifier.hidden, config.num_classes,
                                 classifier_seed(config.seed, classifier_id, 0));
  auto cfg = config.classifier.train;
  cfg.seed = classifier_seed(config.seed, classifier_id, 1);
  nn::train_classifier(net, train_set, cfg);
  return net;
}

MpcpaResult run_mpcpa(const MpcpaConfig& config) {
  config.validate();
  const std::size_t n = config.client_data.size();
  Server server(n);
  std::vector<ClientState> clients(n);
  for (std::size_t k = 0; k < n; ++k) {
    clients[k].id = k;
    clients[k].local_data = config.client_data[k];
  }

  // Stage 1: local DDPM training, then upload f_k.
  detail::parallel_for(n, config.parallelism, [&](std::size_t k) { clients[k].denoiser = train_client_denoiser(config, k); });
  for (std::size_t k = 0; k < n; ++k) server.receive_denoiser(k, diffusion::serialize(*clients[k].denoiser));

  // Stage 2: the server sends P^k to every client.
  for (std::size_t k = 0; k < n; ++k) {
    for (auto& entry : deserialize_package(server.send_package(k))) {
      if (entry.source == k) throw ProtocolError("package for client " + std::to_string(k) + " contains its own model");
      clients[k].package.emplace_back(entry.source, diffusion::deserialize_denoiser(entry.denoiser_blob));
    }
  }

  // Stage 3: synthesize S^k, train C_k on D_k = S^k ++ R_k, upload C_k.
  detail::parallel_for(n, config.parallelism, [&](std::size_t k) {
    auto& c = clients[k];
    std::vector<std::pair<std::size_t, const diffusion::ConditionalDenoiser*>> sources;
    for (const auto& [src, den] : c.package) sources.emplace_back(src, &den);
    auto synthetic = generate_synthetic(sources, k, config.gen_count, config.num_classes, config.seed);
    c.combined = concat(synthetic, c.local_data);
    c.synthetic = std::move(synthetic.data);
    c.synthetic_source = std::move(synthetic.source);
    c.classifier = train_classifier_for(config, k, c.combined);
  });
  for (std::size_t k = 0; k < n; ++k) server.receive_classifier(k, nn::serialize(*clients[k].classifier));

  MpcpaResult result;
  result.ensemble = server.ensemble(config.aggregation);
  result.classifiers = result.ensemble.members();
  result.ledger = server.ledger();
  evaluate_into(result.metrics, "mpcpa", config.eval, [&](const auto& d) { return result.ensemble.predict(d); });
  for (std::size_t k = 0; k < n; ++k) {
    evaluate_into(result.metrics, "client" + std::to_string(k), config.eval,
                  [&](const auto& d) { return nn::predict_labels(result.classifiers[k], d); });
  }
  result.clients = std::move(clients);
  return result;
}

CentralizedSource CentralizedSource::parse(const std::string& text) {
  if (text == "all_original") return all_original();
  if (text == "all_generated") return all_generated();
  auto with_client = [&](const std::string& prefix) -> std::optional<std::size_t> {
    if (text.rfind(prefix + ":", 0) != 0) return std::nullopt;
    const std::string rest = text.substr(prefix.size() + 1);
    if (rest.empty() || !std::all_of(rest.begin(), rest.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
      throw InvalidInput("centralized source '" + text + "': client index must be a nonnegative integer");
    }
    return std::stoull(rest);
  };
  if (auto k = with_client("single_client")) return single_client(*k);
  if (auto k = with_client("client_plus_generated")) return client_plus_generated(*k);
  throw InvalidInput("unknown centralized source '" + text + "'");
}

std::string CentralizedSource::name() const {
  switch (kind) {
    case Kind::kAllOriginal: return "all_original";
    case Kind::kAllGenerated: return "all_generated";
    case Kind::kSingleClient: return "A" + std::to_string(client + 1);
    case Kind::kClientPlusGenerated: return "B" + std::to_string(client + 1);
  }
  return "?";
}

CentralizedResult run_centralized(const MpcpaConfig& config, const CentralizedSource& source,
                                  std::span<const diffusion::ConditionalDenoiser> denoisers) {
  using Kind = CentralizedSource::Kind;
  const bool needs_generation = source.kind == Kind::kAllGenerated || source.kind == Kind::kClientPlusGenerated;
  validate_mpcpa(config, needs_generation ? 2 : 1);
  const std::size_t n = config.client_data.size();
  if ((source.kind == Kind::kSingleClient || source.kind == Kind::kClientPlusGenerated) && source.client >= n) {
    throw InvalidInput("centralized source refers to client " + std::to_string(source.client) + " but only " +
                       std::to_string(n) + " exist");
  }

  if (source.kind == Kind::kAllGenerated && config.gen_count == 0) {
    throw ConfigError("all_generated requires gen_count > 0");
  }
  // B_k with no generated samples is A_k; nothing to train or sample.
  const bool generates = needs_generation && config.gen_count > 0;

  std::vector<diffusion::ConditionalDenoiser> trained;
  if (generates && denoisers.empty()) {
    trained = train_all_denoisers(config);
    denoisers = trained;
  }
  if (generates && denoisers.size() != n) throw InvalidInput("run_centralized: one denoiser per client required");

  data::LabeledDataset train_set;
  std::size_t classifier_id = 0;
  std::vector<std::pair<std::size_t, const diffusion::ConditionalDenoiser*>> sources;
  switch (source.kind) {
    case Kind::kAllOriginal:
      train_set = config.client_data.front();
      for (std::size_t k = 1; k < n; ++k) train_set.append(config.client_data[k]);
      classifier_id = kCentralTarget;
      break;
    case Kind::kAllGenerated:
      for (std::size_t i = 0; i < n; ++i) sources.emplace_back(i, &denoisers[i]);
      train_set = generate_synthetic(sources, kCentralTarget, config.gen_count, config.num_classes, config.seed,
                                     config.parallelism).data;
      classifier_id = kCentralTarget + 1;
      break;
    case Kind::kSingleClient:
      train_set = config.client_data[source.client];
      classifier_id = source.client;
      break;
    case Kind::kClientPlusGenerated:
      classifier_id = source.client;
      if (!generates) {
        train_set = config.client_data[source.client];
        break;
      }
      for (std::size_t i = 0; i < n; ++i)
        if (i != source.client) sources.emplace_back(i, &denoisers[i]);
      train_set = concat(generate_synthetic(sources, source.client, config.gen_count, config.num_classes, config.seed,
                                            config.parallelism),
                         config.client_data[source.client]);
      break;
  }

  CentralizedResult r;
  r.train_size = train_set.size();
  r.classifier = train_classifier_for(config, classifier_id, train_set);
  evaluate_into(r.metrics, source.name(), config.eval, [&](const auto& d) { return nn::predict_labels(r.classifier, d); });
  return r;
}

void FedAvgConfig::validate() const {
  validate_shards(client_data, num_classes, 2);
  if (iters < 1) throw ConfigError("fedavg iters must be >= 1");
  try {
    classifier.train.validate();
  } catch (const InvalidInput& e) {
    throw ConfigError(e.what());
  }
  validate_eval(eval, client_data.front().dim, num_classes);
}

std::vector<double> average_parameters(std::span<const std::vector<double>> params, std::span<const double> weights) {
  require(!params.empty(), "average_parameters: nothing to average");
  const std::size_t p = params.front().size();
  for (const auto& v : params) require(v.size() == p, "average_parameters: parameter vectors differ in size");
  std::vector<double> mean(params.front());
  if (weights.empty()) {
    // Running mean: identical inputs reproduce themselves exactly.
    for (std::size_t k = 1; k < params.size(); ++k) {
      const double inv = 1.0 / static_cast<double>(k + 1);
      for (std::size_t i = 0; i < p; ++i) mean[i] += (params[k][i] - mean[i]) * inv;
    }
    return mean;
  }
  require(weights.size() == params.size(), "average_parameters: one weight per parameter vector required");
  const auto w = aggregation::normalize_weights(weights);
  std::fill(mean.begin(), mean.end(), 0.0);
  for (std::size_t k = 0; k < params.size(); ++k)
    for (std::size_t i = 0; i < p; ++i) mean[i] += w[k] * params[k][i];
  return mean;
}

FedAvgResult run_fedavg(const FedAvgConfig& config) {
  config.validate();
  const std::size_t n = config.client_data.size();
  const std::size_t dim = config.client_data.front().dim;
  auto global = nn::make_classifier(dim, config.classifier.hidden, config.num_classes,
                                    derive_seed(config.seed, Stream::kFedAvg, {kCentralTarget}));
  std::vector<double> sizes;
  if (config.weighted) {
    for (const auto& d : config.client_data) sizes.push_back(static_cast<double>(d.size()));
  }

  FedAvgResult result;
  std::vector<std::vector<double>> uploads(n);
  for (std::size_t round = 0; round < config.iters; ++round) {
    std::vector<Bytes> broadcast(n);
    for (std::size_t k = 0; k < n; ++k) {
      broadcast[k] = nn::serialize(global);
      result.ledger.record({ActorId::server(), ActorId::client(k), MessageKind::kFedAvgBroadcast, broadcast[k].size(), round});
    }
    for (std::size_t k = 0; k < n; ++k) {
      auto local = nn::deserialize_network(broadcast[k]);
      if (config.local_epochs > 0) {
        auto cfg = config.classifier.train;
        cfg.epochs = config.local_epochs;
        cfg.seed = derive_seed(config.seed, Stream::kFedAvg, {k, round});
        nn::train_classifier(local, config.client_data[k], cfg);
      }
      Bytes blob = nn::serialize(local);
      result.ledger.record({ActorId::client(k), ActorId::server(), MessageKind::kFedAvgUpdate, blob.size(), round});
      uploads[k] = nn::deserialize_network(blob).parameters();
    }
    global.set_parameters(average_parameters(uploads, sizes));
  }
  result.global = std::move(global);
  evaluate_into(result.metrics, "fedavg", config.eval, [&](const auto& d) { return nn::predict_labels(result.global, d); });
  return result;
}

}  // namespace mpcpa::protocol
