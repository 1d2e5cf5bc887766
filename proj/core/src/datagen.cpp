#include "mpcpa/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "mpcpa/error.hpp"
#include "mpcpa/rng.hpp"

namespace mpcpa::data {

void LabeledDataset::push_back(RealVector point, std::size_t label) {
  require(point.size() == dim, "LabeledDataset: point dim " + std::to_string(point.size()) + " != " + std::to_string(dim));
  require(label < num_classes, "LabeledDataset: label " + std::to_string(label) + " >= num_classes");
  points.push_back(std::move(point));
  labels.push_back(label);
}

void LabeledDataset::append(const LabeledDataset& other) {
  require(other.dim == dim && other.num_classes == num_classes, "LabeledDataset::append: incompatible datasets");
  points.insert(points.end(), other.points.begin(), other.points.end());
  labels.insert(labels.end(), other.labels.begin(), other.labels.end());
}

void LabeledDataset::validate() const {
  require(dim > 0, "LabeledDataset: dim must be positive");
  require(num_classes > 0, "LabeledDataset: num_classes must be positive");
  require(points.size() == labels.size(), "LabeledDataset: points and labels differ in length");
  for (std::size_t i = 0; i < points.size(); ++i) {
    require(points[i].size() == dim, "LabeledDataset: point " + std::to_string(i) + " has wrong dim");
    require(all_finite(points[i]), "LabeledDataset: point " + std::to_string(i) + " is not finite");
    require(labels[i] < num_classes, "LabeledDataset: label of point " + std::to_string(i) + " out of range");
  }
}

std::vector<std::size_t> LabeledDataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t y : labels) ++counts.at(y);
  return counts;
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
  LabeledDataset out(dim, num_classes);
  out.points.reserve(indices.size());
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) {
    out.points.push_back(points.at(i));
    out.labels.push_back(labels.at(i));
  }
  return out;
}

void MixtureSpec::validate() const {
  require(!classes.empty(), "MixtureSpec: at least one class required");
  require(weights.size() == classes.size(), "MixtureSpec: one prior weight per class required");
  const std::size_t d = classes.front().mean.size();
  require(d > 0, "MixtureSpec: mean dimension must be positive");
  double sum = 0.0;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    require(classes[c].mean.size() == d, "MixtureSpec: class " + std::to_string(c) + " mean has wrong dim");
    require(all_finite(classes[c].mean), "MixtureSpec: non-finite mean");
    require(std::isfinite(classes[c].sigma) && classes[c].sigma > 0.0,
            "MixtureSpec: class " + std::to_string(c) + " sigma must be > 0");
    require(std::isfinite(weights[c]) && weights[c] >= 0.0, "MixtureSpec: weights must be nonnegative");
    sum += weights[c];
  }
  require(std::abs(sum - 1.0) <= 1e-12, "MixtureSpec: weights must sum to 1");
}

MixtureSpec MixtureSpec::benchmark() {
  MixtureSpec s;
  s.classes = {{{-1.0, -1.0}, 0.2}, {{1.0, 1.0}, 0.2}};
  s.weights = {0.5, 0.5};
  return s;
}

LabeledDataset generate_mixture(const MixtureSpec& spec, std::size_t count, std::uint64_t seed) {
  spec.validate();
  require(count >= 1, "generate_mixture: count must be >= 1");
  Rng rng(seed);
  std::discrete_distribution<std::size_t> prior(spec.weights.begin(), spec.weights.end());
  std::normal_distribution<double> normal(0.0, 1.0);
  LabeledDataset out(spec.dim(), spec.num_classes());
  out.points.reserve(count);
  out.labels.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t y = prior(rng);
    const auto& comp = spec.classes[y];
    RealVector x(comp.mean.size());
    for (std::size_t j = 0; j < x.size(); ++j) x[j] = comp.mean[j] + comp.sigma * normal(rng);
    out.points.push_back(std::move(x));
    out.labels.push_back(y);
  }
  return out;
}

void PartitionSpec::validate(std::size_t dim) const {
  require(n_clients >= 2, "PartitionSpec: n_clients must be >= 2");
  if (mode == PartitionMode::kLabelSkew) {
    require(std::isfinite(alpha) && alpha > 0.0, "PartitionSpec: alpha must be > 0 for label_skew");
  }
  if (mode == PartitionMode::kSiteShift) {
    require(offsets.size() == n_clients, "PartitionSpec: site_shift needs one offset per client");
    for (const auto& o : offsets) {
      require(o.size() == dim, "PartitionSpec: offset dim must equal data dim");
      require(all_finite(o), "PartitionSpec: non-finite offset");
    }
  }
  require(max_retries >= 1, "PartitionSpec: max_retries must be >= 1");
}

namespace {

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

std::vector<std::vector<std::size_t>> iid_assignment(std::size_t n, std::size_t clients, Rng& rng) {
  auto idx = shuffled_indices(n, rng);
  std::vector<std::vector<std::size_t>> shards(clients);
  const std::size_t base = n / clients;
  const std::size_t extra = n % clients;
  std::size_t pos = 0;
  for (std::size_t k = 0; k < clients; ++k) {
    const std::size_t take = base + (k < extra ? 1 : 0);
    shards[k].assign(idx.begin() + static_cast<std::ptrdiff_t>(pos), idx.begin() + static_cast<std::ptrdiff_t>(pos + take));
    pos += take;
  }
  return shards;
}

std::vector<double> dirichlet(std::size_t k, double alpha, Rng& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> p(k);
  double sum = 0.0;
  for (auto& v : p) {
    v = gamma(rng);
    sum += v;
  }
  if (!(sum > 0.0)) {
    // All draws underflowed (tiny alpha): put the mass on one uniformly chosen client.
    std::fill(p.begin(), p.end(), 0.0);
    p[std::uniform_int_distribution<std::size_t>(0, k - 1)(rng)] = 1.0;
    return p;
  }
  for (auto& v : p) v /= sum;
  return p;
}

std::vector<std::vector<std::size_t>> label_skew_assignment(const LabeledDataset& data, std::size_t clients,
                                                            double alpha, Rng& rng) {
  std::vector<std::vector<std::size_t>> by_class(data.num_classes);
  for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);
  std::vector<std::vector<std::size_t>> shards(clients);
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    const auto p = dirichlet(clients, alpha, rng);
    const double n = static_cast<double>(members.size());
    double cum = 0.0;
    std::size_t start = 0;
    for (std::size_t k = 0; k < clients; ++k) {
      cum += p[k];
      std::size_t end = (k + 1 == clients) ? members.size()
                                           : std::min(members.size(), static_cast<std::size_t>(std::llround(cum * n)));
      end = std::max(end, start);
      shards[k].insert(shards[k].end(), members.begin() + static_cast<std::ptrdiff_t>(start),
                       members.begin() + static_cast<std::ptrdiff_t>(end));
      start = end;
    }
  }
  for (auto& s : shards) std::sort(s.begin(), s.end());
  return shards;
}

}  // namespace

std::vector<LabeledDataset> partition(const LabeledDataset& data, const PartitionSpec& spec, std::uint64_t seed) {
  data.validate();
  require(!data.empty(), "partition: empty dataset");
  spec.validate(data.dim);
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> shards;
  bool ok = false;
  for (std::size_t attempt = 0; attempt < spec.max_retries && !ok; ++attempt) {
    shards = spec.mode == PartitionMode::kLabelSkew ? label_skew_assignment(data, spec.n_clients, spec.alpha, rng)
                                                    : iid_assignment(data.size(), spec.n_clients, rng);
    ok = std::none_of(shards.begin(), shards.end(), [](const auto& s) { return s.empty(); });
  }
  if (!ok) {
    throw ConfigError("partition: could not produce " + std::to_string(spec.n_clients) + " nonempty shards within " +
                      std::to_string(spec.max_retries) + " attempts");
  }
  std::vector<LabeledDataset> out;
  out.reserve(spec.n_clients);
  for (std::size_t k = 0; k < spec.n_clients; ++k) {
    LabeledDataset shard = data.subset(shards[k]);
    if (spec.mode == PartitionMode::kSiteShift) {
      for (auto& p : shard.points)
        for (std::size_t j = 0; j < p.size(); ++j) p[j] += spec.offsets[k][j];
    }
    out.push_back(std::move(shard));
  }
  return out;
}

DatasetSplit split(const LabeledDataset& data, const SplitFractions& f, std::uint64_t seed) {
  data.validate();
  require(f.train > 0.0 && f.validation > 0.0 && f.test > 0.0, "split: every fraction must be positive");
  require(std::abs(f.train + f.validation + f.test - 1.0) <= 1e-9, "split: fractions must sum to 1");
  Rng rng(seed);
  auto idx = shuffled_indices(data.size(), rng);
  const double n = static_cast<double>(data.size());
  const std::size_t n_train = std::min(data.size(), static_cast<std::size_t>(std::llround(f.train * n)));
  const std::size_t n_val = std::min(data.size() - n_train, static_cast<std::size_t>(std::llround(f.validation * n)));
  std::span<const std::size_t> all(idx);
  DatasetSplit s;
  s.train = data.subset(all.subspan(0, n_train));
  s.validation = data.subset(all.subspan(n_train, n_val));
  s.test = data.subset(all.subspan(n_train + n_val));
  return s;
}

void write_dataset(std::ostream& out, const LabeledDataset& data) {
  out << data.dim << ' ' << data.num_classes << ' ' << data.size() << '\n';
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < data.size(); ++i) {
    out << data.labels[i];
    for (double v : data.points[i]) out << ' ' << v;
    out << '\n';
  }
}

LabeledDataset read_dataset(std::istream& in) {
  std::size_t dim = 0, classes = 0, count = 0;
  if (!(in >> dim >> classes >> count)) throw FormatError("dataset: missing header 'd C count'");
  if (dim == 0 || classes == 0) throw FormatError("dataset: header dims must be positive");
  LabeledDataset data(dim, classes);
  data.points.reserve(count);
  data.labels.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t y = 0;
    RealVector x(dim);
    if (!(in >> y)) throw FormatError("dataset: truncated at row " + std::to_string(i));
    for (auto& v : x)
      if (!(in >> v)) throw FormatError("dataset: truncated at row " + std::to_string(i));
    if (y >= classes) throw FormatError("dataset: label out of range at row " + std::to_string(i));
    data.points.push_back(std::move(x));
    data.labels.push_back(y);
  }
  return data;
}

void save_dataset(const std::filesystem::path& path, const LabeledDataset& data) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path.string());
  write_dataset(out, data);
}

LabeledDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path.string());
  try {
    return read_dataset(in);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace mpcpa::data
