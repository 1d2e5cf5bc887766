#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "mpcpa/nn.hpp"

namespace mpcpa::data {

struct LabeledDataset {
  std::size_t dim = 0;
  std::size_t num_classes = 0;
  std::vector<RealVector> points;
  std::vector<std::size_t> labels;

  LabeledDataset() = default;
  LabeledDataset(std::size_t dim, std::size_t num_classes) : dim(dim), num_classes(num_classes) {}

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }

  void push_back(RealVector point, std::size_t label);
  void append(const LabeledDataset& other);

  // Throws InvalidInput on length mismatch, label >= num_classes, wrong
  // point dim or non-finite coordinates.
  void validate() const;

  std::vector<std::size_t> class_counts() const;
  LabeledDataset subset(std::span<const std::size_t> indices) const;

  friend bool operator==(const LabeledDataset&, const LabeledDataset&) = default;
};

struct ClassComponent {
  RealVector mean;
  double sigma = 1.0;  // isotropic
};

struct MixtureSpec {
  std::vector<ClassComponent> classes;
  std::vector<double> weights;  // class priors

  std::size_t dim() const { return classes.empty() ? 0 : classes.front().mean.size(); }
  std::size_t num_classes() const { return classes.size(); }
  void validate() const;

  // d=2, C=2, means (-1,-1) and (+1,+1), sigma 0.2, equal priors.
  static MixtureSpec benchmark();
};

LabeledDataset generate_mixture(const MixtureSpec& spec, std::size_t count, std::uint64_t seed);

enum class PartitionMode { kIid, kLabelSkew, kSiteShift };

struct PartitionSpec {
  PartitionMode mode = PartitionMode::kIid;
  std::size_t n_clients = 2;
  double alpha = 1.0;                // label_skew concentration
  std::vector<RealVector> offsets;   // site_shift, one per client
  std::size_t max_retries = 100;

  void validate(std::size_t dim) const;
};

// iid: balanced random split (sizes differ by at most one).
// label_skew: each class is split across clients by a Dirichlet(alpha)
//   proportion draw; resampled until every shard is nonempty.
// site_shift: the iid split of the same seed, each client re-centred by its
//   offset vector.
std::vector<LabeledDataset> partition(const LabeledDataset& data, const PartitionSpec& spec,
                                      std::uint64_t seed);

struct SplitFractions {
  double train = 0.7;
  double validation = 0.15;
  double test = 0.15;
};

struct DatasetSplit {
  LabeledDataset train;
  LabeledDataset validation;
  LabeledDataset test;
};

// Sizes: round(train*N), round(validation*N), remainder to test.
DatasetSplit split(const LabeledDataset& data, const SplitFractions& fractions, std::uint64_t seed);

// Text format: header "d C count", then one row per point: label followed by
// d coordinates (17 significant digits, exact round trip).
void write_dataset(std::ostream& out, const LabeledDataset& data);
LabeledDataset read_dataset(std::istream& in);
void save_dataset(const std::filesystem::path& path, const LabeledDataset& data);
LabeledDataset load_dataset(const std::filesystem::path& path);

}  // namespace mpcpa::data
