#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mpcpa/datagen.hpp"
#include "mpcpa/nn.hpp"

namespace mpcpa::nn {

struct ClassifierSpec {
  std::vector<std::size_t> hidden{32};
  TrainConfig train{0.1, 60, 32, 0};
};

DenseNetwork make_classifier(std::size_t input_dim, std::span<const std::size_t> hidden,
                             std::size_t num_classes, std::uint64_t seed);

// Mini-batch SGD on mean cross-entropy. The example order is reshuffled each
// epoch from cfg.seed. Returns the mean training loss of every epoch.
std::vector<double> train_classifier(DenseNetwork& net, const data::LabeledDataset& data,
                                     const TrainConfig& cfg);

std::vector<RealVector> predict_proba(const DenseNetwork& net, const data::LabeledDataset& data);
std::vector<std::size_t> predict_labels(const DenseNetwork& net, const data::LabeledDataset& data);

double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> truth);

}  // namespace mpcpa::nn
