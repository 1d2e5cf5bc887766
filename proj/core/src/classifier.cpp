#include "mpcpa/classifier.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "mpcpa/error.hpp"
#include "mpcpa/rng.hpp"

namespace mpcpa::nn {

DenseNetwork make_classifier(std::size_t input_dim, std::span<const std::size_t> hidden, std::size_t num_classes,
                             std::uint64_t seed) {
  require(num_classes >= 2, "make_classifier: at least two classes required");
  return DenseNetwork::glorot(input_dim, hidden, num_classes, seed);
}

std::vector<double> train_classifier(DenseNetwork& net, const data::LabeledDataset& data, const TrainConfig& cfg) {
  cfg.validate();
  data.validate();
  require(!data.empty(), "train_classifier: empty dataset");
  require(data.dim == net.input_dim(), "train_classifier: data dim does not match network input");
  require(data.num_classes == net.output_dim(), "train_classifier: class count does not match network output");
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> epoch_losses;
  Eigen::MatrixXd batch;
  std::vector<std::size_t> labels;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t b = std::min(cfg.batch_size, order.size() - start);
      batch.resize(static_cast<Eigen::Index>(data.dim), static_cast<Eigen::Index>(b));
      labels.resize(b);
      for (std::size_t j = 0; j < b; ++j) {
        const auto& p = data.points[order[start + j]];
        for (std::size_t r = 0; r < data.dim; ++r) batch(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = p[r];
        labels[j] = data.labels[order[start + j]];
      }
      auto res = backward_batch_cross_entropy(net, batch, labels);
      apply_sgd(net, res.gradient, cfg.learning_rate);
      loss_sum += res.loss * static_cast<double>(b);
    }
    epoch_losses.push_back(loss_sum / static_cast<double>(order.size()));
  }
  return epoch_losses;
}

std::vector<RealVector> predict_proba(const DenseNetwork& net, const data::LabeledDataset& data) {
  require(data.dim == net.input_dim(), "predict_proba: data dim does not match network input");
  std::vector<RealVector> out;
  out.reserve(data.size());
  for (const auto& p : data.points) out.push_back(softmax(forward(net, p)));
  return out;
}

std::vector<std::size_t> predict_labels(const DenseNetwork& net, const data::LabeledDataset& data) {
  std::vector<std::size_t> out;
  out.reserve(data.size());
  for (const auto& p : predict_proba(net, data)) {
    out.push_back(static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin()));
  }
  return out;
}

double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> truth) {
  require(predicted.size() == truth.size(), "accuracy: length mismatch");
  require(!truth.empty(), "accuracy: empty input");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

}  // namespace mpcpa::nn
