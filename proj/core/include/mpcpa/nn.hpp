#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "mpcpa/bytes.hpp"

namespace mpcpa {

// Finite real vector. Data points x_0, noised states x_t, logits and noise
// draws all travel as RealVector.
using RealVector = std::vector<double>;

bool all_finite(std::span<const double> v);

namespace nn {

enum class Activation : std::uint8_t { kRelu = 0, kIdentity = 1 };

struct DenseLayer {
  Eigen::MatrixXd weights;  // out x in
  Eigen::VectorXd bias;     // out
  Activation activation = Activation::kIdentity;

  std::size_t in_dim() const { return static_cast<std::size_t>(weights.cols()); }
  std::size_t out_dim() const { return static_cast<std::size_t>(weights.rows()); }
};

// Fully connected feed-forward network. Layer dims must chain and every
// parameter must be finite; the constructor enforces both.
class DenseNetwork {
 public:
  DenseNetwork() = default;
  explicit DenseNetwork(std::vector<DenseLayer> layers);

  // relu hidden layers, identity output; weights uniform in
  // +-sqrt(6/(fan_in+fan_out)), zero biases.
  static DenseNetwork glorot(std::size_t input_dim, std::span<const std::size_t> hidden,
                             std::size_t output_dim, std::uint64_t seed);

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t parameter_count() const;
  bool empty() const { return layers_.empty(); }

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& mutable_layers() { return layers_; }

  // Flattened view, layer by layer: weights (row-major) then bias.
  std::vector<double> parameters() const;
  void set_parameters(std::span<const double> flat);

  bool parameters_finite() const;

  friend bool operator==(const DenseNetwork& a, const DenseNetwork& b);

 private:
  std::vector<DenseLayer> layers_;
};

struct LayerGradient {
  Eigen::MatrixXd weights;
  Eigen::VectorXd bias;
};

struct Gradient {
  std::vector<LayerGradient> layers;

  static Gradient zeros_like(const DenseNetwork& net);
  std::vector<double> flatten() const;  // same order as DenseNetwork::parameters
};

enum class LossKind { kCrossEntropy, kMse };

// Supervision for one example: a class index (cross-entropy) or a regression
// target (mse).
struct Target {
  LossKind kind = LossKind::kMse;
  std::size_t label = 0;
  RealVector values;

  static Target class_label(std::size_t label) { return {LossKind::kCrossEntropy, label, {}}; }
  static Target regression(RealVector values) { return {LossKind::kMse, 0, std::move(values)}; }
};

struct BackwardResult {
  double loss = 0.0;
  Gradient gradient;
};

RealVector forward(const DenseNetwork& net, std::span<const double> x);

// Columns of `inputs` are examples; returns output_dim x batch.
Eigen::MatrixXd forward_batch(const DenseNetwork& net, const Eigen::MatrixXd& inputs);

RealVector softmax(std::span<const double> logits);
double cross_entropy_loss(std::span<const double> logits, std::size_t label);
double mse_loss(std::span<const double> pred, std::span<const double> target);

BackwardResult backward(const DenseNetwork& net, std::span<const double> x, const Target& target);

// Mean loss and mean gradient over the columns of `inputs`.
BackwardResult backward_batch_mse(const DenseNetwork& net, const Eigen::MatrixXd& inputs,
                                  const Eigen::MatrixXd& targets);
BackwardResult backward_batch_cross_entropy(const DenseNetwork& net, const Eigen::MatrixXd& inputs,
                                            std::span<const std::size_t> labels);

// theta <- theta - lr * g, in place.
void apply_sgd(DenseNetwork& net, const Gradient& gradient, double learning_rate);
DenseNetwork sgd_step(DenseNetwork net, const Gradient& gradient, double learning_rate);

struct TrainConfig {
  double learning_rate = 0.05;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;

  void validate() const;
};

// Portable blob: "MPNN", u32 version, u32 input_dim, u32 layer_count, then
// per layer u32 out, u32 in, u32 activation, out*in f64 row-major weights,
// out f64 bias. All little-endian.
void write_network(ByteWriter& out, const DenseNetwork& net);
DenseNetwork read_network(ByteReader& in);
Bytes serialize(const DenseNetwork& net);
DenseNetwork deserialize_network(std::span<const std::uint8_t> blob);

}  // namespace nn
}  // namespace mpcpa
