#include "mpcpa/nn.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "mpcpa/error.hpp"
#include "mpcpa/rng.hpp"

namespace mpcpa {

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

namespace nn {
namespace {

constexpr std::uint32_t kNetworkFormatVersion = 1;

Eigen::Map<const Eigen::VectorXd> as_eigen(std::span<const double> v) {
  return {v.data(), static_cast<Eigen::Index>(v.size())};
}

void activate(Eigen::MatrixXd& z, Activation a) {
  if (a == Activation::kRelu) z = z.cwiseMax(0.0);
}

// Stores the per-layer post-activation outputs; acts[0] is the input.
std::vector<Eigen::MatrixXd> forward_trace(const DenseNetwork& net, const Eigen::MatrixXd& inputs) {
  require(static_cast<std::size_t>(inputs.rows()) == net.input_dim(),
          "forward: input dim " + std::to_string(inputs.rows()) + " != network input dim " +
              std::to_string(net.input_dim()));
  std::vector<Eigen::MatrixXd> acts;
  acts.reserve(net.layers().size() + 1);
  acts.push_back(inputs);
  for (const auto& layer : net.layers()) {
    Eigen::MatrixXd z = layer.weights * acts.back();
    z.colwise() += layer.bias;
    activate(z, layer.activation);
    acts.push_back(std::move(z));
  }
  return acts;
}

// delta: dLoss/dOutput (already divided by the batch size).
Gradient backprop(const DenseNetwork& net, const std::vector<Eigen::MatrixXd>& acts, Eigen::MatrixXd delta) {
  const auto& layers = net.layers();
  Gradient g;
  g.layers.resize(layers.size());
  for (std::size_t l = layers.size(); l-- > 0;) {
    const auto& layer = layers[l];
    if (layer.activation == Activation::kRelu) {
      // acts[l+1] is the relu output; derivative is 1 where output > 0.
      delta = delta.cwiseProduct((acts[l + 1].array() > 0.0).cast<double>().matrix());
    }
    g.layers[l].weights = delta * acts[l].transpose();
    g.layers[l].bias = delta.rowwise().sum();
    if (l > 0) delta = layer.weights.transpose() * delta;
  }
  return g;
}

}  // namespace

DenseNetwork::DenseNetwork(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
  require(!layers_.empty(), "DenseNetwork: at least one layer required");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    require(l.weights.rows() > 0 && l.weights.cols() > 0, "DenseNetwork: empty weight matrix");
    require(l.bias.size() == l.weights.rows(),
            "DenseNetwork: layer " + std::to_string(i) + " bias size does not match weight rows");
    if (i + 1 < layers_.size()) {
      require(layers_[i + 1].in_dim() == l.out_dim(),
              "DenseNetwork: layer " + std::to_string(i) + " output dim does not chain into layer " +
                  std::to_string(i + 1));
    }
  }
  require(parameters_finite(), "DenseNetwork: non-finite parameter");
}

DenseNetwork DenseNetwork::glorot(std::size_t input_dim, std::span<const std::size_t> hidden,
                                  std::size_t output_dim, std::uint64_t seed) {
  require(input_dim > 0 && output_dim > 0, "DenseNetwork::glorot: dims must be positive");
  Rng rng(seed);
  std::vector<DenseLayer> layers;
  std::size_t fan_in = input_dim;
  auto make = [&](std::size_t fan_out, Activation act) {
    require(fan_out > 0, "DenseNetwork::glorot: hidden width must be positive");
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-limit, limit);
    DenseLayer layer;
    layer.weights.resize(static_cast<Eigen::Index>(fan_out), static_cast<Eigen::Index>(fan_in));
    for (Eigen::Index r = 0; r < layer.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) layer.weights(r, c) = u(rng);
    layer.bias = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(fan_out));
    layer.activation = act;
    layers.push_back(std::move(layer));
    fan_in = fan_out;
  };
  for (std::size_t h : hidden) make(h, Activation::kRelu);
  make(output_dim, Activation::kIdentity);
  return DenseNetwork(std::move(layers));
}

std::size_t DenseNetwork::input_dim() const { return layers_.empty() ? 0 : layers_.front().in_dim(); }
std::size_t DenseNetwork::output_dim() const { return layers_.empty() ? 0 : layers_.back().out_dim(); }

std::size_t DenseNetwork::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.weights.size() + l.bias.size());
  return n;
}

std::vector<double> DenseNetwork::parameters() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& l : layers_) {
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) flat.push_back(l.weights(r, c));
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) flat.push_back(l.bias(r));
  }
  return flat;
}

void DenseNetwork::set_parameters(std::span<const double> flat) {
  require(flat.size() == parameter_count(), "set_parameters: expected " + std::to_string(parameter_count()) +
                                                " values, got " + std::to_string(flat.size()));
  require(all_finite(flat), "set_parameters: non-finite parameter");
  std::size_t k = 0;
  for (auto& l : layers_) {
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) l.weights(r, c) = flat[k++];
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias(r) = flat[k++];
  }
}

bool DenseNetwork::parameters_finite() const {
  return std::all_of(layers_.begin(), layers_.end(), [](const DenseLayer& l) {
    return l.weights.allFinite() && l.bias.allFinite();
  });
}

bool operator==(const DenseNetwork& a, const DenseNetwork& b) {
  if (a.layers_.size() != b.layers_.size()) return false;
  for (std::size_t i = 0; i < a.layers_.size(); ++i) {
    const auto& x = a.layers_[i];
    const auto& y = b.layers_[i];
    if (x.activation != y.activation || x.weights.rows() != y.weights.rows() ||
        x.weights.cols() != y.weights.cols() || x.weights != y.weights || x.bias != y.bias) {
      return false;
    }
  }
  return true;
}

Gradient Gradient::zeros_like(const DenseNetwork& net) {
  Gradient g;
  for (const auto& l : net.layers()) {
    g.layers.push_back({Eigen::MatrixXd::Zero(l.weights.rows(), l.weights.cols()),
                        Eigen::VectorXd::Zero(l.bias.size())});
  }
  return g;
}

std::vector<double> Gradient::flatten() const {
  std::vector<double> flat;
  for (const auto& l : layers) {
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) flat.push_back(l.weights(r, c));
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) flat.push_back(l.bias(r));
  }
  return flat;
}

RealVector forward(const DenseNetwork& net, std::span<const double> x) {
  require(x.size() == net.input_dim(), "forward: input dim " + std::to_string(x.size()) +
                                           " != network input dim " + std::to_string(net.input_dim()));
  Eigen::VectorXd a = as_eigen(x);
  for (const auto& layer : net.layers()) {
    Eigen::VectorXd z = layer.weights * a + layer.bias;
    if (layer.activation == Activation::kRelu) z = z.cwiseMax(0.0);
    a = std::move(z);
  }
  return RealVector(a.data(), a.data() + a.size());
}

Eigen::MatrixXd forward_batch(const DenseNetwork& net, const Eigen::MatrixXd& inputs) {
  require(static_cast<std::size_t>(inputs.rows()) == net.input_dim(), "forward_batch: input dim mismatch");
  Eigen::MatrixXd a = inputs;
  for (const auto& layer : net.layers()) {
    Eigen::MatrixXd z = layer.weights * a;
    z.colwise() += layer.bias;
    activate(z, layer.activation);
    a = std::move(z);
  }
  return a;
}

RealVector softmax(std::span<const double> logits) {
  require(!logits.empty(), "softmax: empty logits");
  const double m = *std::max_element(logits.begin(), logits.end());
  RealVector p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

double cross_entropy_loss(std::span<const double> logits, std::size_t label) {
  require(label < logits.size(), "cross_entropy_loss: label " + std::to_string(label) +
                                     " out of range for " + std::to_string(logits.size()) + " classes");
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - m);
  const double loss = m + std::log(sum) - logits[label];
  return std::max(0.0, loss);
}

double mse_loss(std::span<const double> pred, std::span<const double> target) {
  require(pred.size() == target.size(), "mse_loss: dim mismatch");
  require(!pred.empty(), "mse_loss: empty vectors");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    s += d * d;
  }
  return s / static_cast<double>(pred.size());
}

BackwardResult backward(const DenseNetwork& net, std::span<const double> x, const Target& target) {
  require(x.size() == net.input_dim(), "backward: input dim mismatch");
  Eigen::MatrixXd in = as_eigen(x);
  if (target.kind == LossKind::kCrossEntropy) {
    const std::size_t label = target.label;
    return backward_batch_cross_entropy(net, in, std::span<const std::size_t>(&label, 1));
  }
  require(target.values.size() == net.output_dim(), "backward: target dim mismatch");
  Eigen::MatrixXd t = as_eigen(target.values);
  return backward_batch_mse(net, in, t);
}

BackwardResult backward_batch_mse(const DenseNetwork& net, const Eigen::MatrixXd& inputs,
                                  const Eigen::MatrixXd& targets) {
  require(inputs.cols() > 0, "backward: empty batch");
  auto acts = forward_trace(net, inputs);
  const Eigen::MatrixXd& out = acts.back();
  require(targets.rows() == out.rows() && targets.cols() == out.cols(), "backward: target shape mismatch");
  const double batch = static_cast<double>(inputs.cols());
  const double dim = static_cast<double>(out.rows());
  Eigen::MatrixXd diff = out - targets;
  BackwardResult r;
  r.loss = diff.squaredNorm() / (dim * batch);
  r.gradient = backprop(net, acts, diff * (2.0 / (dim * batch)));
  return r;
}

BackwardResult backward_batch_cross_entropy(const DenseNetwork& net, const Eigen::MatrixXd& inputs,
                                            std::span<const std::size_t> labels) {
  require(inputs.cols() > 0, "backward: empty batch");
  require(static_cast<std::size_t>(inputs.cols()) == labels.size(), "backward: label count mismatch");
  auto acts = forward_trace(net, inputs);
  const Eigen::MatrixXd& logits = acts.back();
  const double batch = static_cast<double>(inputs.cols());
  Eigen::MatrixXd delta(logits.rows(), logits.cols());
  double loss = 0.0;
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const std::size_t y = labels[static_cast<std::size_t>(j)];
    require(y < static_cast<std::size_t>(logits.rows()), "backward: label out of range");
    const double m = logits.col(j).maxCoeff();
    Eigen::VectorXd e = (logits.col(j).array() - m).exp().matrix();
    const double sum = e.sum();
    loss += m + std::log(sum) - logits(static_cast<Eigen::Index>(y), j);
    delta.col(j) = e / sum;
    delta(static_cast<Eigen::Index>(y), j) -= 1.0;
  }
  BackwardResult r;
  r.loss = loss / batch;
  r.gradient = backprop(net, acts, delta / batch);
  return r;
}

void apply_sgd(DenseNetwork& net, const Gradient& gradient, double learning_rate) {
  auto& layers = net.mutable_layers();
  require(gradient.layers.size() == layers.size(), "sgd_step: gradient layer count mismatch");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    require(gradient.layers[i].weights.rows() == layers[i].weights.rows() &&
                gradient.layers[i].weights.cols() == layers[i].weights.cols() &&
                gradient.layers[i].bias.size() == layers[i].bias.size(),
            "sgd_step: gradient shape mismatch at layer " + std::to_string(i));
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].weights -= learning_rate * gradient.layers[i].weights;
    layers[i].bias -= learning_rate * gradient.layers[i].bias;
  }
}

DenseNetwork sgd_step(DenseNetwork net, const Gradient& gradient, double learning_rate) {
  apply_sgd(net, gradient, learning_rate);
  return net;
}

void TrainConfig::validate() const {
  require(std::isfinite(learning_rate) && learning_rate > 0.0, "TrainConfig: learning_rate must be > 0");
  require(epochs >= 1, "TrainConfig: epochs must be >= 1");
  require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
}

void write_network(ByteWriter& out, const DenseNetwork& net) {
  out.put_tag("MPNN");
  out.put_u32(kNetworkFormatVersion);
  out.put_u32(static_cast<std::uint32_t>(net.input_dim()));
  out.put_u32(static_cast<std::uint32_t>(net.layers().size()));
  for (const auto& l : net.layers()) {
    out.put_u32(static_cast<std::uint32_t>(l.out_dim()));
    out.put_u32(static_cast<std::uint32_t>(l.in_dim()));
    out.put_u32(static_cast<std::uint32_t>(l.activation));
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) out.put_f64(l.weights(r, c));
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) out.put_f64(l.bias(r));
  }
}

DenseNetwork read_network(ByteReader& in) {
  in.expect_tag("MPNN");
  const std::uint32_t version = in.get_u32();
  if (version != kNetworkFormatVersion) throw FormatError("unsupported network format version " + std::to_string(version));
  const std::uint32_t input_dim = in.get_u32();
  const std::uint32_t count = in.get_u32();
  std::vector<DenseLayer> layers;
  std::uint32_t expected_in = input_dim;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t out_dim = in.get_u32();
    const std::uint32_t in_dim = in.get_u32();
    const std::uint32_t act = in.get_u32();
    if (in_dim != expected_in) throw FormatError("network blob: layer dims do not chain");
    if (act > 1) throw FormatError("network blob: unknown activation tag " + std::to_string(act));
    if (static_cast<std::uint64_t>(out_dim) * in_dim * 8 > in.remaining()) throw FormatError("network blob: truncated");
    DenseLayer l;
    l.weights.resize(out_dim, in_dim);
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) l.weights(r, c) = in.get_f64();
    l.bias.resize(out_dim);
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias(r) = in.get_f64();
    l.activation = static_cast<Activation>(act);
    layers.push_back(std::move(l));
    expected_in = out_dim;
  }
  try {
    return DenseNetwork(std::move(layers));
  } catch (const InvalidInput& e) {
    throw FormatError(std::string("network blob: ") + e.what());
  }
}

Bytes serialize(const DenseNetwork& net) {
  ByteWriter w;
  write_network(w, net);
  return std::move(w).take();
}

DenseNetwork deserialize_network(std::span<const std::uint8_t> blob) {
  ByteReader r(blob);
  DenseNetwork net = read_network(r);
  if (r.remaining() != 0) throw FormatError("network blob: trailing bytes");
  return net;
}

}  // namespace nn
}  // namespace mpcpa
