#include "mpcpa/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <string>

#include "mpcpa/error.hpp"
#include "mpcpa/rng.hpp"

namespace mpcpa::diffusion {
namespace {

constexpr std::uint32_t kDenoiserFormatVersion = 1;

void check_dims(std::span<const double> a, std::span<const double> b, const char* op) {
  require(a.size() == b.size(), std::string(op) + ": dimension mismatch (" + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()) + ")");
}

}  // namespace

NoiseSchedule NoiseSchedule::linear(std::size_t steps, double beta_min, double beta_max) {
  require(steps >= 2, "build_linear_schedule: T must be >= 2");
  require(std::isfinite(beta_min) && std::isfinite(beta_max) && 0.0 < beta_min && beta_min < beta_max &&
              beta_max < 1.0,
          "build_linear_schedule: need 0 < beta_min < beta_max < 1");
  NoiseSchedule s;
  s.beta_min_ = beta_min;
  s.beta_max_ = beta_max;
  s.beta_.resize(steps);
  s.alpha_.resize(steps);
  s.alpha_bar_.resize(steps);
  const double span = beta_max - beta_min;
  double prod = 1.0;
  for (std::size_t i = 0; i < steps; ++i) {
    s.beta_[i] = beta_min + span * static_cast<double>(i) / static_cast<double>(steps - 1);
    s.alpha_[i] = 1.0 - s.beta_[i];
    prod *= s.alpha_[i];
    s.alpha_bar_[i] = prod;
  }
  return s;
}

std::size_t NoiseSchedule::index(std::size_t t) const {
  if (t < 1 || t > beta_.size()) {
    throw InvalidInput("time step " + std::to_string(t) + " outside 1.." + std::to_string(beta_.size()));
  }
  return t - 1;
}

NoiseSchedule build_linear_schedule(std::size_t steps, double beta_min, double beta_max) {
  return NoiseSchedule::linear(steps, beta_min, beta_max);
}

RealVector forward_diffuse_step(std::span<const double> x_prev, std::size_t t, const NoiseSchedule& schedule,
                                std::span<const double> noise) {
  check_dims(x_prev, noise, "forward_diffuse_step");
  const double keep = std::sqrt(1.0 - schedule.beta(t));
  const double scale = std::sqrt(schedule.beta(t));
  RealVector out(x_prev.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep * x_prev[i] + scale * noise[i];
  return out;
}

RealVector forward_diffuse_closed(std::span<const double> x0, std::size_t t, const NoiseSchedule& schedule,
                                  std::span<const double> noise) {
  check_dims(x0, noise, "forward_diffuse_closed");
  const double ab = schedule.alpha_bar(t);
  const double keep = std::sqrt(ab);
  const double scale = std::sqrt(1.0 - ab);
  RealVector out(x0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep * x0[i] + scale * noise[i];
  return out;
}

RealVector reverse_step(std::span<const double> x_t, std::span<const double> predicted_noise, std::size_t t,
                        const NoiseSchedule& schedule, std::span<const double> z) {
  check_dims(x_t, predicted_noise, "reverse_step");
  check_dims(x_t, z, "reverse_step");
  const double alpha = schedule.alpha(t);
  const double coef = (1.0 - alpha) / std::sqrt(1.0 - schedule.alpha_bar(t));
  const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
  const double sigma = std::sqrt(schedule.beta(t));
  RealVector out(x_t.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = inv_sqrt_alpha * (x_t[i] - coef * predicted_noise[i]) + sigma * z[i];
  }
  return out;
}

RealVector time_embedding(std::size_t t, std::size_t steps) {
  require(steps >= 1 && t >= 1 && t <= steps, "time_embedding: t outside 1..T");
  const double u = static_cast<double>(t) / static_cast<double>(steps);
  RealVector e;
  e.reserve(kTimeEmbeddingDim);
  e.push_back(u);
  double freq = std::numbers::pi;
  for (std::size_t k = 0; k < kTimeFrequencies; ++k, freq *= 2.0) {
    e.push_back(std::sin(freq * u));
    e.push_back(std::cos(freq * u));
  }
  return e;
}

ConditionalDenoiser::ConditionalDenoiser(NoiseSchedule schedule, nn::DenseNetwork body, std::size_t data_dim,
                                         std::size_t num_classes)
    : schedule_(std::move(schedule)), body_(std::move(body)), data_dim_(data_dim), num_classes_(num_classes) {
  require(schedule_.steps() >= 2, "ConditionalDenoiser: schedule must have T >= 2");
  require(data_dim_ > 0 && num_classes_ > 0, "ConditionalDenoiser: dims must be positive");
  require(body_.input_dim() == input_dim(),
          "ConditionalDenoiser: body input dim must be data_dim + time embedding + num_classes");
  require(body_.output_dim() == data_dim_, "ConditionalDenoiser: body output dim must equal data_dim");
}

ConditionalDenoiser ConditionalDenoiser::create(NoiseSchedule schedule, std::size_t data_dim, std::size_t num_classes,
                                                std::span<const std::size_t> hidden, std::uint64_t seed) {
  auto body = nn::DenseNetwork::glorot(data_dim + kTimeEmbeddingDim + num_classes, hidden, data_dim, seed);
  return ConditionalDenoiser(std::move(schedule), std::move(body), data_dim, num_classes);
}

void ConditionalDenoiser::fill_input(Eigen::Ref<Eigen::VectorXd> column, std::span<const double> x_t,
                                     std::size_t label, std::size_t t) const {
  require(x_t.size() == data_dim_, "denoiser: x_t dim mismatch");
  require(label < num_classes_, "denoiser: class " + std::to_string(label) + " out of range");
  Eigen::Index r = 0;
  for (double v : x_t) column(r++) = v;
  for (double v : time_embedding(t, schedule_.steps())) column(r++) = v;
  for (std::size_t c = 0; c < num_classes_; ++c) column(r++) = c == label ? 1.0 : 0.0;
}

RealVector ConditionalDenoiser::predict_noise(std::span<const double> x_t, std::size_t label, std::size_t t) const {
  Eigen::VectorXd in(static_cast<Eigen::Index>(input_dim()));
  fill_input(in, x_t, label, t);
  return nn::forward(body_, std::span<const double>(in.data(), static_cast<std::size_t>(in.size())));
}

void DiffusionTrainConfig::validate() const {
  require(steps >= 2, "DiffusionTrainConfig: T must be >= 2");
  require(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0,
          "DiffusionTrainConfig: need 0 < beta_min < beta_max < 1");
  if (epoch_scale) require(std::isfinite(*epoch_scale) && *epoch_scale > 0.0, "DiffusionTrainConfig: epoch_scale must be > 0");
  train.validate();
}

std::size_t DiffusionTrainConfig::resolved_epochs(std::size_t num_classes, std::size_t data_size) const {
  if (!epoch_scale) return train.epochs;
  require(data_size > 0, "resolved_epochs: empty dataset");
  const double e = *epoch_scale * 1e6 * static_cast<double>(num_classes) / static_cast<double>(data_size);
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(e)));
}

ConditionalDenoiser diffusion_train(const data::LabeledDataset& data, const DiffusionTrainConfig& cfg,
                                    TrainTrace* trace) {
  cfg.validate();
  require(!data.empty(), "diffusion_train: empty dataset");
  data.validate();
  const std::size_t d = data.dim;
  auto schedule = NoiseSchedule::linear(cfg.steps, cfg.beta_min, cfg.beta_max);
  auto denoiser = ConditionalDenoiser::create(std::move(schedule), d, data.num_classes, cfg.hidden, cfg.train.seed);
  const auto& sched = denoiser.schedule();
  const std::size_t epochs = cfg.resolved_epochs(data.num_classes, data.size());

  Rng rng(splitmix64(cfg.train.seed));
  std::uniform_int_distribution<std::size_t> pick_t(1, sched.steps());
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  const std::size_t batch_cap = std::min(cfg.train.batch_size, data.size());
  Eigen::MatrixXd inputs(static_cast<Eigen::Index>(denoiser.input_dim()), static_cast<Eigen::Index>(batch_cap));
  Eigen::MatrixXd targets(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(batch_cap));
  RealVector eps(d);
  bool first = true;
  if (trace) trace->epoch_losses.clear();

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch_cap) {
      const std::size_t b = std::min(batch_cap, order.size() - start);
      if (static_cast<std::size_t>(inputs.cols()) != b) {
        inputs.resize(Eigen::NoChange, static_cast<Eigen::Index>(b));
        targets.resize(Eigen::NoChange, static_cast<Eigen::Index>(b));
      }
      for (std::size_t j = 0; j < b; ++j) {
        const std::size_t i = order[start + j];
        const std::size_t t = pick_t(rng);
        for (auto& v : eps) v = normal(rng);
        const auto x_t = forward_diffuse_closed(data.points[i], t, sched, eps);
        denoiser.fill_input(inputs.col(static_cast<Eigen::Index>(j)), x_t, data.labels[i], t);
        for (std::size_t r = 0; r < d; ++r) targets(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = eps[r];
      }
      auto res = nn::backward_batch_mse(denoiser.body(), inputs, targets);
      if (first && trace) trace->initial_loss = res.loss;
      first = false;
      nn::apply_sgd(denoiser.mutable_body(), res.gradient, cfg.train.learning_rate);
      loss_sum += res.loss * static_cast<double>(b);
    }
    if (!denoiser.body().parameters_finite()) {
      throw ConfigError("diffusion_train: parameters became non-finite at epoch " + std::to_string(epoch) +
                        " (learning rate too large?)");
    }
    if (trace) trace->epoch_losses.push_back(loss_sum / static_cast<double>(order.size()));
  }
  return denoiser;
}

std::vector<RealVector> sample(const ConditionalDenoiser& denoiser, std::size_t label, std::size_t count,
                               std::uint64_t seed) {
  require(label < denoiser.num_classes(), "sample: class " + std::to_string(label) + " out of range");
  require(count >= 1, "sample: count must be >= 1");
  const auto& sched = denoiser.schedule();
  const auto d = static_cast<Eigen::Index>(denoiser.data_dim());
  const auto n = static_cast<Eigen::Index>(count);
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  Eigen::MatrixXd x(d, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index r = 0; r < d; ++r) x(r, j) = normal(rng);

  Eigen::MatrixXd inputs(static_cast<Eigen::Index>(denoiser.input_dim()), n);
  inputs.bottomRows(static_cast<Eigen::Index>(denoiser.num_classes())).setZero();
  inputs.row(d + static_cast<Eigen::Index>(kTimeEmbeddingDim + label)).setOnes();

  for (std::size_t t = sched.steps(); t >= 1; --t) {
    inputs.topRows(d) = x;
    const auto emb = time_embedding(t, sched.steps());
    for (std::size_t k = 0; k < emb.size(); ++k) inputs.row(d + static_cast<Eigen::Index>(k)).setConstant(emb[k]);
    const Eigen::MatrixXd eps = nn::forward_batch(denoiser.body(), inputs);
    const double alpha = sched.alpha(t);
    const double coef = (1.0 - alpha) / std::sqrt(1.0 - sched.alpha_bar(t));
    const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
    x = inv_sqrt_alpha * (x - coef * eps);
    if (t > 1) {
      const double sigma = std::sqrt(sched.beta(t));
      for (Eigen::Index j = 0; j < n; ++j)
        for (Eigen::Index r = 0; r < d; ++r) x(r, j) += sigma * normal(rng);
    }
  }

  std::vector<RealVector> out;
  out.reserve(count);
  for (Eigen::Index j = 0; j < n; ++j) out.emplace_back(x.col(j).data(), x.col(j).data() + d);
  return out;
}

void write_denoiser(ByteWriter& out, const ConditionalDenoiser& denoiser) {
  out.put_tag("MPDD");
  out.put_u32(kDenoiserFormatVersion);
  out.put_u32(static_cast<std::uint32_t>(denoiser.schedule().steps()));
  out.put_f64(denoiser.schedule().beta_min());
  out.put_f64(denoiser.schedule().beta_max());
  out.put_u32(static_cast<std::uint32_t>(denoiser.data_dim()));
  out.put_u32(static_cast<std::uint32_t>(denoiser.num_classes()));
  out.put_u32(static_cast<std::uint32_t>(kTimeFrequencies));
  nn::write_network(out, denoiser.body());
}

ConditionalDenoiser read_denoiser(ByteReader& in) {
  in.expect_tag("MPDD");
  const std::uint32_t version = in.get_u32();
  if (version != kDenoiserFormatVersion) throw FormatError("unsupported denoiser format version " + std::to_string(version));
  const std::uint32_t steps = in.get_u32();
  const double beta_min = in.get_f64();
  const double beta_max = in.get_f64();
  const std::uint32_t data_dim = in.get_u32();
  const std::uint32_t num_classes = in.get_u32();
  const std::uint32_t freqs = in.get_u32();
  if (freqs != kTimeFrequencies) throw FormatError("denoiser blob: unsupported time embedding");
  auto body = nn::read_network(in);
  try {
    return ConditionalDenoiser(NoiseSchedule::linear(steps, beta_min, beta_max), std::move(body), data_dim,
                               num_classes);
  } catch (const InvalidInput& e) {
    throw FormatError(std::string("denoiser blob: ") + e.what());
  }
}

Bytes serialize(const ConditionalDenoiser& denoiser) {
  ByteWriter w;
  write_denoiser(w, denoiser);
  return std::move(w).take();
}

ConditionalDenoiser deserialize_denoiser(std::span<const std::uint8_t> blob) {
  ByteReader r(blob);
  auto d = read_denoiser(r);
  if (r.remaining() != 0) throw FormatError("denoiser blob: trailing bytes");
  return d;
}

}  // namespace mpcpa::diffusion
