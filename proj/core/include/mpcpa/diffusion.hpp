#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mpcpa/bytes.hpp"
#include "mpcpa/datagen.hpp"
#include "mpcpa/nn.hpp"

namespace mpcpa::diffusion {

// beta/alpha/alpha_bar tables. Time steps are 1-based: t in 1..T.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  // beta_t linear from beta_min (t=1) to beta_max (t=T).
  static NoiseSchedule linear(std::size_t steps, double beta_min, double beta_max);

  std::size_t steps() const { return beta_.size(); }
  double beta_min() const { return beta_min_; }
  double beta_max() const { return beta_max_; }

  double beta(std::size_t t) const { return beta_[index(t)]; }
  double alpha(std::size_t t) const { return alpha_[index(t)]; }
  double alpha_bar(std::size_t t) const { return alpha_bar_[index(t)]; }

  std::span<const double> betas() const { return beta_; }
  std::span<const double> alphas() const { return alpha_; }
  std::span<const double> alpha_bars() const { return alpha_bar_; }

  friend bool operator==(const NoiseSchedule&, const NoiseSchedule&) = default;

 private:
  std::size_t index(std::size_t t) const;

  double beta_min_ = 0.0;
  double beta_max_ = 0.0;
  std::vector<double> beta_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;
};

NoiseSchedule build_linear_schedule(std::size_t steps, double beta_min, double beta_max);

// sqrt(1-beta_t) x_{t-1} + sqrt(beta_t) noise
RealVector forward_diffuse_step(std::span<const double> x_prev, std::size_t t,
                                const NoiseSchedule& schedule, std::span<const double> noise);

// sqrt(alpha_bar_t) x_0 + sqrt(1-alpha_bar_t) noise
RealVector forward_diffuse_closed(std::span<const double> x0, std::size_t t,
                                  const NoiseSchedule& schedule, std::span<const double> noise);

// One ancestral step given the predicted noise:
// (x_t - (1-alpha_t)/sqrt(1-alpha_bar_t) * eps) / sqrt(alpha_t) + sqrt(beta_t) z.
// The caller passes z = 0 at t = 1.
RealVector reverse_step(std::span<const double> x_t, std::span<const double> predicted_noise,
                        std::size_t t, const NoiseSchedule& schedule, std::span<const double> z);

inline constexpr std::size_t kTimeFrequencies = 4;
inline constexpr std::size_t kTimeEmbeddingDim = 1 + 2 * kTimeFrequencies;

// (t/T, sin(2^k pi t/T), cos(2^k pi t/T) for k = 0..3)
RealVector time_embedding(std::size_t t, std::size_t steps);

// eps_theta(x_t, y, t): dense body over [x_t, time embedding, one-hot y].
class ConditionalDenoiser {
 public:
  ConditionalDenoiser() = default;
  ConditionalDenoiser(NoiseSchedule schedule, nn::DenseNetwork body, std::size_t data_dim,
                      std::size_t num_classes);

  static ConditionalDenoiser create(NoiseSchedule schedule, std::size_t data_dim,
                                    std::size_t num_classes, std::span<const std::size_t> hidden,
                                    std::uint64_t seed);

  std::size_t data_dim() const { return data_dim_; }
  std::size_t num_classes() const { return num_classes_; }
  std::size_t input_dim() const { return data_dim_ + kTimeEmbeddingDim + num_classes_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const nn::DenseNetwork& body() const { return body_; }
  nn::DenseNetwork& mutable_body() { return body_; }

  RealVector predict_noise(std::span<const double> x_t, std::size_t label, std::size_t t) const;

  // Column j of `inputs` receives [x_t(j), emb(t_j), onehot(y_j)].
  void fill_input(Eigen::Ref<Eigen::VectorXd> column, std::span<const double> x_t,
                  std::size_t label, std::size_t t) const;

  friend bool operator==(const ConditionalDenoiser&, const ConditionalDenoiser&) = default;

 private:
  NoiseSchedule schedule_;
  nn::DenseNetwork body_;
  std::size_t data_dim_ = 0;
  std::size_t num_classes_ = 0;
};

struct DiffusionTrainConfig {
  std::size_t steps = 200;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  std::vector<std::size_t> hidden{64, 64};
  nn::TrainConfig train{0.05, 400, 64, 0};
  // When set, epochs = max(1, round(scale * 1e6 * num_classes / data_size)),
  // overriding train.epochs.
  std::optional<double> epoch_scale = 0.2;

  void validate() const;
  std::size_t resolved_epochs(std::size_t num_classes, std::size_t data_size) const;
};

struct TrainTrace {
  double initial_loss = 0.0;        // mean loss of the first mini-batch, before any update
  std::vector<double> epoch_losses;  // mean training loss per epoch
};

// Per mini-batch: t ~ U{1..T}, eps ~ N(0, I), x_t from the closed form,
// minimise mse(eps_theta(x_t, y, t), eps) by SGD. Deterministic in cfg.train.seed.
ConditionalDenoiser diffusion_train(const data::LabeledDataset& data, const DiffusionTrainConfig& cfg,
                                    TrainTrace* trace = nullptr);

// Ancestral sampling from x_T ~ N(0, I) with sigma_t^2 = beta_t. Draw order:
// x_T for all samples (sample-major), then z for every step t = T..2.
std::vector<RealVector> sample(const ConditionalDenoiser& denoiser, std::size_t label,
                               std::size_t count, std::uint64_t seed);

// "MPDD", u32 version, u32 T, f64 beta_min, f64 beta_max, u32 data_dim,
// u32 num_classes, u32 time frequencies, then the network blob.
void write_denoiser(ByteWriter& out, const ConditionalDenoiser& denoiser);
ConditionalDenoiser read_denoiser(ByteReader& in);
Bytes serialize(const ConditionalDenoiser& denoiser);
ConditionalDenoiser deserialize_denoiser(std::span<const std::uint8_t> blob);

}  // namespace mpcpa::diffusion
