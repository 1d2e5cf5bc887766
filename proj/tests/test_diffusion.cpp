#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mpcpa/diffusion.hpp"
#include "mpcpa/error.hpp"
#include "oracles.hpp"

using namespace mpcpa;
using namespace mpcpa::diffusion;

namespace {

DiffusionTrainConfig tiny_config(std::uint64_t seed) {
  DiffusionTrainConfig cfg;
  cfg.steps = 20;
  cfg.hidden = {16};
  cfg.train = {0.05, 50, 8, seed};
  cfg.epoch_scale.reset();
  return cfg;
}

data::LabeledDataset two_blobs(std::size_t n, std::uint64_t seed) {
  data::LabeledDataset d(2, 2);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, 0.2);
  for (std::size_t i = 0; i < n; ++i) {
    const double c = i % 2 ? 1.0 : -1.0;
    d.push_back({c + g(rng), c + g(rng)}, i % 2);
  }
  return d;
}

ConditionalDenoiser zero_denoiser(std::size_t steps, std::size_t d, std::size_t classes) {
  const auto sched = build_linear_schedule(steps, 0.01, 0.3);
  auto den = ConditionalDenoiser::create(sched, d, classes, std::vector<std::size_t>{4}, 1);
  auto params = den.body().parameters();
  std::fill(params.begin(), params.end(), 0.0);
  den.mutable_body().set_parameters(params);
  return den;
}

}  // namespace

TEST(Schedule, TwoStepHandProduct) {
  const auto s = build_linear_schedule(2, 0.1, 0.2);
  EXPECT_DOUBLE_EQ(s.beta(1), 0.1);
  EXPECT_DOUBLE_EQ(s.beta(2), 0.2);
  EXPECT_NEAR(s.alpha_bar(1), 0.9, 1e-15);
  EXPECT_NEAR(s.alpha_bar(2), 0.72, 1e-15);
}

TEST(Schedule, StrictlyDecreasingAndBruteForceProduct) {
  for (std::size_t T : {2u, 10u, 200u, 1000u}) {
    const auto s = build_linear_schedule(T, 1e-4, 0.02);
    const std::vector<double> betas(s.betas().begin(), s.betas().end());
    const auto ref = oracle::alpha_bar_products(betas);
    for (std::size_t t = 1; t <= T; ++t) {
      EXPECT_NEAR(s.beta(t), oracle::linear_beta(t, T, 1e-4, 0.02), 1e-15);
      EXPECT_DOUBLE_EQ(s.alpha(t), 1.0 - s.beta(t));
      EXPECT_NEAR(s.alpha_bar(t), ref[t - 1], 1e-12);
      if (t > 1) {
        EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
        EXPECT_EQ(s.alpha_bar(t), s.alpha_bar(t - 1) * (1.0 - s.beta(t)));
      }
    }
    EXPECT_LT(s.alpha_bar(T), s.alpha_bar(1));
  }
}

TEST(Schedule, StandardThousandStepEndpoint) {
  const auto s = build_linear_schedule(1000, 1e-4, 0.02);
  EXPECT_LT(s.alpha_bar(1000), 1e-4);
  // Frozen from a 40-digit evaluation of the product.
  EXPECT_NEAR(s.alpha_bar(1000), 4.035829765375683e-05, 1e-12);
}

TEST(Schedule, InvalidBoundsRejected) {
  EXPECT_THROW(build_linear_schedule(1, 0.1, 0.2), InvalidInput);
  EXPECT_THROW(build_linear_schedule(10, 0.0, 0.2), InvalidInput);
  EXPECT_THROW(build_linear_schedule(10, 0.2, 0.1), InvalidInput);
  EXPECT_THROW(build_linear_schedule(10, 0.1, 1.0), InvalidInput);
  EXPECT_THROW(build_linear_schedule(10, 0.1, 0.1), InvalidInput);
}

TEST(Schedule, OutOfRangeStep) {
  const auto s = build_linear_schedule(5, 0.1, 0.2);
  EXPECT_THROW(s.beta(0), InvalidInput);
  EXPECT_THROW(s.alpha_bar(6), InvalidInput);
}

TEST(ForwardStep, TinyBetaIsIdentity) {
  const auto s = build_linear_schedule(2, 1e-12, 0.5);
  const RealVector x{0.3, -4.0};
  const auto y = forward_diffuse_step(x, 1, s, RealVector{0, 0});
  // sqrt(1 - beta) x differs from x by about beta |x| / 2.
  EXPECT_NEAR(y[0], x[0], 1e-11);
  EXPECT_NEAR(y[1], x[1], 1e-11);
}

TEST(ForwardStep, ZeroInputGivesScaledNoise) {
  const auto s = build_linear_schedule(4, 0.1, 0.4);
  const RealVector z{1.5, -2.0};
  const auto y = forward_diffuse_step(RealVector{0, 0}, 3, s, z);
  EXPECT_DOUBLE_EQ(y[0], std::sqrt(s.beta(3)) * 1.5);
  EXPECT_DOUBLE_EQ(y[1], std::sqrt(s.beta(3)) * -2.0);
}

TEST(ForwardStep, ReplayIsBitwise) {
  const auto s = build_linear_schedule(50, 1e-3, 0.1);
  std::mt19937_64 rng(5);
  std::vector<RealVector> noises;
  for (int t = 0; t < 50; ++t) noises.push_back(oracle::random_vector(3, rng));
  auto run = [&] {
    RealVector x{1, 2, 3};
    for (std::size_t t = 1; t <= 50; ++t) x = forward_diffuse_step(x, t, s, noises[t - 1]);
    return x;
  };
  EXPECT_EQ(run(), run());
}

TEST(ForwardStep, ErrorsOnBadStepOrDims) {
  const auto s = build_linear_schedule(5, 0.1, 0.2);
  EXPECT_THROW(forward_diffuse_step(RealVector{1}, 0, s, RealVector{0}), InvalidInput);
  EXPECT_THROW(forward_diffuse_step(RealVector{1}, 6, s, RealVector{0}), InvalidInput);
  EXPECT_THROW(forward_diffuse_step(RealVector{1}, 1, s, RealVector{0, 0}), InvalidInput);
  EXPECT_THROW(forward_diffuse_closed(RealVector{1}, 0, s, RealVector{0}), InvalidInput);
}

TEST(ForwardClosed, Endpoints) {
  const auto s0 = build_linear_schedule(2, 1e-15, 0.5);
  const RealVector x0{2.0, -1.0};
  const auto a = forward_diffuse_closed(x0, 1, s0, RealVector{0, 0});
  EXPECT_NEAR(a[0], 2.0, 1e-14);
  EXPECT_NEAR(a[1], -1.0, 1e-14);

  const auto s = build_linear_schedule(1000, 1e-4, 0.02);
  const RealVector z{0.7, -0.3};
  const auto b = forward_diffuse_closed(x0, 1000, s, z);
  EXPECT_NEAR(b[0], z[0], 0.02);
  EXPECT_NEAR(b[1], z[1], 0.02);
}

TEST(ForwardClosed, MonteCarloMomentsMatchIteratedSteps) {
  const std::size_t T = 40, N = 10000;
  const auto s = build_linear_schedule(T, 1e-3, 0.05);
  const RealVector x0{1.0, -2.0};
  std::mt19937_64 rng(99);
  std::normal_distribution<double> g;
  for (std::size_t t : {1u, 10u, 40u}) {
    std::vector<double> sum(2, 0.0), sq(2, 0.0), csum(2, 0.0), csq(2, 0.0);
    for (std::size_t n = 0; n < N; ++n) {
      RealVector x = x0;
      for (std::size_t k = 1; k <= t; ++k) x = forward_diffuse_step(x, k, s, RealVector{g(rng), g(rng)});
      const auto c = forward_diffuse_closed(x0, t, s, RealVector{g(rng), g(rng)});
      for (int i = 0; i < 2; ++i) {
        sum[i] += x[i];
        sq[i] += x[i] * x[i];
        csum[i] += c[i];
        csq[i] += c[i] * c[i];
      }
    }
    const double var = 1.0 - s.alpha_bar(t);
    const double se_mean = std::sqrt(var / N);
    const double se_var = var * std::sqrt(2.0 / (N - 1));
    for (int i = 0; i < 2; ++i) {
      const double mu = std::sqrt(s.alpha_bar(t)) * x0[i];
      for (auto [s1, s2] : {std::pair{sum[i], sq[i]}, std::pair{csum[i], csq[i]}}) {
        const double m = s1 / N;
        const double v = (s2 - N * m * m) / (N - 1);
        EXPECT_LT(std::abs(m - mu), 4 * se_mean) << "t=" << t;
        EXPECT_LT(std::abs(v - var), 4 * se_var) << "t=" << t;
      }
    }
  }
}

TEST(TimeEmbedding, Layout) {
  const auto e = time_embedding(50, 100);
  ASSERT_EQ(e.size(), kTimeEmbeddingDim);
  EXPECT_DOUBLE_EQ(e[0], 0.5);
  for (std::size_t k = 0; k < 4; ++k) {
    const double w = std::ldexp(M_PI, static_cast<int>(k)) * 0.5;
    EXPECT_NEAR(e[1 + 2 * k], std::sin(w), 1e-15);
    EXPECT_NEAR(e[2 + 2 * k], std::cos(w), 1e-15);
  }
  EXPECT_THROW(time_embedding(0, 100), InvalidInput);
  EXPECT_THROW(time_embedding(101, 100), InvalidInput);
}

TEST(Denoiser, BodyDimsFollowConditioning) {
  const auto den = ConditionalDenoiser::create(build_linear_schedule(10, 0.01, 0.2), 3, 4, std::vector<std::size_t>{8}, 2);
  EXPECT_EQ(den.input_dim(), 3u + kTimeEmbeddingDim + 4u);
  EXPECT_EQ(den.body().input_dim(), den.input_dim());
  EXPECT_EQ(den.body().output_dim(), 3u);
  EXPECT_EQ(den.predict_noise(RealVector{0, 0, 0}, 3, 10).size(), 3u);
  EXPECT_THROW(den.predict_noise(RealVector{0, 0, 0}, 4, 10), InvalidInput);
  EXPECT_THROW(ConditionalDenoiser(den.schedule(), den.body(), 2, 4), InvalidInput);
}

TEST(ReverseStep, ZeroNoisePredictionHandArithmetic) {
  const auto s = build_linear_schedule(3, 0.1, 0.3);
  const RealVector x{1.0, -2.0}, z{0.5, 0.25};
  const auto y = reverse_step(x, RealVector{0, 0}, 2, s, z);
  EXPECT_NEAR(y[0], 1.0 / std::sqrt(0.8) + std::sqrt(0.2) * 0.5, 1e-15);
  EXPECT_NEAR(y[1], -2.0 / std::sqrt(0.8) + std::sqrt(0.2) * 0.25, 1e-15);
}

TEST(ReverseStep, UsesEpsilonCoefficient) {
  const auto s = build_linear_schedule(3, 0.1, 0.3);
  const auto y = reverse_step(RealVector{1.0}, RealVector{2.0}, 3, s, RealVector{0.0});
  const double coef = 0.3 / std::sqrt(1.0 - s.alpha_bar(3));
  EXPECT_NEAR(y[0], (1.0 - coef * 2.0) / std::sqrt(0.7), 1e-15);
}

TEST(Sample, ZeroNetworkReplaysDrawOrder) {
  const auto den = zero_denoiser(3, 2, 2);
  const auto& s = den.schedule();
  const std::uint64_t seed = 1234;
  const auto got = sample(den, 1, 4, seed);

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<RealVector> x(4, RealVector(2));
  for (auto& v : x)
    for (double& c : v) c = g(rng);
  for (std::size_t t = 3; t >= 1; --t) {
    for (auto& v : x)
      for (double& c : v) c = c / std::sqrt(s.alpha(t));
    if (t > 1) {
      for (auto& v : x)
        for (double& c : v) c += std::sqrt(s.beta(t)) * g(rng);
    }
  }
  ASSERT_EQ(got.size(), 4u);
  for (std::size_t j = 0; j < 4; ++j) {
    ASSERT_EQ(got[j].size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(got[j][i], x[j][i], 1e-13);
  }
}

TEST(Sample, DeterministicAndValidated) {
  const auto den = ConditionalDenoiser::create(build_linear_schedule(10, 0.01, 0.2), 2, 2, std::vector<std::size_t>{8}, 2);
  EXPECT_EQ(sample(den, 0, 5, 7), sample(den, 0, 5, 7));
  EXPECT_NE(sample(den, 0, 5, 7), sample(den, 0, 5, 8));
  EXPECT_THROW(sample(den, 2, 5, 7), InvalidInput);
  EXPECT_THROW(sample(den, 0, 0, 7), InvalidInput);
}

TEST(Train, SinglePointLossDrops) {
  data::LabeledDataset d(2, 2);
  d.push_back({0.5, -0.5}, 1);
  auto cfg = tiny_config(3);
  cfg.train = {0.05, 300, 1, 3};
  TrainTrace trace;
  const auto den = diffusion_train(d, cfg, &trace);
  ASSERT_EQ(trace.epoch_losses.size(), 300u);
  double tail = 0;
  for (std::size_t e = 250; e < 300; ++e) tail += trace.epoch_losses[e] / 50;
  EXPECT_LT(tail, trace.initial_loss);
  EXPECT_TRUE(den.body().parameters_finite());
}

TEST(Train, DeterministicPerSeed) {
  const auto d = two_blobs(40, 1);
  const auto a = diffusion_train(d, tiny_config(11));
  const auto b = diffusion_train(d, tiny_config(11));
  const auto c = diffusion_train(d, tiny_config(12));
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a == c);
}

TEST(Train, RejectsEmptyAndDivergence) {
  EXPECT_THROW(diffusion_train(data::LabeledDataset(2, 2), tiny_config(1)), InvalidInput);
  auto cfg = tiny_config(1);
  cfg.train.learning_rate = 1e8;
  EXPECT_THROW(diffusion_train(two_blobs(40, 1), cfg), ConfigError);
}

TEST(Train, EpochScaleRule) {
  DiffusionTrainConfig cfg;
  EXPECT_EQ(cfg.resolved_epochs(2, 1000), 400u);
  EXPECT_EQ(cfg.resolved_epochs(2, 1'000'000'000), 1u);
  cfg.epoch_scale.reset();
  cfg.train.epochs = 17;
  EXPECT_EQ(cfg.resolved_epochs(2, 1000), 17u);
}

TEST(Serialization, DenoiserRoundTrip) {
  const auto den = diffusion_train(two_blobs(20, 2), tiny_config(5));
  const auto blob = serialize(den);
  EXPECT_EQ(std::string(blob.begin(), blob.begin() + 4), "MPDD");
  EXPECT_EQ(deserialize_denoiser(blob), den);
  // Bytes 36..39 hold the time-frequency count.
  auto bad = blob;
  bad[36] = 5;
  EXPECT_THROW(deserialize_denoiser(bad), FormatError);
  EXPECT_THROW(deserialize_denoiser(Bytes(blob.begin(), blob.begin() + 10)), FormatError);
}
