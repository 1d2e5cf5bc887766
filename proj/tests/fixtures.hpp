#pragma once

// Small, fast configurations shared by the protocol, experiment and
// acceptance tests.

#include <cstdint>

#include "mpcpa/datagen.hpp"
#include "mpcpa/protocol.hpp"
#include "mpcpa/rng.hpp"

namespace fixture {

inline mpcpa::diffusion::DiffusionTrainConfig quick_diffusion() {
  mpcpa::diffusion::DiffusionTrainConfig cfg;
  cfg.steps = 10;
  cfg.hidden = {8};
  cfg.train = {0.05, 5, 16, 0};
  cfg.epoch_scale.reset();
  return cfg;
}

inline mpcpa::nn::ClassifierSpec quick_classifier() { return {{8}, {0.1, 5, 16, 0}}; }

inline mpcpa::data::DatasetSplit benchmark_split(std::size_t count, std::uint64_t seed) {
  const auto all = mpcpa::data::generate_mixture(mpcpa::data::MixtureSpec::benchmark(), count, seed);
  return mpcpa::data::split(all, {0.6, 0.2, 0.2}, seed + 1);
}

inline mpcpa::protocol::MpcpaConfig quick_mpcpa(std::size_t n, std::uint64_t seed, std::size_t gen_count = 10,
                                                std::size_t count = 200) {
  const auto s = benchmark_split(count, seed);
  mpcpa::data::PartitionSpec p;
  p.n_clients = n;
  mpcpa::protocol::MpcpaConfig cfg;
  cfg.client_data = mpcpa::data::partition(s.train, p, seed + 2);
  cfg.num_classes = 2;
  cfg.diffusion = quick_diffusion();
  cfg.classifier = quick_classifier();
  cfg.gen_count = gen_count;
  cfg.seed = seed;
  cfg.eval.validation = s.validation;
  cfg.eval.test = s.test;
  return cfg;
}

}  // namespace fixture
