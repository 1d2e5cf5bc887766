#include <benchmark/benchmark.h>

#include <vector>

#include "mpcpa/aggregation.hpp"
#include "mpcpa/classifier.hpp"
#include "mpcpa/datagen.hpp"
#include "mpcpa/diffusion.hpp"
#include "mpcpa/privacy_audit.hpp"

using namespace mpcpa;

namespace {

Eigen::MatrixXd random_batch(Eigen::Index rows, Eigen::Index cols) {
  return Eigen::MatrixXd::Random(rows, cols);
}

}  // namespace

// Forward and backward through the default denoiser body shape.
static void BM_DenoiserBackward(benchmark::State& state) {
  const auto batch = static_cast<Eigen::Index>(state.range(0));
  const std::vector<std::size_t> hidden{64, 64};
  const auto net = nn::DenseNetwork::glorot(2 + diffusion::kTimeEmbeddingDim + 2, hidden, 2, 1);
  const auto x = random_batch(static_cast<Eigen::Index>(net.input_dim()), batch);
  const auto y = random_batch(2, batch);
  for (auto _ : state) benchmark::DoNotOptimize(nn::backward_batch_mse(net, x, y));
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_DenoiserBackward)->Arg(1)->Arg(64)->Arg(256);

static void BM_ClassifierForward(benchmark::State& state) {
  const auto batch = static_cast<Eigen::Index>(state.range(0));
  const std::vector<std::size_t> hidden{32};
  const auto net = nn::make_classifier(2, hidden, 2, 1);
  const auto x = random_batch(2, batch);
  for (auto _ : state) benchmark::DoNotOptimize(nn::forward_batch(net, x));
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_ClassifierForward)->Arg(1)->Arg(1024);

// Ancestral sampling: `steps` reverse steps for every requested point.
static void BM_Sample(benchmark::State& state) {
  const std::size_t count = static_cast<std::size_t>(state.range(0));
  const std::vector<std::size_t> hidden{64, 64};
  const auto denoiser =
      diffusion::ConditionalDenoiser::create(diffusion::build_linear_schedule(200, 1e-4, 0.02), 2, 2, hidden, 3);
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(diffusion::sample(denoiser, 0, count, ++seed));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(count));
}
BENCHMARK(BM_Sample)->Arg(16)->Arg(400)->Unit(benchmark::kMillisecond);

static void BM_MemorizationScan(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto threads = static_cast<std::size_t>(state.range(1));
  const auto spec = data::MixtureSpec::benchmark();
  const auto train = data::generate_mixture(spec, n, 1);
  const auto gen = data::generate_mixture(spec, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(audit::memorization_scan(gen, train, 0.1, threads));
}
BENCHMARK(BM_MemorizationScan)->Args({500, 1})->Args({2000, 1})->Args({2000, 4})->Unit(benchmark::kMillisecond);

static void BM_AggregateAverage(benchmark::State& state) {
  const std::size_t m = 5, n = static_cast<std::size_t>(state.range(0)), c = 10;
  aggregation::PredictionSet preds(m, n, c);
  for (std::size_t k = 0; k < m; ++k)
    for (std::size_t i = 0; i < n; ++i)
      for (auto& p : preds.at(k, i)) p = 1.0 / static_cast<double>(c);
  for (auto _ : state) benchmark::DoNotOptimize(aggregation::aggregate_average(preds));
}
BENCHMARK(BM_AggregateAverage)->Arg(1000);

BENCHMARK_MAIN();
