#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mpcpa/datagen.hpp"
#include "mpcpa/nn.hpp"

namespace mpcpa::aggregation {

// Class-probability vectors for M classifiers over the same N samples.
class PredictionSet {
 public:
  PredictionSet() = default;
  PredictionSet(std::size_t classifiers, std::size_t samples, std::size_t classes);

  // rows[m][i] is classifier m's distribution for sample i.
  static PredictionSet from_rows(const std::vector<std::vector<RealVector>>& rows);

  std::size_t classifiers() const { return classifiers_; }
  std::size_t samples() const { return samples_; }
  std::size_t classes() const { return classes_; }

  std::span<const double> at(std::size_t m, std::size_t i) const;
  std::span<double> at(std::size_t m, std::size_t i);

  // Nonnegative, finite, each vector sums to 1 within 1e-9.
  void validate() const;

 private:
  std::size_t classifiers_ = 0;
  std::size_t samples_ = 0;
  std::size_t classes_ = 0;
  std::vector<double> probs_;
};

// Lowest index wins ties.
std::size_t argmax(std::span<const double> v);

// Scales nonnegative raw weights to sum 1.
std::vector<double> normalize_weights(std::span<const double> raw);

struct AveragedPredictions {
  std::vector<RealVector> probabilities;
  std::vector<std::size_t> labels;
};

AveragedPredictions aggregate_average(const PredictionSet& preds,
                                      std::optional<std::span<const double>> weights = std::nullopt);

enum class VoteMode { kRelative, kAbsolute, kWeighted };

// relative: plurality; absolute: > M/2 votes, else averaging's label;
// weighted: plurality of weighted votes (weights required).
std::vector<std::size_t> aggregate_vote(const PredictionSet& preds, VoteMode mode,
                                        std::span<const double> weights = {});

struct AggregationMode {
  enum class Kind { kAverage, kVoteRelative, kVoteAbsolute, kVoteWeighted };
  Kind kind = Kind::kAverage;
  std::vector<double> weights;  // empty = uniform (average) ; required for kVoteWeighted

  static AggregationMode parse(const std::string& name);
  std::string name() const;
};

std::vector<std::size_t> aggregate_labels(const PredictionSet& preds, const AggregationMode& mode);

// Server-side ensemble over received classifiers.
class Ensemble {
 public:
  Ensemble() = default;
  Ensemble(std::vector<nn::DenseNetwork> members, AggregationMode mode);

  const std::vector<nn::DenseNetwork>& members() const { return members_; }
  const AggregationMode& mode() const { return mode_; }

  PredictionSet predictions(const data::LabeledDataset& data) const;
  std::vector<std::size_t> predict(const data::LabeledDataset& data) const;

 private:
  std::vector<nn::DenseNetwork> members_;
  AggregationMode mode_;
};

// Outputs o[r][m][i]: trial r (training-set redraw), learner m, sample i.
class TrialOutputs {
 public:
  TrialOutputs(std::size_t trials, std::size_t learners, std::size_t samples);

  std::size_t trials() const { return trials_; }
  std::size_t learners() const { return learners_; }
  std::size_t samples() const { return samples_; }

  double& at(std::size_t r, std::size_t m, std::size_t i) { return values_[(r * learners_ + m) * samples_ + i]; }
  double at(std::size_t r, std::size_t m, std::size_t i) const {
    return values_[(r * learners_ + m) * samples_ + i];
  }

 private:
  std::size_t trials_;
  std::size_t learners_;
  std::size_t samples_;
  std::vector<double> values_;
};

struct BvcReport {
  double bias_sq = 0.0;
  double variance = 0.0;
  double covariance = 0.0;
  double ensemble_mse = 0.0;
  double reconstruction_residual = 0.0;
  std::size_t learners = 0;
};

// Ensemble squared error = bias^2 + var/M + (1 - 1/M) covar, all
// expectations empirical over trials and averaged over samples. For M = 1
// the covariance term is reported as 0.
BvcReport bvc_decompose(const TrialOutputs& outputs, std::span<const double> targets);

// Scalarizes classifier outputs for the decomposition: learner m's output on
// sample i in trial `trial` becomes the probability it gives labels[i]. The
// matching target is 1 for every sample.
void record_true_class(TrialOutputs& outputs, std::size_t trial, const PredictionSet& preds,
                       std::span<const std::size_t> labels);

// Columnar audit export: sample id, per-classifier probabilities,
// aggregate probabilities, aggregate label.
void write_predictions(std::ostream& out, const PredictionSet& preds, const AveragedPredictions& agg);

}  // namespace mpcpa::aggregation
