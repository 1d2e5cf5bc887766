#include "mpcpa/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>

#include "mpcpa/classifier.hpp"
#include "mpcpa/error.hpp"

namespace mpcpa::aggregation {
namespace {

void validate_weights(std::span<const double> w, std::size_t m) {
  require(w.size() == m, "aggregation: expected " + std::to_string(m) + " weights, got " + std::to_string(w.size()));
  double sum = 0.0;
  for (double v : w) {
    require(std::isfinite(v) && v >= 0.0, "aggregation: weights must be finite and nonnegative");
    sum += v;
  }
  require(std::abs(sum - 1.0) <= 1e-9, "aggregation: weights must sum to 1");
}

}  // namespace

PredictionSet::PredictionSet(std::size_t classifiers, std::size_t samples, std::size_t classes)
    : classifiers_(classifiers), samples_(samples), classes_(classes), probs_(classifiers * samples * classes, 0.0) {
  require(classifiers >= 1, "PredictionSet: at least one classifier required");
  require(classes >= 1, "PredictionSet: at least one class required");
}

PredictionSet PredictionSet::from_rows(const std::vector<std::vector<RealVector>>& rows) {
  require(!rows.empty(), "PredictionSet: at least one classifier required");
  const std::size_t n = rows.front().size();
  require(n > 0, "PredictionSet: at least one sample required");
  const std::size_t c = rows.front().front().size();
  PredictionSet p(rows.size(), n, c);
  for (std::size_t m = 0; m < rows.size(); ++m) {
    require(rows[m].size() == n, "PredictionSet: classifiers must cover the same samples");
    for (std::size_t i = 0; i < n; ++i) {
      require(rows[m][i].size() == c, "PredictionSet: probability vectors must share one class count");
      std::copy(rows[m][i].begin(), rows[m][i].end(), p.at(m, i).begin());
    }
  }
  p.validate();
  return p;
}

std::span<const double> PredictionSet::at(std::size_t m, std::size_t i) const {
  require(m < classifiers_ && i < samples_, "PredictionSet: index out of range");
  return {probs_.data() + (m * samples_ + i) * classes_, classes_};
}

std::span<double> PredictionSet::at(std::size_t m, std::size_t i) {
  require(m < classifiers_ && i < samples_, "PredictionSet: index out of range");
  return {probs_.data() + (m * samples_ + i) * classes_, classes_};
}

void PredictionSet::validate() const {
  for (std::size_t m = 0; m < classifiers_; ++m) {
    for (std::size_t i = 0; i < samples_; ++i) {
      double sum = 0.0;
      for (double v : at(m, i)) {
        require(std::isfinite(v) && v >= 0.0, "PredictionSet: probabilities must be finite and nonnegative");
        sum += v;
      }
      require(std::abs(sum - 1.0) <= 1e-9, "PredictionSet: classifier " + std::to_string(m) + " sample " +
                                               std::to_string(i) + " does not sum to 1");
    }
  }
}

std::size_t argmax(std::span<const double> v) {
  require(!v.empty(), "argmax: empty vector");
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::vector<double> normalize_weights(std::span<const double> raw) {
  double sum = 0.0;
  for (double v : raw) {
    require(std::isfinite(v) && v >= 0.0, "normalize_weights: weights must be finite and nonnegative");
    sum += v;
  }
  require(sum > 0.0, "normalize_weights: weights must not all be zero");
  std::vector<double> w(raw.begin(), raw.end());
  for (double& v : w) v /= sum;
  return w;
}

AveragedPredictions aggregate_average(const PredictionSet& preds, std::optional<std::span<const double>> weights) {
  const std::size_t m_count = preds.classifiers();
  if (weights) validate_weights(*weights, m_count);
  AveragedPredictions out;
  out.probabilities.assign(preds.samples(), RealVector(preds.classes(), 0.0));
  out.labels.resize(preds.samples());
  for (std::size_t i = 0; i < preds.samples(); ++i) {
    auto& acc = out.probabilities[i];
    for (std::size_t m = 0; m < m_count; ++m) {
      const double w = weights ? (*weights)[m] : 1.0;
      const auto p = preds.at(m, i);
      for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += w * p[c];
    }
    if (!weights) {
      for (double& v : acc) v /= static_cast<double>(m_count);
    }
    out.labels[i] = argmax(acc);
  }
  return out;
}

std::vector<std::size_t> aggregate_vote(const PredictionSet& preds, VoteMode mode, std::span<const double> weights) {
  const std::size_t m_count = preds.classifiers();
  if (mode == VoteMode::kWeighted) {
    validate_weights(weights, m_count);
  } else {
    require(weights.empty(), "aggregate_vote: weights are only accepted in weighted mode");
  }
  std::optional<AveragedPredictions> fallback;
  std::vector<std::size_t> labels(preds.samples());
  std::vector<double> tally(preds.classes());
  for (std::size_t i = 0; i < preds.samples(); ++i) {
    std::fill(tally.begin(), tally.end(), 0.0);
    for (std::size_t m = 0; m < m_count; ++m) {
      tally[argmax(preds.at(m, i))] += mode == VoteMode::kWeighted ? weights[m] : 1.0;
    }
    const std::size_t top = argmax(tally);
    if (mode == VoteMode::kAbsolute && !(2.0 * tally[top] > static_cast<double>(m_count))) {
      if (!fallback) fallback = aggregate_average(preds);
      labels[i] = fallback->labels[i];
    } else {
      labels[i] = top;
    }
  }
  return labels;
}

AggregationMode AggregationMode::parse(const std::string& name) {
  AggregationMode m;
  if (name == "average") m.kind = Kind::kAverage;
  else if (name == "vote_relative") m.kind = Kind::kVoteRelative;
  else if (name == "vote_absolute") m.kind = Kind::kVoteAbsolute;
  else if (name == "vote_weighted") m.kind = Kind::kVoteWeighted;
  else throw InvalidInput("unknown aggregation mode '" + name + "'");
  return m;
}

std::string AggregationMode::name() const {
  switch (kind) {
    case Kind::kAverage: return "average";
    case Kind::kVoteRelative: return "vote_relative";
    case Kind::kVoteAbsolute: return "vote_absolute";
    case Kind::kVoteWeighted: return "vote_weighted";
  }
  return "average";
}

std::vector<std::size_t> aggregate_labels(const PredictionSet& preds, const AggregationMode& mode) {
  switch (mode.kind) {
    case AggregationMode::Kind::kAverage:
      if (mode.weights.empty()) return aggregate_average(preds).labels;
      return aggregate_average(preds, std::span<const double>(mode.weights)).labels;
    case AggregationMode::Kind::kVoteRelative: return aggregate_vote(preds, VoteMode::kRelative);
    case AggregationMode::Kind::kVoteAbsolute: return aggregate_vote(preds, VoteMode::kAbsolute);
    case AggregationMode::Kind::kVoteWeighted: return aggregate_vote(preds, VoteMode::kWeighted, mode.weights);
  }
  throw InvalidInput("aggregate_labels: unknown mode");
}

Ensemble::Ensemble(std::vector<nn::DenseNetwork> members, AggregationMode mode)
    : members_(std::move(members)), mode_(std::move(mode)) {
  require(!members_.empty(), "Ensemble: at least one member required");
  for (const auto& m : members_) {
    require(m.input_dim() == members_.front().input_dim() && m.output_dim() == members_.front().output_dim(),
            "Ensemble: members must share input and output dims");
  }
  if (!mode_.weights.empty() || mode_.kind == AggregationMode::Kind::kVoteWeighted) {
    validate_weights(mode_.weights, members_.size());
  }
}

PredictionSet Ensemble::predictions(const data::LabeledDataset& data) const {
  require(!data.empty(), "Ensemble: empty evaluation set");
  PredictionSet p(members_.size(), data.size(), members_.front().output_dim());
  for (std::size_t m = 0; m < members_.size(); ++m) {
    const auto probs = nn::predict_proba(members_[m], data);
    for (std::size_t i = 0; i < probs.size(); ++i) std::copy(probs[i].begin(), probs[i].end(), p.at(m, i).begin());
  }
  return p;
}

std::vector<std::size_t> Ensemble::predict(const data::LabeledDataset& data) const {
  return aggregate_labels(predictions(data), mode_);
}

TrialOutputs::TrialOutputs(std::size_t trials, std::size_t learners, std::size_t samples)
    : trials_(trials), learners_(learners), samples_(samples), values_(trials * learners * samples, 0.0) {}

BvcReport bvc_decompose(const TrialOutputs& o, std::span<const double> targets) {
  require(o.trials() >= 2, "bvc_decompose: at least two trials required");
  require(o.learners() >= 1, "bvc_decompose: at least one learner required");
  require(o.samples() >= 1, "bvc_decompose: at least one sample required");
  require(targets.size() == o.samples(), "bvc_decompose: one target per sample required");
  const std::size_t R = o.trials(), M = o.learners(), N = o.samples();
  const double r_inv = 1.0 / static_cast<double>(R);
  const double m_d = static_cast<double>(M);

  BvcReport rep;
  rep.learners = M;
  std::vector<double> mean(M);
  for (std::size_t i = 0; i < N; ++i) {
    for (std::size_t m = 0; m < M; ++m) {
      double s = 0.0;
      for (std::size_t r = 0; r < R; ++r) s += o.at(r, m, i);
      mean[m] = s * r_inv;
    }
    double bias = 0.0;
    for (std::size_t m = 0; m < M; ++m) bias += mean[m] - targets[i];
    bias /= m_d;

    double var = 0.0;
    double covar = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      for (std::size_t k = 0; k < M; ++k) {
        double s = 0.0;
        for (std::size_t r = 0; r < R; ++r) s += (o.at(r, m, i) - mean[m]) * (o.at(r, k, i) - mean[k]);
        if (m == k) var += s * r_inv;
        else covar += s * r_inv;
      }
    }
    var /= m_d;
    covar = M > 1 ? covar / (m_d * (m_d - 1.0)) : 0.0;

    double mse = 0.0;
    for (std::size_t r = 0; r < R; ++r) {
      double avg = 0.0;
      for (std::size_t m = 0; m < M; ++m) avg += o.at(r, m, i);
      avg /= m_d;
      mse += (avg - targets[i]) * (avg - targets[i]);
    }
    mse *= r_inv;

    rep.bias_sq += bias * bias;
    rep.variance += var;
    rep.covariance += covar;
    rep.ensemble_mse += mse;
  }
  const double n_d = static_cast<double>(N);
  rep.bias_sq /= n_d;
  rep.variance /= n_d;
  rep.covariance /= n_d;
  rep.ensemble_mse /= n_d;
  rep.reconstruction_residual =
      std::abs(rep.ensemble_mse - (rep.bias_sq + rep.variance / m_d + (1.0 - 1.0 / m_d) * rep.covariance));
  return rep;
}

void record_true_class(TrialOutputs& outputs, std::size_t trial, const PredictionSet& preds,
                       std::span<const std::size_t> labels) {
  require(trial < outputs.trials(), "record_true_class: trial out of range");
  require(preds.classifiers() == outputs.learners() && preds.samples() == outputs.samples(),
          "record_true_class: prediction set shape differs from the trial outputs");
  require(labels.size() == preds.samples(), "record_true_class: one label per sample required");
  for (std::size_t m = 0; m < preds.classifiers(); ++m) {
    for (std::size_t i = 0; i < preds.samples(); ++i) {
      require(labels[i] < preds.classes(), "record_true_class: label out of range");
      outputs.at(trial, m, i) = preds.at(m, i)[labels[i]];
    }
  }
}

void write_predictions(std::ostream& out, const PredictionSet& preds, const AveragedPredictions& agg) {
  require(agg.probabilities.size() == preds.samples(), "write_predictions: aggregate does not cover the samples");
  out << "sample";
  for (std::size_t m = 0; m < preds.classifiers(); ++m)
    for (std::size_t c = 0; c < preds.classes(); ++c) out << "\tc" << m << "_p" << c;
  for (std::size_t c = 0; c < preds.classes(); ++c) out << "\tagg_p" << c;
  out << "\tlabel\n";
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < preds.samples(); ++i) {
    out << i;
    for (std::size_t m = 0; m < preds.classifiers(); ++m)
      for (double v : preds.at(m, i)) out << '\t' << v;
    for (double v : agg.probabilities[i]) out << '\t' << v;
    out << '\t' << agg.labels[i] << '\n';
  }
}

}  // namespace mpcpa::aggregation
