#include "mpcpa/privacy_audit.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>
#include <thread>

#include "mpcpa/error.hpp"

namespace mpcpa::audit {

double l2_distance(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "l2_distance: dimension mismatch");
  require(!a.empty(), "l2_distance: empty vectors");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(a.size()));
}

MemorizationReport memorization_scan(const data::LabeledDataset& generated, const data::LabeledDataset& training,
                                     double delta, std::size_t threads) {
  require(!generated.empty(), "memorization_scan: generated set is empty");
  require(!training.empty(), "memorization_scan: training set is empty");
  require(generated.dim == training.dim, "memorization_scan: generated and training dims differ");
  require(std::isfinite(delta) && delta >= 0.0, "memorization_scan: delta must be >= 0");

  MemorizationReport rep;
  rep.delta = delta;
  rep.rows.resize(generated.size());
  auto scan = [&](std::size_t begin, std::size_t end) {
    for (std::size_t g = begin; g < end; ++g) {
      MemorizationRow row;
      row.min_distance = std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < training.size(); ++t) {
        const double dist = l2_distance(generated.points[g], training.points[t]);
        if (dist < row.min_distance) {
          row.min_distance = dist;
          row.nearest_index = t;
        }
      }
      row.flagged = row.min_distance <= delta;
      rep.rows[g] = row;
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, generated.size());
  if (workers == 1) {
    scan(0, generated.size());
  } else {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (generated.size() + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t b = w * chunk;
      const std::size_t e = std::min(generated.size(), b + chunk);
      if (b < e) pool.emplace_back(scan, b, e);
    }
  }
  rep.global_min = std::numeric_limits<double>::infinity();
  for (const auto& r : rep.rows) {
    rep.global_min = std::min(rep.global_min, r.min_distance);
    rep.flag_count += r.flagged ? 1 : 0;
  }
  return rep;
}

namespace {

double accuracy_at(const std::vector<double>& members, const std::vector<double>& nonmembers, double tau) {
  std::size_t correct = 0;
  for (double l : members) correct += l < tau ? 1 : 0;
  for (double l : nonmembers) correct += l < tau ? 0 : 1;
  return static_cast<double>(correct) / static_cast<double>(members.size() + nonmembers.size());
}

}  // namespace

MIAReport mia_from_losses(std::vector<double> member_losses, std::vector<double> nonmember_losses,
                          std::optional<double> tau) {
  require(!member_losses.empty() && !nonmember_losses.empty(), "mia: member and non-member sets must be nonempty");
  require(member_losses.size() == nonmember_losses.size(), "mia: member and non-member sets must have equal size");
  MIAReport rep;
  rep.member_losses = std::move(member_losses);
  rep.nonmember_losses = std::move(nonmember_losses);

  std::vector<double> all = rep.member_losses;
  all.insert(all.end(), rep.nonmember_losses.begin(), rep.nonmember_losses.end());
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());

  // Sweep in one pass: sorting the tagged losses lets every candidate be
  // scored incrementally.
  std::vector<std::pair<double, bool>> tagged;
  tagged.reserve(rep.member_losses.size() * 2);
  for (double l : rep.member_losses) tagged.emplace_back(l, true);
  for (double l : rep.nonmember_losses) tagged.emplace_back(l, false);
  std::sort(tagged.begin(), tagged.end());
  const double total = static_cast<double>(tagged.size());

  // tau below every loss: everything predicted non-member.
  std::size_t correct = rep.nonmember_losses.size();
  rep.best_tau = all.front() - 1.0;
  rep.best_accuracy = static_cast<double>(correct) / total;
  std::size_t pos = 0;
  for (std::size_t u = 0; u < all.size(); ++u) {
    // move every loss equal to all[u] below the threshold
    while (pos < tagged.size() && tagged[pos].first == all[u]) {
      correct = tagged[pos].second ? correct + 1 : correct - 1;
      ++pos;
    }
    const double candidate = u + 1 < all.size() ? 0.5 * (all[u] + all[u + 1]) : all[u] + 1.0;
    const double acc = static_cast<double>(correct) / total;
    if (acc > rep.best_accuracy) {
      rep.best_accuracy = acc;
      rep.best_tau = candidate;
    }
  }
  rep.tau = tau.value_or(rep.best_tau);
  rep.accuracy = accuracy_at(rep.member_losses, rep.nonmember_losses, rep.tau);
  return rep;
}

MIAReport mia_loss_threshold(const nn::DenseNetwork& model, const data::LabeledDataset& members,
                             const data::LabeledDataset& nonmembers, std::optional<double> tau) {
  require(members.size() == nonmembers.size(), "mia_loss_threshold: member and non-member sets must have equal size "
                                               "(resample upstream to balance)");
  require(!members.empty(), "mia_loss_threshold: empty member set");
  require(members.dim == model.input_dim() && nonmembers.dim == model.input_dim(),
          "mia_loss_threshold: data dim does not match the model");
  auto losses = [&](const data::LabeledDataset& d) {
    std::vector<double> out;
    out.reserve(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) out.push_back(nn::cross_entropy_loss(nn::forward(model, d.points[i]), d.labels[i]));
    return out;
  };
  return mia_from_losses(losses(members), losses(nonmembers), tau);
}

void write_memorization_rows(std::ostream& out, const MemorizationReport& report) {
  out << "generated\tmin_distance\tnearest_training\tflagged\n";
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < report.rows.size(); ++i) {
    const auto& r = report.rows[i];
    out << i << '\t' << r.min_distance << '\t' << r.nearest_index << '\t' << (r.flagged ? 1 : 0) << '\n';
  }
}

void write_mia_rows(std::ostream& out, const MIAReport& report) {
  out << "example\tmember\tloss\tpredicted_member\n";
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  std::size_t id = 0;
  for (double l : report.member_losses) out << id++ << "\t1\t" << l << '\t' << (l < report.tau ? 1 : 0) << '\n';
  for (double l : report.nonmember_losses) out << id++ << "\t0\t" << l << '\t' << (l < report.tau ? 1 : 0) << '\n';
}

}  // namespace mpcpa::audit
