#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "mpcpa/datagen.hpp"
#include "mpcpa/nn.hpp"

namespace mpcpa::audit {

inline constexpr double kDefaultMemorizationDelta = 0.1;

// sqrt(sum_i (a_i - b_i)^2 / d)
double l2_distance(std::span<const double> a, std::span<const double> b);

struct MemorizationRow {
  double min_distance = 0.0;
  std::size_t nearest_index = 0;
  bool flagged = false;  // min_distance <= delta
};

struct MemorizationReport {
  std::vector<MemorizationRow> rows;  // one per generated sample, input order
  double global_min = 0.0;
  std::size_t flag_count = 0;
  double delta = kDefaultMemorizationDelta;
};

// Exhaustive nearest-training-sample scan. threads > 1 splits the generated
// rows into contiguous chunks; output is identical for any thread count.
MemorizationReport memorization_scan(const data::LabeledDataset& generated,
                                     const data::LabeledDataset& training,
                                     double delta = kDefaultMemorizationDelta,
                                     std::size_t threads = 1);

struct MIAReport {
  double tau = 0.0;  // threshold used for `accuracy` (best_tau when none given)
  std::vector<double> member_losses;
  std::vector<double> nonmember_losses;
  double accuracy = 0.0;
  double best_accuracy = 0.0;
  double best_tau = 0.0;
};

// Loss-threshold attack: "member" iff cross-entropy loss < tau. Requires
// balanced member/non-member sets. The sweep covers every midpoint between
// adjacent distinct losses plus one threshold below and one above all losses.
MIAReport mia_loss_threshold(const nn::DenseNetwork& model, const data::LabeledDataset& members,
                             const data::LabeledDataset& nonmembers,
                             std::optional<double> tau = std::nullopt);

// Pure-loss variant used by the model-based entry point.
MIAReport mia_from_losses(std::vector<double> member_losses, std::vector<double> nonmember_losses,
                          std::optional<double> tau = std::nullopt);

void write_memorization_rows(std::ostream& out, const MemorizationReport& report);
void write_mia_rows(std::ostream& out, const MIAReport& report);

}  // namespace mpcpa::audit
