#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "msfuse/ops.hpp"

namespace msfuse {

/// K×K confusion counts, rows = ground truth, columns = prediction.
class MIoUAccumulator {
 public:
  explicit MIoUAccumulator(std::size_t num_classes);

  /// Pixels whose ground truth is `ignore_index` are skipped.
  void add(const LabelMap& prediction, const LabelMap& truth, int ignore_index = kIgnoreIndex);

  std::size_t num_classes() const { return k_; }
  std::uint64_t count(std::size_t truth, std::size_t predicted) const { return counts_[truth * k_ + predicted]; }

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

struct MIoUResult {
  // IoU per class; empty for classes absent from both prediction and truth.
  std::vector<std::optional<double>> per_class;
  // Mean over classes present in the ground truth; 0 when there are none.
  double miou = 0.0;
  std::size_t classes_counted = 0;
};

MIoUResult compute_miou(const MIoUAccumulator& acc);

/// Per-pixel argmax over the class axis of K×H×W logits; ties go to the
/// lower class.
LabelMap argmax_labels(const Tensor& logits);

}  // namespace msfuse
