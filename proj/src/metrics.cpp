#include "msfuse/metrics.hpp"

namespace msfuse {

MIoUAccumulator::MIoUAccumulator(std::size_t num_classes) : k_(num_classes), counts_(num_classes * num_classes, 0) {
  if (num_classes == 0) throw ConfigError("MIoUAccumulator needs at least one class");
}

void MIoUAccumulator::add(const LabelMap& prediction, const LabelMap& truth, int ignore_index) {
  if (prediction.height != truth.height || prediction.width != truth.width ||
      prediction.labels.size() != truth.labels.size()) {
    throw ShapeError("prediction and ground truth label maps differ in size");
  }
  const int k = static_cast<int>(k_);
  for (std::size_t i = 0; i < truth.labels.size(); ++i) {
    const int t = truth.labels[i];
    if (t == ignore_index) continue;
    const int p = prediction.labels[i];
    if (t < 0 || t >= k || p < 0 || p >= k) throw ShapeError("label " + std::to_string(t < 0 || t >= k ? t : p) + " outside [0, K)");
    ++counts_[static_cast<std::size_t>(t) * k_ + static_cast<std::size_t>(p)];
  }
}

MIoUResult compute_miou(const MIoUAccumulator& acc) {
  const std::size_t k = acc.num_classes();
  MIoUResult r;
  r.per_class.resize(k);
  double total = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t tp = acc.count(c, c), fn = 0, fp = 0;
    for (std::size_t o = 0; o < k; ++o) {
      if (o == c) continue;
      fn += acc.count(c, o);
      fp += acc.count(o, c);
    }
    const std::uint64_t uni = tp + fn + fp;
    if (uni == 0) continue;
    r.per_class[c] = static_cast<double>(tp) / static_cast<double>(uni);
    if (tp + fn > 0) {
      total += *r.per_class[c];
      ++r.classes_counted;
    }
  }
  if (r.classes_counted > 0) r.miou = total / static_cast<double>(r.classes_counted);
  return r;
}

LabelMap argmax_labels(const Tensor& logits) {
  if (logits.rank() != 3) throw ShapeError("argmax_labels: expected K×H×W logits, got " + shape_str(logits.shape()));
  const std::size_t k = logits.dim(0), h = logits.dim(1), w = logits.dim(2), hw = h * w;
  auto v = logits.values();
  LabelMap out{h, w, std::vector<int>(hw, 0)};
  for (std::size_t p = 0; p < hw; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (v[c * hw + p] > v[best * hw + p]) best = c;
    }
    out.labels[p] = static_cast<int>(best);
  }
  return out;
}

}  // namespace msfuse
