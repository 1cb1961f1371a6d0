#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "msfuse/pyramid.hpp"

namespace msfuse {

/// Importance of every token to every query scale.
struct ScoreMatrix {
  Tensor probs;   // L × 4, keep probabilities P
  Tensor margin;  // L × 4, keep logit minus drop logit (logit of P)

  /// Wraps externally supplied probabilities; saturated entries map to ±inf
  /// margins. The result carries no autodiff history.
  static ScoreMatrix from_probabilities(const Tensor& probs);

  std::size_t tokens() const { return probs.dim(0); }
  /// Column for one query scale (1-based), length L.
  Tensor column(std::size_t scale) const;
  double column_mean(std::size_t scale) const;
};

/// D → D/2 → GELU → 8 logits, laid out as (keep_i, drop_i) per scale.
struct ScorerMLP {
  Linear hidden;
  Linear out;

  static ScorerMLP make(std::size_t common_dim, Rng& rng);
  void collect(const std::string& prefix, ParamMap& params) const;
};

ScoreMatrix score(const TokenSequence& seq, const ScorerMLP& mlp);
/// Scores from raw L×8 logits, keep/drop interleaved per scale.
ScoreMatrix score_from_logits(const Tensor& logits);

enum class Mode { training, inference };

struct DecisionSet {
  Mode mode = Mode::training;
  // Training: per-scale decisions of length L. Forward values are exactly 0
  // or 1 unless `relaxed`; backward follows the soft sample.
  std::array<Tensor, kNumScales> keep;
  std::array<Tensor, kNumScales> soft;
  bool relaxed = false;
  // Inference: selected token indices per scale. `selected` is ascending by
  // token index; `ranking` holds the same set by descending score.
  std::array<std::vector<std::size_t>, kNumScales> selected;
  std::array<std::vector<std::size_t>, kNumScales> ranking;

  /// Fraction of tokens kept for a query scale (1-based).
  double keep_ratio(std::size_t scale, std::size_t sequence_length) const;
};

/// All-ones training decisions (fusion without selection).
DecisionSet keep_all(std::size_t sequence_length);

/// Two-class Gumbel-Softmax over (P, 1−P) per token and scale, hardened by
/// argmax with a straight-through gradient. With `relaxed` the soft sample
/// itself is used as the decision (smooth surrogate for gradient checks).
DecisionSet gumbel_sample(const ScoreMatrix& scores, double temperature, Rng& rng, bool relaxed = false);

/// ⌈ρL⌉, ignoring floating-point excess of products that are integral.
std::size_t selection_count(double rho, std::size_t sequence_length);

/// Top ⌈ρL⌉ tokens per scale by score; ties go to the lower token index.
DecisionSet topk_select(const ScoreMatrix& scores, double rho);

/// Writes selection_q<i>.csv and selection_q<i>.pgm for every query scale.
/// `selected` flags come from `decisions` (training: hard values; inference:
/// membership in the selected set).
void export_selection_maps(const TokenSequence& seq, const ScoreMatrix& scores, const DecisionSet& decisions,
                           const std::filesystem::path& out_dir);

}  // namespace msfuse
