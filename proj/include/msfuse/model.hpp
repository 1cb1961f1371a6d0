#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <set>
#include <string>

#include "msfuse/fusion.hpp"
#include "json.hpp"

namespace msfuse {

enum class Merge { concat, sum };

struct ModelConfig {
  std::size_t image_h = 48;
  std::size_t image_w = 48;
  std::size_t num_classes = 4;
  std::size_t base_channels = 8;
  std::size_t common_dim = 32;
  std::size_t heads = 8;
  double target_ratio = 0.6;
  double ratio_weight = 0.4;
  double aux_weight = 0.4;
  std::size_t reduction_ratio = 4;
  double gumbel_temperature = 1.0;
  std::set<std::size_t> use_projection_on{1};
  bool eq5_literal = false;
  bool residual = true;
  bool use_fusion = true;
  bool use_selection = true;
  Merge merge = Merge::concat;
  std::uint64_t seed = 0;
  // Optimisation and evaluation.
  std::size_t batch_size = 4;
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  std::size_t eval_interval = 250;
  std::size_t eval_scenes = 32;

  /// Desk-scale profile used by tests and the ablation (same as defaults).
  static ModelConfig test_profile();
  /// Width and heads as reported for full-size training.
  static ModelConfig wide_profile();
  /// 32×32, C=4, D=16, h=4, K=3 for gradient checks.
  static ModelConfig tiny_profile();

  void validate() const;
  nlohmann::ordered_json to_json() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static ModelConfig from_json(const nlohmann::json& j);
  static ModelConfig load(const std::filesystem::path& path);
};

struct ForwardOptions {
  // Use the soft Gumbel sample as the mask (smooth surrogate).
  bool relaxed_decisions = false;
  // Inference keep ratio; defaults to config.target_ratio.
  std::optional<double> rho;
};

struct ForwardResult {
  Tensor logits;      // K × H × W
  Tensor aux_logits;  // K × H × W
  std::optional<ScoreMatrix> scores;
  DecisionSet decisions;
  FusionStats stats;
  std::size_t sequence_length = 0;
  TokenSequence sequence;  // empty when fusion is off
};

/// Copies share parameter storage.
class SegmentationModel {
 public:
  explicit SegmentationModel(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  ForwardResult forward(const Tensor& image, Mode mode, Rng& rng, const ForwardOptions& options = {}) const;

  // Handles alias the model's storage.
  ParamMap parameters() const;
  std::size_t parameter_count() const;

  ScorerMLP& scorer() { return scorer_; }

 private:
  ModelConfig config_;
  ToyBackbone backbone_;
  TopDownParams top_down_;
  ScorerMLP scorer_;
  std::array<MCAParams, kNumScales> mca_;
  std::array<std::optional<ProjectionGenerator>, kNumScales> generators_;
  Conv2d head_conv_;
  Conv2d head_conv2_;  // baseline only: second 3×3
  Conv2d head_cls_;
  Conv2d aux_conv_;
  Conv2d aux_cls_;
};

/// (1/S)·Σ_i (ρ − mean_j P_i^j)², S = 4.
Tensor ratio_loss(const ScoreMatrix& scores, double rho);

struct LossBreakdown {
  Tensor total;
  double seg = 0.0;
  double ratio = 0.0;
  double aux = 0.0;
};

/// L_seg + α·L_ratio + β·L_aux; the ratio term is dropped without scores.
LossBreakdown total_loss(const Tensor& logits, const Tensor& aux_logits, const LabelMap& labels,
                         const std::optional<ScoreMatrix>& scores, const ModelConfig& config);

/// Binary checkpoint: "FSFM", u32 version, u64 length + config JSON, then
/// per parameter (u64 name length, name, u64 rank, u64 dims, f64 values),
/// all little-endian, in name order.
void save_checkpoint(const SegmentationModel& model, const std::filesystem::path& path);
SegmentationModel load_checkpoint(const std::filesystem::path& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace msfuse
