#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "msfuse/metrics.hpp"
#include "msfuse/model.hpp"
#include "msfuse/scenes.hpp"

namespace msfuse {

/// Scene settings matched to a model config; radii scale with image size.
SyntheticSceneSpec scene_spec_for(const ModelConfig& config, std::uint64_t seed);

// Training scenes use even seeds, held-out scenes odd ones.
std::uint64_t train_scene_seed(std::uint64_t run_seed, std::uint64_t sample_index);
std::uint64_t eval_scene_seed(std::uint64_t scene_index);

struct StepLog {
  std::size_t step = 0;  // 1-based optimizer step
  double total = 0.0, seg = 0.0, ratio = 0.0, aux = 0.0;
  // Mean hard decision per query scale over the batch; absent without selection.
  std::optional<std::array<double, kNumScales>> keep_ratio;
};

struct SelectionStats {
  std::array<double, kNumScales> mean_score{};
  std::array<double, kNumScales> train_keep_ratio{};  // mean of hard Gumbel decisions
  std::array<double, kNumScales> infer_keep_ratio{};  // ⌈ρL⌉ / L
};

struct EvalLog {
  std::size_t step = 0;
  MIoUResult miou;
  std::optional<SelectionStats> selection;
};

struct RunReport {
  ModelConfig config;
  std::size_t steps = 0;
  std::size_t parameter_count = 0;
  std::size_t sequence_length = 0;
  std::vector<StepLog> losses;
  std::vector<EvalLog> evals;
  std::vector<ScaleCost> costs;  // one held-out inference pass
  std::size_t empty_mask_rows = 0;
  std::string timestamp;
  double wall_seconds = 0.0;

  const EvalLog& final_eval() const { return evals.back(); }
  /// The "timestamp" object holds every non-deterministic field.
  nlohmann::ordered_json to_json() const;
};

/// Held-out evaluation in inference mode. Never changes the parameters.
EvalLog evaluate(const SegmentationModel& model, std::size_t scenes, std::size_t step = 0);

struct TrainOptions {
  std::size_t steps = 0;
  // When set, receives report.json, model.ckpt and selection/.
  std::optional<std::filesystem::path> out_dir;
  std::function<void(const std::string&)> log;
  std::size_t log_interval = 100;
};

struct TrainResult {
  SegmentationModel model;
  RunReport report;
};

/// Throws NumericError on a non-finite loss, naming the step and terms.
TrainResult train(const ModelConfig& config, const TrainOptions& options);

/// Inference-mode selection maps for one scene.
void export_selection(const SegmentationModel& model, std::uint64_t scene_seed, const std::filesystem::path& out_dir);

void write_json(const nlohmann::ordered_json& j, const std::filesystem::path& path);

}  // namespace msfuse
