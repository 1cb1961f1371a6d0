#include "msfuse/training.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "msfuse/optim.hpp"

namespace msfuse {

namespace {

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

nlohmann::ordered_json scale_array(const std::array<double, kNumScales>& a) {
  return nlohmann::ordered_json(std::vector<double>(a.begin(), a.end()));
}

nlohmann::ordered_json eval_json(const EvalLog& e) {
  nlohmann::ordered_json j;
  j["step"] = e.step;
  j["miou"] = e.miou.miou;
  nlohmann::ordered_json iou = nlohmann::ordered_json::array();
  for (const auto& c : e.miou.per_class) iou.push_back(c ? nlohmann::ordered_json(*c) : nlohmann::ordered_json());
  j["per_class_iou"] = iou;
  if (e.selection) {
    j["mean_score"] = scale_array(e.selection->mean_score);
    j["train_keep_ratio"] = scale_array(e.selection->train_keep_ratio);
    j["infer_keep_ratio"] = scale_array(e.selection->infer_keep_ratio);
  }
  return j;
}

void check_finite(const LossBreakdown& b, std::size_t step) {
  const double total = b.total.item();
  if (std::isfinite(total)) return;
  std::ostringstream s;
  s << "non-finite loss at step " << step << ": total=" << total << " seg=" << b.seg << " ratio=" << b.ratio
    << " aux=" << b.aux;
  throw NumericError(s.str());
}

constexpr std::uint64_t kGumbelStream = 0x9E3779B97F4A7C15ULL;
constexpr std::uint64_t kEvalStream = 0xD1B54A32D192ED03ULL;

}  // namespace

SyntheticSceneSpec scene_spec_for(const ModelConfig& config, std::uint64_t seed) {
  SyntheticSceneSpec s;
  const double f = static_cast<double>(std::min(config.image_h, config.image_w)) / 48.0;
  s.height = config.image_h;
  s.width = config.image_w;
  s.num_classes = config.num_classes;
  s.small_radius *= f;
  s.medium_radius *= f;
  s.large_radius *= f;
  s.seed = seed;
  return s;
}

std::uint64_t train_scene_seed(std::uint64_t run_seed, std::uint64_t sample_index) {
  return 2 * (run_seed * 1000003ULL + sample_index);
}

std::uint64_t eval_scene_seed(std::uint64_t scene_index) { return 2 * scene_index + 1; }

nlohmann::ordered_json RunReport::to_json() const {
  nlohmann::ordered_json j;
  j["config"] = config.to_json();
  j["seed"] = config.seed;
  j["steps"] = steps;
  j["parameter_count"] = parameter_count;
  j["sequence_length"] = sequence_length;
  nlohmann::ordered_json loss = nlohmann::ordered_json::array();
  for (const auto& l : losses) {
    nlohmann::ordered_json e;
    e["step"] = l.step;
    e["total"] = l.total;
    e["seg"] = l.seg;
    e["ratio"] = l.ratio;
    e["aux"] = l.aux;
    if (l.keep_ratio) e["keep_ratio"] = scale_array(*l.keep_ratio);
    loss.push_back(e);
  }
  j["losses"] = loss;
  nlohmann::ordered_json ev = nlohmann::ordered_json::array();
  for (const auto& e : evals) ev.push_back(eval_json(e));
  j["evals"] = ev;
  if (!evals.empty()) j["final"] = eval_json(evals.back());
  nlohmann::ordered_json cost = nlohmann::ordered_json::array();
  for (const auto& c : costs) {
    nlohmann::ordered_json e;
    e["scale"] = c.scale;
    e["path"] = c.projected ? "projected" : "base";
    e["attention_macs"] = c.attention_macs;
    e["projection_macs"] = c.projection_macs;
    e["peak_activation_floats"] = c.peak_activation_floats;
    cost.push_back(e);
  }
  j["costs"] = cost;
  j["empty_mask_rows"] = empty_mask_rows;
  j["timestamp"] = {{"finished_utc", timestamp}, {"wall_seconds", wall_seconds}};
  return j;
}

EvalLog evaluate(const SegmentationModel& model, std::size_t scenes, std::size_t step) {
  NoGradGuard no_grad;
  const ModelConfig& config = model.config();
  EvalLog log;
  log.step = step;
  MIoUAccumulator acc(config.num_classes);
  SelectionStats sel;
  const bool selecting = config.use_fusion && config.use_selection;
  Rng gumbel(config.seed ^ kEvalStream);
  for (std::size_t m = 0; m < scenes; ++m) {
    Scene scene = generate_scene(scene_spec_for(config, eval_scene_seed(m)));
    ForwardResult r = model.forward(scene.image, Mode::inference, gumbel);
    acc.add(argmax_labels(r.logits), scene.labels);
    if (!selecting) continue;
    ForwardResult t = model.forward(scene.image, Mode::training, gumbel);
    for (std::size_t s = 1; s <= kNumScales; ++s) {
      sel.mean_score[s - 1] += r.scores->column_mean(s);
      sel.infer_keep_ratio[s - 1] += r.decisions.keep_ratio(s, r.sequence_length);
      sel.train_keep_ratio[s - 1] += t.decisions.keep_ratio(s, t.sequence_length);
    }
  }
  log.miou = compute_miou(acc);
  if (selecting && scenes > 0) {
    const double n = static_cast<double>(scenes);
    for (std::size_t i = 0; i < kNumScales; ++i) {
      sel.mean_score[i] /= n;
      sel.infer_keep_ratio[i] /= n;
      sel.train_keep_ratio[i] /= n;
    }
    log.selection = sel;
  }
  return log;
}

TrainResult train(const ModelConfig& config, const TrainOptions& options) {
  const auto started = std::chrono::steady_clock::now();
  SegmentationModel model(config);
  RunReport report;
  report.config = config;
  report.steps = options.steps;
  report.parameter_count = model.parameter_count();
  report.sequence_length = config.use_fusion ? sequence_length(config.image_h, config.image_w) : 0;

  auto run_eval = [&](std::size_t step) {
    report.evals.push_back(evaluate(model, config.eval_scenes, step));
    if (options.log) {
      std::ostringstream s;
      s << "eval step " << step << " miou " << std::fixed << std::setprecision(4) << report.evals.back().miou.miou;
      options.log(s.str());
    }
  };

  run_eval(0);
  AdamW optimizer(model.parameters(),
                  AdamWOptions{config.learning_rate, 0.9, 0.999, 1e-8, config.weight_decay});
  Rng gumbel(config.seed ^ kGumbelStream);
  const bool selecting = config.use_fusion && config.use_selection;
  const double inv_batch = 1.0 / static_cast<double>(config.batch_size);
  for (std::size_t step = 1; step <= options.steps; ++step) {
    optimizer.zero_grad();
    StepLog log;
    log.step = step;
    std::array<double, kNumScales> keep{};
    for (std::size_t b = 0; b < config.batch_size; ++b) {
      const std::uint64_t index = (step - 1) * config.batch_size + b;
      Scene scene = generate_scene(scene_spec_for(config, train_scene_seed(config.seed, index)));
      ForwardResult r = model.forward(scene.image, Mode::training, gumbel);
      LossBreakdown loss = total_loss(r.logits, r.aux_logits, scene.labels, r.scores, config);
      check_finite(loss, step);
      scale(loss.total, inv_batch).backward();
      log.total += loss.total.item() * inv_batch;
      log.seg += loss.seg * inv_batch;
      log.ratio += loss.ratio * inv_batch;
      log.aux += loss.aux * inv_batch;
      if (selecting) {
        for (std::size_t s = 1; s <= kNumScales; ++s) keep[s - 1] += r.decisions.keep_ratio(s, r.sequence_length) * inv_batch;
      }
    }
    if (selecting) log.keep_ratio = keep;
    optimizer.step();
    report.losses.push_back(log);
    if (options.log && options.log_interval > 0 && step % options.log_interval == 0) {
      std::ostringstream s;
      s << "step " << step << " loss " << std::fixed << std::setprecision(4) << log.total << " (seg " << log.seg
        << ", ratio " << log.ratio << ", aux " << log.aux << ")";
      options.log(s.str());
    }
    if ((config.eval_interval > 0 && step % config.eval_interval == 0) || step == options.steps) {
      if (report.evals.back().step != step) run_eval(step);
    }
  }

  {
    NoGradGuard no_grad;
    Rng rng(config.seed ^ kEvalStream);
    Scene scene = generate_scene(scene_spec_for(config, eval_scene_seed(0)));
    ForwardResult r = model.forward(scene.image, Mode::inference, rng);
    report.costs = r.stats.costs;
    for (std::size_t m = 0; m < config.eval_scenes; ++m) {
      Scene s = generate_scene(scene_spec_for(config, eval_scene_seed(m)));
      ForwardResult t = model.forward(s.image, Mode::training, rng);
      report.empty_mask_rows += t.stats.empty_mask_rows;
    }
  }
  report.timestamp = utc_now();
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

  if (options.out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(*options.out_dir, ec);
    if (ec) throw IoError("cannot create " + options.out_dir->string() + ": " + ec.message());
    write_json(report.to_json(), *options.out_dir / "report.json");
    save_checkpoint(model, *options.out_dir / "model.ckpt");
    if (selecting) export_selection(model, eval_scene_seed(0), *options.out_dir / "selection");
  }
  return TrainResult{std::move(model), std::move(report)};
}

void export_selection(const SegmentationModel& model, std::uint64_t scene_seed, const std::filesystem::path& out_dir) {
  const ModelConfig& config = model.config();
  if (!config.use_fusion || !config.use_selection) throw ConfigError("model has no selection scorer");
  NoGradGuard no_grad;
  Rng rng(config.seed);
  Scene scene = generate_scene(scene_spec_for(config, scene_seed));
  ForwardResult r = model.forward(scene.image, Mode::inference, rng);
  export_selection_maps(r.sequence, *r.scores, r.decisions, out_dir);
}

void write_json(const nlohmann::ordered_json& j, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace msfuse
