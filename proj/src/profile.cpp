#include "msfuse/profile.hpp"

namespace msfuse {

namespace {

std::vector<ScaleCost> run_costs(const ModelConfig& config) {
  NoGradGuard no_grad;
  SegmentationModel model(config);
  Rng rng(config.seed);
  std::vector<double> pixels(3 * config.image_h * config.image_w);
  for (double& v : pixels) v = rng.uniform(-0.5, 0.5);
  ForwardResult r = model.forward(Tensor::from({3, config.image_h, config.image_w}, std::move(pixels)),
                                  Mode::inference, rng);
  return r.stats.costs;
}

}  // namespace

std::vector<ProfileEntry> profile_costs(const ModelConfig& config, const std::vector<std::size_t>& sizes) {
  if (!config.use_fusion) throw ConfigError("profiling needs fusion enabled");
  std::vector<ProfileEntry> out;
  for (std::size_t size : sizes) {
    ModelConfig base = config;
    base.image_h = base.image_w = size;
    ModelConfig projected = base;
    base.use_projection_on.clear();
    if (projected.use_projection_on.empty()) projected.use_projection_on = {1};
    base.validate();
    projected.validate();
    for (const auto& c : run_costs(base)) out.push_back({size, c});
    for (const auto& c : run_costs(projected)) {
      if (c.projected) out.push_back({size, c});
    }
  }
  return out;
}

nlohmann::ordered_json profile_json(const std::vector<ProfileEntry>& entries) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    nlohmann::ordered_json o;
    o["size"] = e.size;
    o["scale"] = e.cost.scale;
    o["path"] = e.cost.projected ? "projected" : "base";
    o["attention_macs"] = e.cost.attention_macs;
    o["projection_macs"] = e.cost.projection_macs;
    o["peak_activation_floats"] = e.cost.peak_activation_floats;
    j.push_back(o);
  }
  return j;
}

}  // namespace msfuse
