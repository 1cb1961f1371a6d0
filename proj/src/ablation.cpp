#include "msfuse/ablation.hpp"

#include <algorithm>

namespace msfuse {

ModelConfig variant_config(const std::string& variant, const ModelConfig& base) {
  ModelConfig c = base;
  if (variant == "baseline") {
    c.use_fusion = false;
    c.use_selection = false;
    c.use_projection_on.clear();
  } else if (variant == "fff") {
    c.use_fusion = true;
    c.use_selection = false;
    c.use_projection_on.clear();
  } else if (variant == "fff+sfs") {
    c.use_fusion = true;
    c.use_selection = true;
    c.use_projection_on.clear();
  } else if (variant == "fff+sfs+pm") {
    c.use_fusion = true;
    c.use_selection = true;
    if (c.use_projection_on.empty()) c.use_projection_on = {1};
  } else {
    throw ConfigError("unknown variant '" + variant + "' (expected baseline, fff, fff+sfs or fff+sfs+pm)");
  }
  c.validate();
  return c;
}

double median(std::vector<double> values) {
  if (values.empty()) throw ConfigError("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::vector<const AblationRun*> AblationResult::runs_of(const std::string& variant) const {
  std::vector<const AblationRun*> out;
  for (const auto& r : runs) {
    if (r.variant == variant) out.push_back(&r);
  }
  return out;
}

nlohmann::ordered_json AblationResult::to_json() const {
  nlohmann::ordered_json j;
  nlohmann::ordered_json runs_json = nlohmann::ordered_json::array();
  for (const auto& r : runs) {
    runs_json.push_back({{"variant", r.variant}, {"seed", r.seed}, {"final_miou", r.report.final_eval().miou.miou}});
  }
  j["runs"] = runs_json;
  nlohmann::ordered_json med;
  for (const auto& [name, m] : median_miou) med[name] = m;
  j["median_miou"] = med;
  j["slack"] = slack;
  if (ordering_holds) j["ordering_holds"] = *ordering_holds;
  return j;
}

AblationResult ablate(const ModelConfig& base, const AblationOptions& options) {
  if (options.seeds == 0) throw ConfigError("ablation needs at least one seed");
  std::vector<ModelConfig> configs;
  for (const auto& v : options.variants) configs.push_back(variant_config(v, base));
  AblationResult result;
  for (std::size_t i = 0; i < options.variants.size(); ++i) {
    std::vector<double> mious;
    for (std::size_t k = 0; k < options.seeds; ++k) {
      ModelConfig c = configs[i];
      c.seed = k;
      TrainOptions to;
      to.steps = options.steps;
      if (options.out_dir) to.out_dir = *options.out_dir / options.variants[i] / ("seed" + std::to_string(k));
      TrainResult t = train(c, to);
      const double m = t.report.final_eval().miou.miou;
      if (options.log) {
        options.log(options.variants[i] + " seed " + std::to_string(k) + " miou " + std::to_string(m) + " (" +
                    std::to_string(t.report.wall_seconds) + " s)");
      }
      mious.push_back(m);
      result.runs.push_back(AblationRun{options.variants[i], k, std::move(t.report)});
    }
    result.median_miou[options.variants[i]] = median(mious);
  }
  const auto& med = result.median_miou;
  if (med.count("baseline") && med.count("fff") && med.count("fff+sfs")) {
    result.ordering_holds = med.at("baseline") <= med.at("fff") && med.at("fff") <= med.at("fff+sfs") + result.slack;
  }
  return result;
}

}  // namespace msfuse
