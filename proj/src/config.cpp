#include <fstream>

#include "msfuse/model.hpp"

namespace msfuse {

ModelConfig ModelConfig::test_profile() { return ModelConfig{}; }

ModelConfig ModelConfig::wide_profile() {
  ModelConfig c;
  c.common_dim = 256;
  c.heads = 8;
  return c;
}

ModelConfig ModelConfig::tiny_profile() {
  ModelConfig c;
  c.image_h = 32;
  c.image_w = 32;
  c.base_channels = 4;
  c.common_dim = 16;
  c.heads = 4;
  c.num_classes = 3;
  return c;
}

void ModelConfig::validate() const {
  validate_image_size(image_h, image_w);
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (base_channels == 0) throw ConfigError("base_channels must be positive");
  if (common_dim < 2) throw ConfigError("common_dim must be at least 2");
  if (heads == 0 || common_dim % heads != 0) throw ConfigError("common_dim must be divisible by heads");
  if (!(target_ratio > 0.0 && target_ratio <= 1.0)) throw ConfigError("target_ratio must lie in (0, 1]");
  if (ratio_weight < 0.0 || aux_weight < 0.0) throw ConfigError("loss weights must be non-negative");
  if (reduction_ratio == 0) throw ConfigError("reduction_ratio must be positive");
  if (!(gumbel_temperature > 0.0)) throw ConfigError("gumbel_temperature must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (eval_scenes == 0) throw ConfigError("eval_scenes must be positive");
  for (auto s : use_projection_on) {
    if (s < 1 || s > kNumScales) throw ConfigError("use_projection_on entries must be scale indices 1..4");
    const std::size_t n = level_extent(image_h, s) * level_extent(image_w, s);
    if (n % reduction_ratio != 0) {
      throw ConfigError("scale " + std::to_string(s) + " has " + std::to_string(n) +
                        " tokens, not divisible by reduction_ratio " + std::to_string(reduction_ratio));
    }
  }
  if (use_selection && !use_fusion) throw ConfigError("use_selection requires use_fusion");
}

nlohmann::ordered_json ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["image_h"] = image_h;
  j["image_w"] = image_w;
  j["num_classes"] = num_classes;
  j["base_channels"] = base_channels;
  j["common_dim"] = common_dim;
  j["heads"] = heads;
  j["target_ratio"] = target_ratio;
  j["ratio_weight"] = ratio_weight;
  j["aux_weight"] = aux_weight;
  j["reduction_ratio"] = reduction_ratio;
  j["gumbel_temperature"] = gumbel_temperature;
  j["use_projection_on"] = std::vector<std::size_t>(use_projection_on.begin(), use_projection_on.end());
  j["eq5_literal"] = eq5_literal;
  j["residual"] = residual;
  j["use_fusion"] = use_fusion;
  j["use_selection"] = use_selection;
  j["merge"] = merge == Merge::concat ? "concat" : "sum";
  j["seed"] = seed;
  j["batch_size"] = batch_size;
  j["learning_rate"] = learning_rate;
  j["weight_decay"] = weight_decay;
  j["eval_interval"] = eval_interval;
  j["eval_scenes"] = eval_scenes;
  return j;
}

namespace {

template <typename T>
T read_field(const nlohmann::json& value, const std::string& key) {
  try {
    return value.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config field '" + key + "' has the wrong type");
  }
}

}  // namespace

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ModelConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "image_h") c.image_h = read_field<std::size_t>(value, key);
    else if (key == "image_w") c.image_w = read_field<std::size_t>(value, key);
    else if (key == "num_classes") c.num_classes = read_field<std::size_t>(value, key);
    else if (key == "base_channels") c.base_channels = read_field<std::size_t>(value, key);
    else if (key == "common_dim") c.common_dim = read_field<std::size_t>(value, key);
    else if (key == "heads") c.heads = read_field<std::size_t>(value, key);
    else if (key == "target_ratio") c.target_ratio = read_field<double>(value, key);
    else if (key == "ratio_weight") c.ratio_weight = read_field<double>(value, key);
    else if (key == "aux_weight") c.aux_weight = read_field<double>(value, key);
    else if (key == "reduction_ratio") c.reduction_ratio = read_field<std::size_t>(value, key);
    else if (key == "gumbel_temperature") c.gumbel_temperature = read_field<double>(value, key);
    else if (key == "use_projection_on") {
      auto v = read_field<std::vector<std::size_t>>(value, key);
      c.use_projection_on = std::set<std::size_t>(v.begin(), v.end());
    } else if (key == "eq5_literal") c.eq5_literal = read_field<bool>(value, key);
    else if (key == "residual") c.residual = read_field<bool>(value, key);
    else if (key == "use_fusion") c.use_fusion = read_field<bool>(value, key);
    else if (key == "use_selection") c.use_selection = read_field<bool>(value, key);
    else if (key == "merge") {
      auto m = read_field<std::string>(value, key);
      if (m == "concat") c.merge = Merge::concat;
      else if (m == "sum") c.merge = Merge::sum;
      else throw ConfigError("merge must be 'concat' or 'sum'");
    } else if (key == "seed") c.seed = read_field<std::uint64_t>(value, key);
    else if (key == "batch_size") c.batch_size = read_field<std::size_t>(value, key);
    else if (key == "learning_rate") c.learning_rate = read_field<double>(value, key);
    else if (key == "weight_decay") c.weight_decay = read_field<double>(value, key);
    else if (key == "eval_interval") c.eval_interval = read_field<std::size_t>(value, key);
    else if (key == "eval_scenes") c.eval_scenes = read_field<std::size_t>(value, key);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  c.validate();
  return c;
}

ModelConfig ModelConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

}  // namespace msfuse
