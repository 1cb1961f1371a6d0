#pragma once

#include <vector>

#include "msfuse/model.hpp"

namespace msfuse {

struct ProfileEntry {
  std::size_t size = 0;  // square input extent
  ScaleCost cost;
};

/// Fusion-stage counters from one inference pass per input size, once with
/// projection off (every scale, path "base") and once with it on (projected
/// scales only). The projected run uses the config's projection scales, or
/// scale 1 when none are set.
std::vector<ProfileEntry> profile_costs(const ModelConfig& config, const std::vector<std::size_t>& sizes);

nlohmann::ordered_json profile_json(const std::vector<ProfileEntry>& entries);

}  // namespace msfuse
