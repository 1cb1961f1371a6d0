#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "msfuse/training.hpp"

namespace msfuse {

/// Variant names: baseline (FPN head at stride 8), fff (fusion, no
/// selection), fff+sfs (fusion with selection, no projection) and fff+sfs+pm
/// (the full default model). Throws ConfigError for anything else.
ModelConfig variant_config(const std::string& variant, const ModelConfig& base);

struct AblationRun {
  std::string variant;
  std::uint64_t seed = 0;
  RunReport report;
};

struct AblationResult {
  std::vector<AblationRun> runs;
  std::map<std::string, double> median_miou;
  // baseline ≤ fff and fff ≤ fff+sfs + slack, when those variants ran.
  std::optional<bool> ordering_holds;
  double slack = 0.01;

  std::vector<const AblationRun*> runs_of(const std::string& variant) const;
  nlohmann::ordered_json to_json() const;
};

struct AblationOptions {
  std::vector<std::string> variants{"baseline", "fff", "fff+sfs", "fff+sfs+pm"};
  std::size_t seeds = 3;
  std::size_t steps = 2000;
  // Per-run artifacts go to <out>/<variant>/seed<k>/.
  std::optional<std::filesystem::path> out_dir;
  std::function<void(const std::string&)> log;
};

AblationResult ablate(const ModelConfig& base, const AblationOptions& options);

double median(std::vector<double> values);

}  // namespace msfuse
