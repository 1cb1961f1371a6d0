#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "msfuse/model.hpp"

namespace msfuse {

struct GradcheckOptions {
  double tolerance = 1e-3;
  double eps = 1e-4;
  // Entries probed per parameter tensor (all of them when smaller).
  std::size_t samples_per_tensor = 48;
  std::uint64_t seed = 0;
  // Objective is the ratio loss alone; also checks dL/dP against
  // −2(ρ − mean_i)/(S·L).
  bool ratio_only = false;
  // Added to the objective. Lets tests plant a term with a broken backward.
  std::function<Tensor(const ForwardResult&)> extra_term;
};

struct GradcheckGroup {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_gradient = 0.0;
  bool passed = true;
};

struct GradcheckReport {
  std::vector<GradcheckGroup> groups;
  // Ratio-only objective: max |dL/dP − closed form|.
  std::optional<double> closed_form_error;
  double tolerance = 0.0;
  bool passed = true;

  std::vector<std::string> failing() const;
  nlohmann::ordered_json to_json() const;
};

/// |a − n| / max(|a|, |n|, 1e-6).
double relative_error(double analytic, double numeric);

/// Central differences on the training objective versus backprop, one group
/// per parameter tensor. Gumbel noise is frozen and the soft sample is used
/// as the mask so the objective is smooth.
GradcheckReport gradcheck(const ModelConfig& config, const GradcheckOptions& options = {});

}  // namespace msfuse
