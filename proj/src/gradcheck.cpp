#include "msfuse/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "msfuse/training.hpp"

namespace msfuse {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

std::vector<std::string> GradcheckReport::failing() const {
  std::vector<std::string> names;
  for (const auto& g : groups) {
    if (!g.passed) names.push_back(g.name);
  }
  if (closed_form_error && *closed_form_error > tolerance) names.push_back("scores.closed_form");
  return names;
}

nlohmann::ordered_json GradcheckReport::to_json() const {
  nlohmann::ordered_json j;
  j["tolerance"] = tolerance;
  j["passed"] = passed;
  nlohmann::ordered_json g = nlohmann::ordered_json::array();
  for (const auto& e : groups) {
    g.push_back({{"name", e.name},
                 {"checked", e.checked},
                 {"max_rel_error", e.max_rel_error},
                 {"max_abs_gradient", e.max_abs_gradient},
                 {"passed", e.passed}});
  }
  j["groups"] = g;
  if (closed_form_error) j["closed_form_error"] = *closed_form_error;
  j["failing"] = failing();
  return j;
}

GradcheckReport gradcheck(const ModelConfig& config, const GradcheckOptions& options) {
  SegmentationModel model(config);
  Scene scene = generate_scene(scene_spec_for(config, eval_scene_seed(0)));
  const std::uint64_t noise_seed = options.seed ^ 0xA0761D6478BD642FULL;
  ForwardOptions fo;
  fo.relaxed_decisions = true;

  auto objective = [&](ForwardResult& r) {
    Rng rng(noise_seed);
    r = model.forward(scene.image, Mode::training, rng, fo);
    Tensor loss;
    if (options.ratio_only) {
      if (!r.scores) throw ConfigError("ratio-only gradcheck needs selection enabled");
      loss = ratio_loss(*r.scores, config.target_ratio);
    } else {
      loss = total_loss(r.logits, r.aux_logits, scene.labels, r.scores, config).total;
    }
    if (options.extra_term) loss = add(loss, options.extra_term(r));
    return loss;
  };

  ParamMap params = model.parameters();
  for (auto& [name, p] : params) p.zero_grad();
  GradcheckReport report;
  report.tolerance = options.tolerance;
  {
    ForwardResult r;
    Tensor loss = objective(r);
    loss.backward();
    if (options.ratio_only) {
      const Tensor& probs = r.scores->probs;
      const std::vector<double> g = probs.grad();
      const std::size_t l = probs.dim(0);
      double worst = 0.0;
      for (std::size_t s = 0; s < kNumScales; ++s) {
        const double expected = -2.0 * (config.target_ratio - r.scores->column_mean(s + 1)) /
                                (static_cast<double>(kNumScales) * static_cast<double>(l));
        for (std::size_t j = 0; j < l; ++j) worst = std::max(worst, std::abs(g[j * kNumScales + s] - expected));
      }
      report.closed_form_error = worst;
    }
  }

  Rng pick(options.seed);
  NoGradGuard no_grad;
  for (auto& [name, p] : params) {
    const std::vector<double> analytic = p.grad();
    std::vector<std::size_t> idx(p.numel());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t n = std::min(options.samples_per_tensor, idx.size());
    for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + pick.below(idx.size() - i)]);
    idx.resize(n);
    std::sort(idx.begin(), idx.end());

    GradcheckGroup group;
    group.name = name;
    auto values = p.mutable_values();
    for (std::size_t i : idx) {
      const double saved = values[i];
      ForwardResult r;
      values[i] = saved + options.eps;
      const double up = objective(r).item();
      values[i] = saved - options.eps;
      const double down = objective(r).item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * options.eps);
      group.max_rel_error = std::max(group.max_rel_error, relative_error(analytic[i], numeric));
      group.max_abs_gradient = std::max(group.max_abs_gradient, std::abs(analytic[i]));
      ++group.checked;
    }
    group.passed = group.max_rel_error < options.tolerance;
    report.groups.push_back(group);
  }
  report.passed = report.failing().empty();
  return report;
}

}  // namespace msfuse
