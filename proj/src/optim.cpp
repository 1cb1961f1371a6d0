#include "msfuse/optim.hpp"

#include <cmath>

namespace msfuse {

AdamW::AdamW(ParamMap params, AdamWOptions options) : params_(std::move(params)), options_(options) {
  for (const auto& [name, p] : params_) {
    if (!p.requires_grad()) throw ConfigError("parameter '" + name + "' does not require gradients");
    state_[name] = Moments{std::vector<double>(p.numel(), 0.0), std::vector<double>(p.numel(), 0.0)};
  }
}

void AdamW::step() {
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double lr = options_.learning_rate, wd = options_.weight_decay;
  for (auto& [name, p] : params_) {
    auto& s = state_.at(name);
    const std::vector<double> g = p.grad();
    auto w = p.mutable_values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      s.m[i] = b1 * s.m[i] + (1.0 - b1) * g[i];
      s.v[i] = b2 * s.v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = s.m[i] / c1, vhat = s.v[i] / c2;
      w[i] -= lr * (mhat / (std::sqrt(vhat) + options_.eps) + wd * w[i]);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

}  // namespace msfuse
