#pragma once

#include <map>
#include <string>
#include <vector>

#include "msfuse/nn.hpp"

namespace msfuse {

struct AdamWOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay. Moment buffers are keyed by parameter
/// name, so the update order is the map order.
class AdamW {
 public:
  AdamW(ParamMap params, AdamWOptions options = {});

  /// Applies one update from the accumulated gradients.
  void step();
  void zero_grad();
  std::size_t steps() const { return t_; }
  const AdamWOptions& options() const { return options_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  ParamMap params_;
  AdamWOptions options_;
  std::map<std::string, Moments> state_;
  std::size_t t_ = 0;
};

}  // namespace msfuse
