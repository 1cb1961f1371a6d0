#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>

#include "msfuse/ops.hpp"

namespace msfuse {

/// Seeded generator passed explicitly wherever randomness is needed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Uniform in the open interval (0, 1).
  double uniform() {
    // 53 random bits, shifted off zero.
    return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::uint64_t next() { return engine_(); }
  // Uniform integer in [0, n).
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }

 private:
  std::mt19937_64 engine_;
};

/// Named parameters, iterated in lexicographic name order.
using ParamMap = std::map<std::string, Tensor>;

struct Linear {
  Tensor weight;  // in × out
  Tensor bias;    // out

  static Linear make(std::size_t in, std::size_t out, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamMap& params) const;
};

struct Conv2d {
  Tensor weight;  // out × in × k × k
  Tensor bias;    // out
  std::size_t stride = 1;
  std::size_t pad = 0;

  static Conv2d make(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamMap& params) const;
};

}  // namespace msfuse
