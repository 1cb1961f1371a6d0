#include "msfuse/nn.hpp"

#include <cmath>
#include <numbers>

namespace msfuse {

double Rng::normal() {
  // Box-Muller; keeps draws identical across standard libraries.
  const double u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

namespace {

Tensor init_weight(Shape shape, std::size_t fan_in, Rng& rng) {
  const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = std_dev * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace

Linear Linear::make(std::size_t in, std::size_t out, Rng& rng) {
  return {init_weight({in, out}, in, rng), Tensor::zeros({out}, true)};
}

Tensor Linear::forward(const Tensor& x) const { return add_row_bias(matmul(x, weight), bias); }

void Linear::collect(const std::string& prefix, ParamMap& params) const {
  params[prefix + ".weight"] = weight;
  params[prefix + ".bias"] = bias;
}

Conv2d Conv2d::make(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride, Rng& rng) {
  return {init_weight({out, in, kernel, kernel}, in * kernel * kernel, rng), Tensor::zeros({out}, true), stride,
          kernel / 2};
}

Tensor Conv2d::forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }

void Conv2d::collect(const std::string& prefix, ParamMap& params) const {
  params[prefix + ".weight"] = weight;
  params[prefix + ".bias"] = bias;
}

}  // namespace msfuse
