#pragma once

#include <string>
#include <vector>

#include "msfuse/nn.hpp"

namespace msfuse {

/// Random hard-edged shapes on a textured background. Class 0 is background;
/// classes 1.. cycle through disk, rectangle and triangle.
struct SyntheticSceneSpec {
  std::size_t height = 48;
  std::size_t width = 48;
  std::size_t num_classes = 4;
  // Nominal radii of the three size buckets, in pixels; each shape picks a
  // bucket uniformly and jitters the radius by ±20%.
  double small_radius = 6.0;
  double medium_radius = 10.0;
  double large_radius = 15.0;
  // Triangle circumradius relative to the drawn radius; an equilateral
  // triangle needs about 1.55 to match the area of the disk.
  double triangle_scale = 1.55;
  double noise = 0.08;
  std::uint64_t seed = 0;
};

struct Scene {
  Tensor image;  // 3 × H × W
  LabelMap labels;
  std::vector<std::string> log;  // shapes shrunk to fit, etc.
};

Scene generate_scene(const SyntheticSceneSpec& spec, Rng& rng);
/// Uses spec.seed.
Scene generate_scene(const SyntheticSceneSpec& spec);

}  // namespace msfuse
