#include "msfuse/scenes.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

namespace msfuse {

namespace {

enum class ShapeKind { disk, rectangle, triangle };

constexpr int kPlacementAttempts = 24;

struct Shape2D {
  int label;
  ShapeKind kind;
  double cx, cy, radius;
  double aspect;    // rectangles: half-height / half-width
  double rotation;  // triangles
  std::array<double, 3> color;
};

std::array<double, 3> base_color(int label) {
  static constexpr std::array<std::array<double, 3>, 3> palette{{{0.85, 0.25, 0.25}, {0.25, 0.80, 0.30}, {0.30, 0.35, 0.85}}};
  if (label <= 3) return palette[static_cast<std::size_t>(label - 1)];
  // Further classes: spread hues on a circle.
  double hue = 2.0 * std::numbers::pi * (label - 1) / 7.0;
  return {0.55 + 0.3 * std::cos(hue), 0.55 + 0.3 * std::cos(hue + 2.1), 0.55 + 0.3 * std::cos(hue + 4.2)};
}

bool inside(const Shape2D& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  switch (s.kind) {
    case ShapeKind::disk:
      return dx * dx + dy * dy <= s.radius * s.radius;
    case ShapeKind::rectangle:
      return std::abs(dx) <= s.radius && std::abs(dy) <= s.radius * s.aspect;
    case ShapeKind::triangle: {
      std::array<double, 3> vx{}, vy{};
      for (int k = 0; k < 3; ++k) {
        const double a = s.rotation + 2.0 * std::numbers::pi * k / 3.0;
        vx[k] = s.cx + s.radius * std::cos(a);
        vy[k] = s.cy + s.radius * std::sin(a);
      }
      auto edge = [&](int i, int j) { return (vx[j] - vx[i]) * (y - vy[i]) - (vy[j] - vy[i]) * (x - vx[i]); };
      const double e0 = edge(0, 1), e1 = edge(1, 2), e2 = edge(2, 0);
      return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
    }
  }
  return false;
}

}  // namespace

Scene generate_scene(const SyntheticSceneSpec& spec, Rng& rng) {
  if (spec.height == 0 || spec.width == 0) throw ConfigError("scene size must be positive");
  if (spec.num_classes < 2) throw ConfigError("scene needs at least one foreground class");
  if (spec.noise < 0.0) throw ConfigError("scene noise must be non-negative");
  if (!(spec.triangle_scale > 0.0)) throw ConfigError("triangle_scale must be positive");
  const std::size_t h = spec.height, w = spec.width;
  Scene scene;
  const std::array<double, 3> buckets{spec.small_radius, spec.medium_radius, spec.large_radius};
  std::vector<Shape2D> shapes;
  for (int label = 1; label < static_cast<int>(spec.num_classes); ++label) {
    Shape2D s{};
    s.label = label;
    s.kind = static_cast<ShapeKind>((label - 1) % 3);
    s.radius = buckets[rng.below(3)] * rng.uniform(0.8, 1.2);
    s.aspect = rng.uniform(0.6, 1.0);
    s.rotation = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double limit = (static_cast<double>(std::min(h, w)) - 2.0) / 2.0;
    if (s.radius > limit) {
      scene.log.push_back("class " + std::to_string(label) + " radius " + std::to_string(s.radius) + " shrunk to " +
                          std::to_string(limit));
      s.radius = limit;
    }
    if (s.kind == ShapeKind::triangle) s.radius = std::min(s.radius * spec.triangle_scale, limit);
    // Rejection placement: the first candidate clear of earlier shapes wins,
    // otherwise the one with the widest clearance.
    double best_clearance = -1e300;
    for (int attempt = 0; attempt < kPlacementAttempts; ++attempt) {
      const double cx = rng.uniform(s.radius + 0.5, static_cast<double>(w) - s.radius - 0.5);
      const double cy = rng.uniform(s.radius + 0.5, static_cast<double>(h) - s.radius - 0.5);
      double clearance = 1e300;
      for (const auto& o : shapes) clearance = std::min(clearance, std::hypot(cx - o.cx, cy - o.cy) - s.radius - o.radius);
      if (clearance > best_clearance) {
        best_clearance = clearance;
        s.cx = cx;
        s.cy = cy;
      }
      if (clearance >= 0.0) break;
    }
    auto base = base_color(label);
    for (std::size_t c = 0; c < 3; ++c) s.color[c] = base[c] + rng.uniform(-0.08, 0.08);
    shapes.push_back(s);
  }
  // Large shapes first so small ones stay visible.
  std::stable_sort(shapes.begin(), shapes.end(), [](const Shape2D& a, const Shape2D& b) { return a.radius > b.radius; });

  std::array<double, 3> freq_x{}, freq_y{}, phase{};
  for (std::size_t c = 0; c < 3; ++c) {
    freq_x[c] = rng.uniform(0.1, 0.5);
    freq_y[c] = rng.uniform(0.1, 0.5);
    phase[c] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }

  scene.labels.height = h;
  scene.labels.width = w;
  scene.labels.labels.assign(h * w, 0);
  std::vector<double> pixels(3 * h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      std::array<double, 3> color{};
      for (std::size_t c = 0; c < 3; ++c) color[c] = 0.45 + 0.12 * std::sin(freq_x[c] * px + phase[c]) * std::cos(freq_y[c] * py);
      int label = 0;
      for (const auto& s : shapes) {
        if (inside(s, px, py)) {
          label = s.label;
          color = s.color;
        }
      }
      scene.labels.labels[y * w + x] = label;
      for (std::size_t c = 0; c < 3; ++c) {
        const double n = spec.noise > 0.0 ? spec.noise * rng.normal() : 0.0;
        pixels[(c * h + y) * w + x] = color[c] + n - 0.5;
      }
    }
  }
  scene.image = Tensor::from({3, h, w}, std::move(pixels));
  return scene;
}

Scene generate_scene(const SyntheticSceneSpec& spec) {
  Rng rng(spec.seed);
  return generate_scene(spec, rng);
}

}  // namespace msfuse
