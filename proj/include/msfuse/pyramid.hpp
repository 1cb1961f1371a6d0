#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "msfuse/nn.hpp"

namespace msfuse {

inline constexpr std::size_t kNumScales = 4;

// Scale indices are 1-based (1 = finest, stride 4; 4 = coarsest, stride 32).
std::size_t scale_stride(std::size_t scale);

/// Spatial extent of `scale` for an image extent; exact when the image
/// extent is a multiple of 32, rounded up otherwise.
std::size_t level_extent(std::size_t image_extent, std::size_t scale);

/// Image sizes must be multiples of 16 and at least 32 pixels.
void validate_image_size(std::size_t height, std::size_t width);

/// Number of tokens in the full-scale sequence, from the per-level sizes.
std::size_t sequence_length(std::size_t height, std::size_t width);

/// Σ_i HW / 2^(2i+2); requires height and width divisible by 32.
std::size_t closed_form_sequence_length(std::size_t height, std::size_t width);

/// Convolutional stand-in for a hierarchical backbone. Stage 1 is a pair of
/// stride-2 3×3 convs (total stride 4); stages 2-4 are one stride-2 3×3 conv
/// each. Every conv is followed by GELU. Stage i emits 2^(i-1)·C channels.
struct ToyBackbone {
  Conv2d stem;
  std::array<Conv2d, kNumScales> stages;
  std::size_t base_channels = 0;

  static ToyBackbone make(std::size_t base_channels, Rng& rng);
  void collect(const std::string& prefix, ParamMap& params) const;
};

struct TopDownParams {
  std::array<Conv2d, kNumScales> laterals;  // 1×1, 2^(i-1)·C → D

  static TopDownParams make(std::size_t base_channels, std::size_t common_dim, Rng& rng);
  void collect(const std::string& prefix, ParamMap& params) const;
};

struct FeaturePyramid {
  std::array<Tensor, kNumScales> raw;       // F_i
  std::array<Tensor, kNumScales> enhanced;  // F̂_i, D channels each
  std::size_t base_channels = 0;
  std::size_t common_dim = 0;

  bool has_enhanced() const { return enhanced[0].defined(); }
};

FeaturePyramid extract_pyramid(const Tensor& image, const ToyBackbone& backbone);

/// F̂_4 = lateral(F_4); F̂_i = lateral(F_i) + up2(F̂_{i+1}) cropped to level i.
FeaturePyramid top_down_enhance(FeaturePyramid pyramid, const TopDownParams& params);

struct TokenOrigin {
  std::size_t scale;  // 1..4
  std::size_t row;
  std::size_t col;

  bool operator==(const TokenOrigin&) const = default;
};

/// Full-scale sequence: scale-major, row-major within a scale.
struct TokenSequence {
  Tensor tokens;  // L × D
  std::vector<TokenOrigin> provenance;
  std::array<std::size_t, kNumScales> lengths{};
  std::array<std::size_t, kNumScales> offsets{};
  std::array<std::size_t, kNumScales> heights{};
  std::array<std::size_t, kNumScales> widths{};

  std::size_t size() const { return provenance.size(); }
  std::size_t dim() const { return tokens.dim(1); }
  /// Token rows belonging to one scale, as an N_i × D tensor.
  Tensor scale_tokens(std::size_t scale) const;
};

TokenSequence rearrange(const FeaturePyramid& pyramid);

/// D×h×w map → (h·w)×D tokens, row-major.
Tensor map_to_tokens(const Tensor& map);
/// (h·w)×D tokens → D×h×w map.
Tensor tokens_to_map(const Tensor& tokens, std::size_t height, std::size_t width);

/// Inverse of rearrange: places every token back at its provenance.
std::array<Tensor, kNumScales> scatter_levels(const TokenSequence& seq);

}  // namespace msfuse
