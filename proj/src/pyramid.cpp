#include "msfuse/pyramid.hpp"

namespace msfuse {

std::size_t scale_stride(std::size_t scale) {
  if (scale < 1 || scale > kNumScales) throw ConfigError("scale index must be in 1..4, got " + std::to_string(scale));
  return std::size_t{1} << (scale + 1);
}

std::size_t level_extent(std::size_t image_extent, std::size_t scale) {
  const std::size_t s = scale_stride(scale);
  return (image_extent + s - 1) / s;
}

void validate_image_size(std::size_t height, std::size_t width) {
  if (height < 32 || width < 32 || height % 16 != 0 || width % 16 != 0) {
    throw ConfigError("image size " + std::to_string(height) + "x" + std::to_string(width) +
                      " must be multiples of 16 and at least 32");
  }
}

std::size_t sequence_length(std::size_t height, std::size_t width) {
  std::size_t total = 0;
  for (std::size_t s = 1; s <= kNumScales; ++s) total += level_extent(height, s) * level_extent(width, s);
  return total;
}

std::size_t closed_form_sequence_length(std::size_t height, std::size_t width) {
  if (height % 32 != 0 || width % 32 != 0) {
    throw ConfigError("closed-form sequence length needs sizes divisible by 32");
  }
  std::size_t total = 0;
  for (std::size_t i = 1; i <= kNumScales; ++i) total += height * width / (std::size_t{1} << (2 * i + 2));
  return total;
}

ToyBackbone ToyBackbone::make(std::size_t base_channels, Rng& rng) {
  if (base_channels == 0) throw ConfigError("base_channels must be positive");
  ToyBackbone b;
  b.base_channels = base_channels;
  b.stem = Conv2d::make(3, base_channels, 3, 2, rng);
  std::size_t in = base_channels;
  for (std::size_t i = 0; i < kNumScales; ++i) {
    const std::size_t out = base_channels << i;
    b.stages[i] = Conv2d::make(in, out, 3, 2, rng);
    in = out;
  }
  return b;
}

void ToyBackbone::collect(const std::string& prefix, ParamMap& params) const {
  stem.collect(prefix + ".stem", params);
  for (std::size_t i = 0; i < kNumScales; ++i) stages[i].collect(prefix + ".stage" + std::to_string(i + 1), params);
}

TopDownParams TopDownParams::make(std::size_t base_channels, std::size_t common_dim, Rng& rng) {
  TopDownParams p;
  for (std::size_t i = 0; i < kNumScales; ++i) p.laterals[i] = Conv2d::make(base_channels << i, common_dim, 1, 1, rng);
  return p;
}

void TopDownParams::collect(const std::string& prefix, ParamMap& params) const {
  for (std::size_t i = 0; i < kNumScales; ++i) laterals[i].collect(prefix + ".lateral" + std::to_string(i + 1), params);
}

FeaturePyramid extract_pyramid(const Tensor& image, const ToyBackbone& backbone) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("extract_pyramid: expected 3×H×W, got " + shape_str(image.shape()));
  validate_image_size(image.dim(1), image.dim(2));
  FeaturePyramid p;
  p.base_channels = backbone.base_channels;
  Tensor x = gelu(backbone.stem.forward(image));
  for (std::size_t i = 0; i < kNumScales; ++i) {
    x = gelu(backbone.stages[i].forward(x));
    p.raw[i] = x;
  }
  return p;
}

FeaturePyramid top_down_enhance(FeaturePyramid pyramid, const TopDownParams& params) {
  for (const auto& r : pyramid.raw) {
    if (!r.defined()) throw std::logic_error("top_down_enhance: raw levels missing");
  }
  Tensor above;
  for (std::size_t i = kNumScales; i-- > 0;) {
    Tensor lateral = params.laterals[i].forward(pyramid.raw[i]);
    if (above.defined()) lateral = add(lateral, upsample_nearest(above, 2, lateral.dim(1), lateral.dim(2)));
    pyramid.enhanced[i] = lateral;
    above = lateral;
  }
  pyramid.common_dim = pyramid.enhanced[0].dim(0);
  return pyramid;
}

Tensor map_to_tokens(const Tensor& map) {
  if (map.rank() != 3) throw ShapeError("map_to_tokens: expected D×h×w, got " + shape_str(map.shape()));
  const std::size_t d = map.dim(0);
  return transpose(reshape(map, {d, map.dim(1) * map.dim(2)}));
}

Tensor tokens_to_map(const Tensor& tokens, std::size_t height, std::size_t width) {
  if (tokens.rank() != 2 || tokens.dim(0) != height * width) {
    throw ShapeError("tokens_to_map: " + shape_str(tokens.shape()) + " vs " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  return reshape(transpose(tokens), {tokens.dim(1), height, width});
}

Tensor TokenSequence::scale_tokens(std::size_t scale) const {
  scale_stride(scale);
  const std::size_t i = scale - 1;
  return slice_rows(tokens, offsets[i], offsets[i] + lengths[i]);
}

TokenSequence rearrange(const FeaturePyramid& pyramid) {
  if (!pyramid.has_enhanced()) throw std::logic_error("rearrange: enhanced levels missing");
  TokenSequence seq;
  std::vector<Tensor> parts;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < kNumScales; ++i) {
    const Tensor& level = pyramid.enhanced[i];
    const std::size_t h = level.dim(1), w = level.dim(2);
    parts.push_back(map_to_tokens(level));
    seq.heights[i] = h;
    seq.widths[i] = w;
    seq.lengths[i] = h * w;
    seq.offsets[i] = offset;
    offset += h * w;
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) seq.provenance.push_back({i + 1, r, c});
  }
  seq.tokens = concat(parts, 0);
  return seq;
}

std::array<Tensor, kNumScales> scatter_levels(const TokenSequence& seq) {
  std::array<Tensor, kNumScales> out;
  for (std::size_t i = 0; i < kNumScales; ++i) {
    // Place each token by its recorded coordinates rather than by offset.
    std::vector<std::size_t> order(seq.lengths[i]);
    for (std::size_t t = seq.offsets[i]; t < seq.offsets[i] + seq.lengths[i]; ++t) {
      const auto& o = seq.provenance[t];
      order[o.row * seq.widths[i] + o.col] = t;
    }
    out[i] = tokens_to_map(gather_rows(seq.tokens, order), seq.heights[i], seq.widths[i]);
  }
  return out;
}

}  // namespace msfuse
