#include "msfuse/model.hpp"

#include <numeric>

namespace msfuse {

namespace {

DecisionSet select_all(std::size_t sequence_length) {
  DecisionSet d;
  d.mode = Mode::inference;
  std::vector<std::size_t> all(sequence_length);
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (std::size_t i = 0; i < kNumScales; ++i) {
    d.selected[i] = all;
    d.ranking[i] = all;
  }
  return d;
}

}  // namespace

SegmentationModel::SegmentationModel(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng(config_.seed);
  const std::size_t c = config_.base_channels, d = config_.common_dim, k = config_.num_classes;
  backbone_ = ToyBackbone::make(c, rng);
  top_down_ = TopDownParams::make(c, d, rng);
  if (config_.use_fusion) {
    if (config_.use_selection) scorer_ = ScorerMLP::make(d, rng);
    for (auto& m : mca_) m = MCAParams::make(d, config_.heads, rng);
    for (auto s : config_.use_projection_on) {
      const std::size_t n = level_extent(config_.image_h, s) * level_extent(config_.image_w, s);
      generators_[s - 1] = ProjectionGenerator::make(d, n, config_.reduction_ratio, rng);
    }
    const std::size_t head_in = config_.merge == Merge::concat ? kNumScales * d : d;
    head_conv_ = Conv2d::make(head_in, d, 3, 1, rng);
  } else {
    head_conv_ = Conv2d::make(d, d, 3, 1, rng);
    head_conv2_ = Conv2d::make(d, d, 3, 1, rng);
  }
  head_cls_ = Conv2d::make(d, k, 1, 1, rng);
  aux_conv_ = Conv2d::make(4 * c, d, 3, 1, rng);
  aux_cls_ = Conv2d::make(d, k, 1, 1, rng);
}

ParamMap SegmentationModel::parameters() const {
  ParamMap p;
  backbone_.collect("backbone", p);
  top_down_.collect("top_down", p);
  if (config_.use_fusion) {
    if (config_.use_selection) scorer_.collect("scorer", p);
    for (std::size_t i = 0; i < kNumScales; ++i) {
      mca_[i].collect("fusion.scale" + std::to_string(i + 1), p);
      if (generators_[i]) generators_[i]->collect("projection.scale" + std::to_string(i + 1), p);
    }
  } else {
    head_conv2_.collect("head.conv2", p);
  }
  head_conv_.collect("head.conv", p);
  head_cls_.collect("head.cls", p);
  aux_conv_.collect("aux.conv", p);
  aux_cls_.collect("aux.cls", p);
  return p;
}

std::size_t SegmentationModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : parameters()) n += t.numel();
  return n;
}

ForwardResult SegmentationModel::forward(const Tensor& image, Mode mode, Rng& rng, const ForwardOptions& options) const {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != config_.image_h || image.dim(2) != config_.image_w) {
    throw ConfigError("image " + shape_str(image.shape()) + " does not match configured 3x" +
                      std::to_string(config_.image_h) + "x" + std::to_string(config_.image_w));
  }
  const std::size_t h = config_.image_h, w = config_.image_w;
  ForwardResult r;
  FeaturePyramid pyramid = top_down_enhance(extract_pyramid(image, backbone_), top_down_);

  Tensor head_logits;
  std::size_t head_stride = 0;
  if (!config_.use_fusion) {
    // FPN baseline: stride-8 level, two 3×3 convs and a 1×1 classifier.
    Tensor x = gelu(head_conv_.forward(pyramid.enhanced[1]));
    x = gelu(head_conv2_.forward(x));
    head_logits = head_cls_.forward(x);
    head_stride = scale_stride(2);
  } else {
    TokenSequence seq = rearrange(pyramid);
    r.sequence_length = seq.size();
    const double rho = options.rho.value_or(config_.target_ratio);
    if (config_.use_selection) {
      r.scores = score(seq, scorer_);
      r.decisions = mode == Mode::training
                        ? gumbel_sample(*r.scores, config_.gumbel_temperature, rng, options.relaxed_decisions)
                        : topk_select(*r.scores, rho);
    } else {
      r.decisions = mode == Mode::training ? keep_all(seq.size()) : select_all(seq.size());
    }
    FusionOptions fo{config_.eq5_literal, config_.residual};
    auto fused = fuse_all_scales(seq, r.decisions, mca_, generators_, fo, &r.stats);
    r.sequence = seq;
    const std::size_t h1 = seq.heights[0], w1 = seq.widths[0];
    std::vector<Tensor> maps;
    for (std::size_t i = 0; i < kNumScales; ++i) {
      maps.push_back(upsample_nearest(fused[i].map, std::size_t{1} << i, h1, w1));
    }
    Tensor merged;
    if (config_.merge == Merge::concat) {
      merged = concat(maps, 0);
    } else {
      merged = maps[0];
      for (std::size_t i = 1; i < maps.size(); ++i) merged = add(merged, maps[i]);
    }
    head_logits = head_cls_.forward(gelu(head_conv_.forward(merged)));
    head_stride = scale_stride(1);
  }
  r.logits = upsample_nearest(head_logits, head_stride, h, w);
  Tensor aux = aux_cls_.forward(gelu(aux_conv_.forward(pyramid.raw[2])));
  r.aux_logits = upsample_nearest(aux, scale_stride(3), h, w);
  return r;
}

Tensor ratio_loss(const ScoreMatrix& scores, double rho) {
  const Tensor& p = scores.probs;
  if (!p.defined() || p.rank() != 2 || p.dim(1) != kNumScales) throw ShapeError("ratio_loss: scores must be L×4");
  // Averaging ρ − P per token keeps P ≡ ρ at exactly zero.
  Tensor deviation = mean(sub(Tensor::full(p.shape(), rho), p), 0);
  return mean(mul(deviation, deviation));
}

LossBreakdown total_loss(const Tensor& logits, const Tensor& aux_logits, const LabelMap& labels,
                         const std::optional<ScoreMatrix>& scores, const ModelConfig& config) {
  LossBreakdown b;
  Tensor seg = cross_entropy(logits, labels);
  Tensor aux = cross_entropy(aux_logits, labels);
  b.seg = seg.item();
  b.aux = aux.item();
  Tensor total = add(seg, scale(aux, config.aux_weight));
  if (scores) {
    Tensor ratio = ratio_loss(*scores, config.target_ratio);
    b.ratio = ratio.item();
    total = add(total, scale(ratio, config.ratio_weight));
  }
  b.total = total;
  return b;
}

}  // namespace msfuse
