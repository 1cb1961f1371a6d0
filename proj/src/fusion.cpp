#include "msfuse/fusion.hpp"

#include <cmath>

namespace msfuse {

namespace {

Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  return permute(reshape(x, {n, heads, d / heads}), {1, 0, 2});
}

Tensor merge_heads(const Tensor& x) {
  const std::size_t h = x.dim(0), n = x.dim(1), dk = x.dim(2);
  return reshape(permute(x, {1, 0, 2}), {n, h * dk});
}

void check_heads(std::size_t dim, std::size_t heads) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("common_dim " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) + " heads");
  }
}

struct Tally {
  ScaleCost* cost;
  const Tensor& operator()(const Tensor& t) const {
    if (cost) cost->peak_activation_floats += t.numel();
    return t;
  }
};

// Attention from `queries` onto `source`; `mask` may be undefined. Returns
// the output-projected rows without residual.
Tensor attend(const Tensor& queries, const Tensor& source, const Tensor& mask, const MCAParams& params,
              const FusionOptions& options, FusionStats* stats, ScaleCost* cost) {
  Tally track{cost};
  const std::size_t h = params.heads;
  const std::size_t n = queries.dim(0), l = source.dim(0), d = queries.dim(1);
  // 1/√d_k folded into the queries so only one h×N×L buffer is live.
  Tensor q = track(scale(track(split_heads(track(params.query.forward(queries)), h)),
                         1.0 / std::sqrt(double(params.head_dim()))));
  Tensor k = track(split_heads(track(params.key.forward(source)), h));
  Tensor v = track(split_heads(track(params.value.forward(source)), h));
  Tensor scores = track(matmul(q, track(transpose(k))));
  Tensor weights;
  if (mask.defined()) {
    weights = masked_normalize(scores, AttentionMask{mask, n}, options, stats);
  } else {
    weights = softmax(scores, 2);
  }
  scores = Tensor();
  track(weights);
  Tensor mixed = track(merge_heads(track(matmul(weights, v))));
  if (cost) cost->attention_macs += 2 * n * l * d;
  return track(params.output.forward(mixed));
}

FusedOutput finish(const Tensor& fused, const Tensor& queries, const TokenSequence& seq, std::size_t scale,
                   const FusionOptions& options) {
  FusedOutput out;
  out.scale = scale;
  out.tokens = options.residual ? add(fused, queries) : fused;
  out.map = tokens_to_map(out.tokens, seq.heights[scale - 1], seq.widths[scale - 1]);
  return out;
}

void check_queries(const Tensor& queries, const TokenSequence& seq, std::size_t scale) {
  scale_stride(scale);
  if (queries.rank() != 2 || queries.dim(0) != seq.lengths[scale - 1] || queries.dim(1) != seq.dim()) {
    throw ShapeError("queries " + shape_str(queries.shape()) + " do not match scale " + std::to_string(scale) +
                     " of the sequence");
  }
}

// Keys/values source and mask for the decision mode.
std::pair<Tensor, Tensor> keys_for(const TokenSequence& seq, const DecisionSet& decisions, std::size_t scale) {
  if (decisions.mode == Mode::inference) {
    return {gather_rows(seq.tokens, decisions.selected[scale - 1]), Tensor()};
  }
  const Tensor& keep = decisions.keep[scale - 1];
  if (!keep.defined() || keep.numel() != seq.size()) throw ShapeError("training decisions do not cover the sequence");
  return {seq.tokens, keep};
}

FusedOutput fuse_through_projection(const Tensor& queries, const TokenSequence& seq, const DecisionSet& decisions,
                                    std::size_t scale, const MCAParams& params, const Tensor& projection,
                                    const Tensor& compact, const FusionOptions& options, FusionStats* stats,
                                    ScaleCost& cost) {
  auto [source, mask] = keys_for(seq, decisions, scale);
  Tally track{&cost};
  Tensor compact_out = attend(compact, source, mask, params, options, stats, &cost);
  Tensor restored = track(matmul(projection, compact_out));
  cost.projection_macs += projection.dim(0) * projection.dim(1) * compact_out.dim(1);
  return finish(restored, queries, seq, scale, options);
}

}  // namespace

MCAParams MCAParams::make(std::size_t common_dim, std::size_t heads, Rng& rng) {
  check_heads(common_dim, heads);
  MCAParams p;
  p.heads = heads;
  p.query = Linear::make(common_dim, common_dim, rng);
  p.key = Linear::make(common_dim, common_dim, rng);
  p.value = Linear::make(common_dim, common_dim, rng);
  p.output = Linear::make(common_dim, common_dim, rng);
  // Keep the fused update small relative to the residual at start.
  for (double& w : p.output.weight.mutable_values()) w *= 0.25;
  return p;
}

void MCAParams::collect(const std::string& prefix, ParamMap& params) const {
  query.collect(prefix + ".query", params);
  key.collect(prefix + ".key", params);
  value.collect(prefix + ".value", params);
  output.collect(prefix + ".output", params);
}

Tensor AttentionMask::dense() const {
  auto q = decisions.values();
  std::vector<double> v;
  v.reserve(rows * q.size());
  for (std::size_t r = 0; r < rows; ++r) v.insert(v.end(), q.begin(), q.end());
  return Tensor::from({rows, q.size()}, std::move(v));
}

ProjectionGenerator ProjectionGenerator::make(std::size_t common_dim, std::size_t tokens, std::size_t reduction, Rng& rng) {
  if (reduction == 0 || tokens % reduction != 0) {
    throw ConfigError("token count " + std::to_string(tokens) + " is not divisible by reduction ratio " +
                      std::to_string(reduction));
  }
  return {Linear::make(common_dim, tokens / reduction, rng), reduction};
}

void ProjectionGenerator::collect(const std::string& prefix, ParamMap& params) const {
  affine.collect(prefix + ".affine", params);
}

Tensor attention_scores(const Tensor& queries, const Tensor& keys, const MCAParams& params) {
  if (queries.rank() != 2 || keys.rank() != 2 || queries.dim(1) != keys.dim(1)) {
    throw ShapeError("attention_scores: queries " + shape_str(queries.shape()) + " vs keys " + shape_str(keys.shape()));
  }
  check_heads(queries.dim(1), params.heads);
  Tensor q = split_heads(params.query.forward(queries), params.heads);
  Tensor k = split_heads(params.key.forward(keys), params.heads);
  return scale(matmul(q, transpose(k)), 1.0 / std::sqrt(double(params.head_dim())));
}

Tensor masked_normalize(const Tensor& scores, const AttentionMask& mask, const FusionOptions& options,
                        FusionStats* stats) {
  std::size_t empty = 0;
  Tensor out = options.eq5_literal ? masked_exp_literal(scores, mask.decisions, &empty)
                                   : masked_softmax(scores, mask.decisions, &empty);
  if (stats) stats->empty_mask_rows += empty;
  return out;
}

FusedOutput mca_fuse(const Tensor& queries, const TokenSequence& seq, const DecisionSet& decisions, std::size_t scale,
                     const MCAParams& params, const FusionOptions& options, FusionStats* stats) {
  check_queries(queries, seq, scale);
  check_heads(seq.dim(), params.heads);
  ScaleCost cost{scale, false, 0, 0, 0};
  auto [source, mask] = keys_for(seq, decisions, scale);
  Tensor fused = attend(queries, source, mask, params, options, stats, &cost);
  if (stats) stats->costs.push_back(cost);
  return finish(fused, queries, seq, scale, options);
}

ProjectedTokens project_tokens(const Tensor& queries, const ProjectionGenerator& generator) {
  const std::size_t n = queries.dim(0);
  const std::size_t reduced = generator.affine.weight.dim(1);
  if (generator.reduction == 0 || n % generator.reduction != 0 || n / generator.reduction != reduced) {
    throw ConfigError("project_tokens: " + std::to_string(n) + " tokens incompatible with reduction ratio " +
                      std::to_string(generator.reduction) + " and generator width " + std::to_string(reduced));
  }
  ProjectedTokens out;
  out.projection.matrix = softmax(generator.affine.forward(queries), 0);
  out.compact = matmul(transpose(out.projection.matrix), queries);
  return out;
}

FusedOutput mca_fuse_projected(const Tensor& queries, const TokenSequence& seq, const DecisionSet& decisions,
                               std::size_t scale, const MCAParams& params, const ProjectionGenerator& generator,
                               const FusionOptions& options, FusionStats* stats) {
  check_queries(queries, seq, scale);
  check_heads(seq.dim(), params.heads);
  ScaleCost cost{scale, true, 0, 0, 0};
  ProjectedTokens p = project_tokens(queries, generator);
  const std::size_t n = queries.dim(0), reduced = p.compact.dim(0), d = queries.dim(1);
  cost.projection_macs += 2 * n * d * reduced;  // generator + compaction
  cost.peak_activation_floats += 3 * n * reduced + reduced * d;
  FusedOutput out = fuse_through_projection(queries, seq, decisions, scale, params, p.projection.matrix, p.compact,
                                            options, stats, cost);
  if (stats) stats->costs.push_back(cost);
  return out;
}

FusedOutput mca_fuse_projected(const Tensor& queries, const TokenSequence& seq, const DecisionSet& decisions,
                               std::size_t scale, const MCAParams& params, const ProjectionMatrix& projection,
                               const FusionOptions& options, FusionStats* stats) {
  check_queries(queries, seq, scale);
  check_heads(seq.dim(), params.heads);
  const Tensor& m = projection.matrix;
  if (m.rank() != 2 || m.dim(0) != queries.dim(0)) {
    throw ShapeError("projection " + shape_str(m.shape()) + " does not match queries " + shape_str(queries.shape()));
  }
  ScaleCost cost{scale, true, 0, 0, 0};
  Tensor compact = matmul(transpose(m), queries);
  cost.projection_macs += m.dim(0) * m.dim(1) * queries.dim(1);
  cost.peak_activation_floats += m.numel() + compact.numel();
  FusedOutput out = fuse_through_projection(queries, seq, decisions, scale, params, m, compact, options, stats, cost);
  if (stats) stats->costs.push_back(cost);
  return out;
}

std::array<FusedOutput, kNumScales> fuse_all_scales(const TokenSequence& seq, const DecisionSet& decisions,
                                                    const std::array<MCAParams, kNumScales>& params,
                                                    const std::array<std::optional<ProjectionGenerator>, kNumScales>& generators,
                                                    const FusionOptions& options, FusionStats* stats) {
  std::array<FusedOutput, kNumScales> out;
  for (std::size_t s = 1; s <= kNumScales; ++s) {
    Tensor queries = seq.scale_tokens(s);
    const auto& gen = generators[s - 1];
    out[s - 1] = gen ? mca_fuse_projected(queries, seq, decisions, s, params[s - 1], *gen, options, stats)
                     : mca_fuse(queries, seq, decisions, s, params[s - 1], options, stats);
  }
  return out;
}

}  // namespace msfuse
