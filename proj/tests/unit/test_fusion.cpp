#include <gtest/gtest.h>

#include <numeric>

#include "../oracles.hpp"
#include "../support.hpp"
#include "msfuse/fusion.hpp"

using namespace msfuse;
using namespace msfuse::testing;

namespace {

void set_identity(Linear& lin) {
  auto w = lin.weight.mutable_values();
  const std::size_t n = lin.weight.dim(0);
  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t i = 0; i < n; ++i) w[i * n + i] = 1.0;
  auto b = lin.bias.mutable_values();
  std::fill(b.begin(), b.end(), 0.0);
}

MCAParams identity_params(std::size_t d, std::size_t heads) {
  Rng rng(0);
  MCAParams p = MCAParams::make(d, heads, rng);
  set_identity(p.query);
  set_identity(p.key);
  set_identity(p.value);
  set_identity(p.output);
  return p;
}

// Random weights and biases everywhere.
MCAParams random_params(std::size_t d, std::size_t heads, Rng& rng) {
  MCAParams p = MCAParams::make(d, heads, rng);
  for (Linear* lin : {&p.query, &p.key, &p.value, &p.output}) {
    for (double& v : lin->bias.mutable_values()) v = rng.uniform(-0.5, 0.5);
  }
  return p;
}

DecisionSet training_mask(std::size_t scale, std::vector<double> mask) {
  const std::size_t l = mask.size();
  DecisionSet d = keep_all(l);
  d.keep[scale - 1] = Tensor::from({l}, std::move(mask));
  return d;
}

std::vector<double> random_binary(std::size_t l, Rng& rng, double p_keep = 0.6) {
  std::vector<double> m(l);
  for (double& v : m) v = rng.uniform() < p_keep ? 1.0 : 0.0;
  return m;
}

}  // namespace

TEST(AttentionScores, OrthogonalAndOneHot) {
  MCAParams p = identity_params(4, 1);
  Tensor eye = Tensor::from({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  Tensor a = attention_scores(eye, eye, p);
  ASSERT_EQ(a.shape(), (Shape{1, 4, 4}));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(a[i * 4 + j], i == j ? 0.5 : 0.0);
}

TEST(AttentionScores, MatchesLoopOracle) {
  Rng rng(1);
  const std::size_t d = 8;
  for (std::size_t h : {1u, 2u, 4u}) {
    MCAParams p = random_params(d, h, rng);
    Tensor q = random_tensor({5, d}, rng, -1, 1, false), k = random_tensor({9, d}, rng, -1, 1, false);
    Tensor a = attention_scores(q, k, p);
    const std::size_t dk = d / h;
    for (std::size_t head = 0; head < h; ++head)
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 9; ++j) {
          auto qi = affine_row(p.query, rows_of(q)[i]), kj = affine_row(p.key, rows_of(k)[j]);
          double dot = 0;
          for (std::size_t c = 0; c < dk; ++c) dot += qi[head * dk + c] * kj[head * dk + c];
          EXPECT_NEAR(a[(head * 5 + i) * 9 + j], dot / std::sqrt(double(dk)), 1e-9);
        }
  }
  EXPECT_THROW(MCAParams::make(6, 4, rng), ConfigError);
}

TEST(MaskedNormalize, UniformAndSymmetricRows) {
  Tensor zeros = Tensor::zeros({1, 1, 4});
  Tensor u = masked_normalize(zeros, AttentionMask{Tensor::full({4}, 1.0), 1});
  for (double v : u.values()) EXPECT_DOUBLE_EQ(v, 0.25);
  Tensor a = Tensor::from({1, 1, 4}, {0.7, 0.7, 3.0, -2.0});
  Tensor m = masked_normalize(a, AttentionMask{Tensor::from({4}, {1, 1, 0, 0}), 1});
  EXPECT_DOUBLE_EQ(m[0], 0.5);
  EXPECT_DOUBLE_EQ(m[1], 0.5);
  EXPECT_EQ(m[2], 0.0);
  EXPECT_EQ(m[3], 0.0);
}

TEST(MaskedNormalize, RandomRowsSumToOneWithExactZeros) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t h = 1 + rng.below(4), n = 1 + rng.below(8), l = 1 + rng.below(30);
    Tensor a = random_tensor({h, n, l}, rng, -8, 8, false);
    std::vector<double> mask = random_binary(l, rng);
    mask[rng.below(l)] = 1.0;
    Tensor y = masked_normalize(a, AttentionMask{Tensor::from({l}, mask), n});
    for (std::size_t r = 0; r < h * n; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < l; ++j) {
        if (mask[j] == 0.0) EXPECT_EQ(y[r * l + j], 0.0);
        s += y[r * l + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(MaskedNormalize, EmptyRowsFlagged) {
  FusionStats stats;
  Tensor y = masked_normalize(Tensor::full({2, 3, 5}, 1.0), AttentionMask{Tensor::zeros({5}), 3}, {}, &stats);
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(stats.empty_mask_rows, 6u);
}

TEST(MaskedNormalize, LiteralVariant) {
  Tensor a = Tensor::from({1, 1, 3}, {0.0, 1.0, 2.0});
  FusionOptions literal{true, true};
  Tensor y = masked_normalize(a, AttentionMask{Tensor::from({3}, {1, 0, 1}), 1}, literal);
  EXPECT_NEAR(y[0], std::exp(0.0) / 2.0, 1e-15);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_NEAR(y[2], std::exp(2.0) / 2.0, 1e-14);
}

TEST(AttentionMask, DenseRepeatsDecisions) {
  AttentionMask m{Tensor::from({3}, {1, 0, 1}), 2};
  EXPECT_EQ(m.dense().shape(), (Shape{2, 3}));
  EXPECT_EQ(max_abs_diff(m.dense().values(), std::vector<double>{1, 0, 1, 1, 0, 1}), 0.0);
}

TEST(McaFuse, SingleKeyReturnsItsValue) {
  Rng rng(3);
  const std::size_t d = 4;
  TokenSequence seq = random_sequence({2, 1, 1, 1}, {2, 1, 1, 1}, d, rng);
  MCAParams p = identity_params(d, 2);
  const std::size_t l = seq.size(), star = 5;
  std::vector<double> mask(l, 0.0);
  mask[star] = 1.0;
  Tensor queries = seq.scale_tokens(1);
  FusedOutput out = mca_fuse(queries, seq, training_mask(1, mask), 1, p);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < d; ++c) EXPECT_NEAR(out.tokens[i * d + c], seq.tokens[star * d + c] + queries[i * d + c], 1e-14);
  EXPECT_EQ(out.map.shape(), (Shape{d, 2, 2}));
}

TEST(McaFuse, MatchesScalarOracle) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t h = std::size_t{1} << rng.below(3);
    const std::size_t d = h * (1 + rng.below(4));
    TokenSequence seq = random_sequence({4, 2, 1, 1}, {5, 3, 2, 1}, d, rng);
    MCAParams p = random_params(d, h, rng);
    const std::size_t scale = 1 + rng.below(4);
    std::vector<double> mask = random_binary(seq.size(), rng);
    Tensor queries = seq.scale_tokens(scale);
    FusedOutput out = mca_fuse(queries, seq, training_mask(scale, mask), scale, p);
    EXPECT_LT(max_abs_diff(out.tokens.values(), mca_oracle(queries, seq.tokens, mask, p)), 1e-8);
    FusionOptions no_residual{false, false};
    FusedOutput bare = mca_fuse(queries, seq, training_mask(scale, mask), scale, p, no_residual);
    EXPECT_LT(max_abs_diff(bare.tokens.values(), mca_oracle(queries, seq.tokens, mask, p, false)), 1e-8);
  }
}

TEST(McaFuse, FullRatioInferenceEqualsAllOnesTraining) {
  Rng rng(5);
  TokenSequence seq = random_sequence({4, 2, 1, 1}, {4, 2, 1, 1}, 8, rng);
  MCAParams p = random_params(8, 4, rng);
  ScoreMatrix sm = ScoreMatrix::from_probabilities(random_tensor({seq.size(), 4}, rng, 0, 1, false));
  for (std::size_t s = 1; s <= 4; ++s) {
    Tensor q = seq.scale_tokens(s);
    FusedOutput a = mca_fuse(q, seq, topk_select(sm, 1.0), s, p);
    FusedOutput b = mca_fuse(q, seq, keep_all(seq.size()), s, p);
    EXPECT_LT(max_abs_diff(a.tokens, b.tokens), 1e-10);
  }
}

TEST(McaFuse, KeyPermutationEquivariance) {
  Rng rng(6);
  TokenSequence seq = random_sequence({3, 2, 1, 1}, {3, 2, 1, 1}, 8, rng);
  MCAParams p = random_params(8, 2, rng);
  std::vector<double> mask = random_binary(seq.size(), rng);
  Tensor queries = seq.scale_tokens(1);
  FusedOutput a = mca_fuse(queries, seq, training_mask(1, mask), 1, p);
  std::vector<std::size_t> perm(seq.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  TokenSequence shuffled = seq;
  shuffled.tokens = gather_rows(seq.tokens, perm);
  std::vector<double> pmask(mask.size());
  for (std::size_t j = 0; j < perm.size(); ++j) pmask[j] = mask[perm[j]];
  FusedOutput b = mca_fuse(queries, shuffled, training_mask(1, pmask), 1, p);
  EXPECT_LT(max_abs_diff(a.tokens, b.tokens), 1e-12);
}

TEST(McaFuse, InferenceIgnoresUnselectedTokens) {
  Rng rng(7);
  TokenSequence seq = random_sequence({4, 2, 1, 1}, {4, 2, 1, 1}, 8, rng);
  MCAParams p = random_params(8, 4, rng);
  ScoreMatrix sm = ScoreMatrix::from_probabilities(random_tensor({seq.size(), 4}, rng, 0, 1, false));
  DecisionSet d = topk_select(sm, 0.5);
  // Queries come from scale 1, so only perturb unselected tokens elsewhere.
  Tensor queries = seq.scale_tokens(1);
  FusedOutput a = mca_fuse(queries, seq, d, 1, p);
  std::vector<double> v(seq.tokens.values().begin(), seq.tokens.values().end());
  std::vector<bool> chosen(seq.size(), false);
  for (auto t : d.selected[0]) chosen[t] = true;
  for (std::size_t t = 0; t < seq.size(); ++t) {
    if (!chosen[t])
      for (std::size_t c = 0; c < 8; ++c) v[t * 8 + c] += 3.0;
  }
  TokenSequence perturbed = seq;
  perturbed.tokens = Tensor::from(seq.tokens.shape(), v);
  FusedOutput b = mca_fuse(queries, perturbed, d, 1, p);
  EXPECT_EQ(max_abs_diff(a.tokens, b.tokens), 0.0);
}

TEST(McaFuse, ScoreShiftInvariance) {
  Rng rng(8);
  Tensor a = random_tensor({2, 3, 7}, rng, -3, 3, false);
  AttentionMask m{Tensor::from({7}, {1, 0, 1, 1, 0, 1, 1}), 3};
  Tensor y = masked_normalize(a, m), z = masked_normalize(add_scalar(a, 41.5), m);
  EXPECT_LT(max_abs_diff(y, z), 1e-9);
}

TEST(Projection, IdentityCompactAndColumnSums) {
  const std::size_t d = 4;
  Rng rng(9);
  ProjectionGenerator gen = ProjectionGenerator::make(d, 4, 1, rng);
  auto w = gen.affine.weight.mutable_values();
  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t i = 0; i < d; ++i) w[i * d + i] = 1000.0;
  Tensor eye = Tensor::from({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  ProjectedTokens pt = project_tokens(eye, gen);
  EXPECT_EQ(max_abs_diff(pt.compact, eye), 0.0);

  ProjectionGenerator g2 = ProjectionGenerator::make(6, 24, 4, rng);
  Tensor q = random_tensor({24, 6}, rng, -2, 2, false);
  ProjectedTokens p2 = project_tokens(q, g2);
  ASSERT_EQ(p2.projection.matrix.shape(), (Shape{24, 6}));
  ASSERT_EQ(p2.compact.shape(), (Shape{6, 6}));
  Tensor col = sum(p2.projection.matrix, 0);
  for (double v : col.values()) EXPECT_NEAR(v, 1.0, 1e-12);
  for (double v : p2.projection.matrix.values()) EXPECT_GE(v, 0.0);
  for (std::size_t c = 0; c < 6; ++c) {
    double lo = INFINITY, hi = -INFINITY;
    for (std::size_t i = 0; i < 24; ++i) {
      lo = std::min(lo, q[i * 6 + c]);
      hi = std::max(hi, q[i * 6 + c]);
    }
    for (std::size_t r = 0; r < 6; ++r) {
      EXPECT_GE(p2.compact[r * 6 + c], lo - 1e-12);
      EXPECT_LE(p2.compact[r * 6 + c], hi + 1e-12);
    }
  }
  EXPECT_THROW(ProjectionGenerator::make(6, 10, 4, rng), ConfigError);
  EXPECT_THROW(project_tokens(random_tensor({20, 6}, rng, -1, 1, false), g2), ConfigError);
}

TEST(Projection, IdentityMatrixReducesToBasePath) {
  Rng rng(10);
  TokenSequence seq = random_sequence({4, 2, 1, 1}, {4, 2, 1, 1}, 8, rng);
  MCAParams p = random_params(8, 2, rng);
  std::vector<double> mask = random_binary(seq.size(), rng);
  for (std::size_t s = 1; s <= 4; ++s) {
    const std::size_t n = seq.lengths[s - 1];
    std::vector<double> eye(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
    Tensor q = seq.scale_tokens(s);
    FusedOutput base = mca_fuse(q, seq, training_mask(s, mask), s, p);
    FusedOutput proj = mca_fuse_projected(q, seq, training_mask(s, mask), s, p, ProjectionMatrix{Tensor::from({n, n}, eye)});
    EXPECT_LT(max_abs_diff(base.tokens, proj.tokens), 1e-10);
  }
}

TEST(Projection, CountersAndShapeAt64) {
  Rng rng(11);
  const std::size_t d = 32;
  TokenSequence seq = random_sequence({16, 8, 4, 2}, {16, 8, 4, 2}, d, rng);
  ASSERT_EQ(seq.size(), 340u);
  MCAParams p = MCAParams::make(d, 8, rng);
  Tensor q = seq.scale_tokens(1);
  DecisionSet all = keep_all(seq.size());
  FusionStats base_stats, proj_stats;
  mca_fuse(q, seq, all, 1, p, {}, &base_stats);
  for (std::size_t r : {1u, 2u, 4u, 8u}) {
    ProjectionGenerator g = ProjectionGenerator::make(d, 256, r, rng);
    FusionStats stats;
    FusedOutput out = mca_fuse_projected(q, seq, all, 1, p, g, {}, &stats);
    EXPECT_EQ(out.tokens.shape(), (Shape{256, d}));
    EXPECT_EQ(out.map.shape(), (Shape{d, 16, 16}));
    ASSERT_EQ(stats.costs.size(), 1u);
    EXPECT_TRUE(stats.costs[0].projected);
    EXPECT_EQ(stats.costs[0].attention_macs, base_stats.costs[0].attention_macs / r);
    if (r == 4) proj_stats = stats;
  }
  const ScaleCost& b = base_stats.costs[0];
  const ScaleCost& c = proj_stats.costs[0];
  EXPECT_EQ(b.attention_macs, 2u * 256 * 340 * d);
  EXPECT_EQ(c.projection_macs, 2u * 256 * d * 64 + 256u * 64 * d);
  EXPECT_LT(c.attention_macs, b.attention_macs);
  EXPECT_LT(c.attention_macs + c.projection_macs, b.attention_macs);
  EXPECT_LT(c.peak_activation_floats, b.peak_activation_floats);
}

TEST(FuseAllScales, ZeroDecisionsLeaveResidual) {
  Rng rng(12);
  TokenSequence seq = random_sequence({4, 2, 1, 1}, {4, 2, 1, 1}, 8, rng);
  std::array<MCAParams, 4> params;
  for (auto& m : params) m = MCAParams::make(8, 2, rng);
  std::array<std::optional<ProjectionGenerator>, 4> gens;
  gens[0] = ProjectionGenerator::make(8, 16, 4, rng);
  DecisionSet none = keep_all(seq.size());
  for (auto& k : none.keep) k = Tensor::zeros({seq.size()});
  FusionStats stats;
  auto out = fuse_all_scales(seq, none, params, gens, {}, &stats);
  for (std::size_t s = 1; s <= 4; ++s) {
    EXPECT_EQ(max_abs_diff(out[s - 1].tokens, seq.scale_tokens(s)), 0.0);
    EXPECT_EQ(out[s - 1].map.shape(), (Shape{8, seq.heights[s - 1], seq.widths[s - 1]}));
  }
  EXPECT_EQ(stats.costs.size(), 4u);
  EXPECT_TRUE(stats.costs[0].projected);
  EXPECT_GT(stats.empty_mask_rows, 0u);
}

TEST(FuseAllScales, OwnScaleTokensAreCandidates) {
  Rng rng(13);
  TokenSequence seq = random_sequence({4, 2, 1, 1}, {4, 2, 1, 1}, 8, rng);
  std::array<MCAParams, 4> params;
  for (auto& m : params) m = random_params(8, 2, rng);
  DecisionSet d = keep_all(seq.size());
  for (std::size_t s = 1; s <= 4; ++s) {
    std::vector<double> own(seq.size(), 0.0);
    for (std::size_t t = seq.offsets[s - 1]; t < seq.offsets[s - 1] + seq.lengths[s - 1]; ++t) own[t] = 1.0;
    d.keep[s - 1] = Tensor::from({seq.size()}, own);
  }
  auto out = fuse_all_scales(seq, d, params, {});
  for (std::size_t s = 1; s <= 4; ++s) {
    Tensor q = seq.scale_tokens(s);
    EXPECT_LT(max_abs_diff(out[s - 1].tokens.values(), mca_oracle(q, q, {}, params[s - 1])), 1e-10);
  }
}

TEST(FuseAllScales, GradientReachesScorerThroughMask) {
  Rng rng(14);
  TokenSequence seq = random_sequence({4, 2, 1, 1}, {4, 2, 1, 1}, 8, rng);
  ScorerMLP scorer = ScorerMLP::make(8, rng);
  std::array<MCAParams, 4> params;
  for (auto& m : params) m = MCAParams::make(8, 2, rng);
  ScoreMatrix sm = score(seq, scorer);
  DecisionSet d = gumbel_sample(sm, 1.0, rng);
  auto out = fuse_all_scales(seq, d, params, {});
  Tensor loss = probe(out[0].tokens);
  for (std::size_t s = 1; s < 4; ++s) loss = add(loss, probe(out[s].tokens, 100 + s));
  loss.backward();
  double g = 0;
  for (double v : scorer.hidden.weight.grad()) g += std::abs(v);
  EXPECT_GT(g, 0.0);
}
