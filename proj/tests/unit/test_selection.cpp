#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "../support.hpp"
#include "msfuse/selection.hpp"

using namespace msfuse;
using namespace msfuse::testing;

namespace {

ScoreMatrix constant_scores(std::size_t l, double p) {
  return ScoreMatrix::from_probabilities(Tensor::full({l, kNumScales}, p));
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("msfuse_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST(Score, EqualLogitsGiveHalf) {
  ScoreMatrix s = score_from_logits(Tensor::zeros({7, 8}));
  for (double v : s.probs.values()) EXPECT_EQ(v, 0.5);
  for (double v : s.margin.values()) EXPECT_EQ(v, 0.0);
}

TEST(Score, SaturatedKeepLogit) {
  std::vector<double> v(3 * 8, 0.0);
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t s = 0; s < kNumScales; ++s) v[j * 8 + 2 * s] = 1000.0;
  ScoreMatrix sm = score_from_logits(Tensor::from({3, 8}, v));
  for (double p : sm.probs.values()) EXPECT_NEAR(p, 1.0, 1e-15);
}

TEST(Score, PairSoftmaxMatchesScalarOracle) {
  Rng rng(1);
  Tensor logits = random_tensor({11, 8}, rng, -4, 4, false);
  ScoreMatrix sm = score_from_logits(logits);
  for (std::size_t j = 0; j < 11; ++j) {
    for (std::size_t s = 0; s < kNumScales; ++s) {
      const double a = logits[j * 8 + 2 * s], b = logits[j * 8 + 2 * s + 1];
      const double keep = std::exp(a) / (std::exp(a) + std::exp(b));
      EXPECT_NEAR(sm.probs[j * 4 + s], keep, 1e-12);
      EXPECT_NEAR(1.0 - sm.probs[j * 4 + s], std::exp(b) / (std::exp(a) + std::exp(b)), 1e-12);
      EXPECT_NEAR(sm.margin[j * 4 + s], a - b, 1e-12);
    }
  }
}

TEST(Score, PermutationEquivariant) {
  Rng rng(2);
  ScorerMLP mlp = ScorerMLP::make(6, rng);
  TokenSequence seq;
  seq.tokens = random_tensor({9, 6}, rng, -1, 1, false);
  std::vector<std::size_t> perm(9);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::reverse(perm.begin(), perm.end());
  std::swap(perm[0], perm[4]);
  TokenSequence shuffled;
  shuffled.tokens = gather_rows(seq.tokens, perm);
  ScoreMatrix a = score(seq, mlp), b = score(shuffled, mlp);
  EXPECT_EQ(a.probs.shape(), (Shape{9, 4}));
  for (std::size_t j = 0; j < 9; ++j)
    for (std::size_t s = 0; s < 4; ++s) EXPECT_EQ(b.probs[j * 4 + s], a.probs[perm[j] * 4 + s]);
}

TEST(Gumbel, SaturatedAlwaysKeeps) {
  Rng rng(3);
  ScoreMatrix ones = constant_scores(50, 1.0), zeros = constant_scores(50, 0.0);
  for (int trial = 0; trial < 20; ++trial) {
    DecisionSet d = gumbel_sample(ones, 1.0, rng), z = gumbel_sample(zeros, 1.0, rng);
    for (std::size_t s = 0; s < kNumScales; ++s) {
      for (double v : d.keep[s].values()) EXPECT_EQ(v, 1.0);
      for (double v : z.keep[s].values()) EXPECT_EQ(v, 0.0);
    }
  }
}

TEST(Gumbel, FrequencyMatchesProbability) {
  Rng rng(4);
  ScoreMatrix sm = constant_scores(10000, 0.7);
  DecisionSet d = gumbel_sample(sm, 1.0, rng);
  for (std::size_t s = 1; s <= kNumScales; ++s) {
    for (double v : d.keep[s - 1].values()) EXPECT_TRUE(v == 0.0 || v == 1.0);
    EXPECT_NEAR(d.keep_ratio(s, 10000), 0.7, 0.02);
  }
}

TEST(Gumbel, ThreeSigmaCoverage) {
  // 200 random probabilities, 2000 draws each.
  Rng prng(5);
  std::vector<double> p(200 * kNumScales);
  for (double& v : p) v = prng.uniform(0.02, 0.98);
  ScoreMatrix sm = ScoreMatrix::from_probabilities(Tensor::from({200, kNumScales}, p));
  std::vector<double> freq(p.size(), 0.0);
  Rng rng(6);
  const int n = 2000;
  for (int t = 0; t < n; ++t) {
    DecisionSet d = gumbel_sample(sm, 1.0, rng);
    for (std::size_t s = 0; s < kNumScales; ++s)
      for (std::size_t j = 0; j < 200; ++j) freq[j * kNumScales + s] += d.keep[s][j];
  }
  std::size_t inside = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (std::abs(freq[i] / n - p[i]) < 3 * std::sqrt(p[i] * (1 - p[i]) / n)) ++inside;
  }
  EXPECT_GE(static_cast<double>(inside) / p.size(), 0.99);
}

TEST(Gumbel, SeedReproducibleAndGradientAlive) {
  Rng rng(7);
  Tensor logits = random_tensor({12, 8}, rng, -1, 1, true);
  ScoreMatrix sm = score_from_logits(logits);
  Rng a(42), b(42);
  DecisionSet da = gumbel_sample(sm, 1.0, a), db = gumbel_sample(sm, 1.0, b);
  for (std::size_t s = 0; s < kNumScales; ++s) {
    EXPECT_EQ(max_abs_diff(da.keep[s], db.keep[s]), 0.0);
    EXPECT_EQ(max_abs_diff(da.soft[s], db.soft[s]), 0.0);
  }
  Tensor total = sum(da.keep[0]);
  for (std::size_t s = 1; s < kNumScales; ++s) total = add(total, sum(da.keep[s]));
  total.backward();
  double keep_grad = 0;
  const auto g = logits.grad();
  for (std::size_t j = 0; j < 12; ++j)
    for (std::size_t s = 0; s < kNumScales; ++s) keep_grad += std::abs(g[j * 8 + 2 * s]);
  EXPECT_GT(keep_grad, 0.0);
  EXPECT_THROW(gumbel_sample(sm, 0.0, a), ConfigError);
  EXPECT_THROW(gumbel_sample(sm, -1.0, a), ConfigError);
}

TEST(Gumbel, RelaxedUsesSoftSample) {
  Rng rng(8);
  ScoreMatrix sm = constant_scores(20, 0.4);
  DecisionSet d = gumbel_sample(sm, 0.5, rng, true);
  EXPECT_TRUE(d.relaxed);
  for (std::size_t s = 0; s < kNumScales; ++s) EXPECT_EQ(max_abs_diff(d.keep[s], d.soft[s]), 0.0);
}

TEST(TopK, FullRatioAscending) {
  Rng rng(9);
  ScoreMatrix sm = ScoreMatrix::from_probabilities(random_tensor({13, 4}, rng, 0, 1, false));
  DecisionSet d = topk_select(sm, 1.0);
  std::vector<std::size_t> all(13);
  std::iota(all.begin(), all.end(), std::size_t{0});
  for (std::size_t s = 0; s < kNumScales; ++s) EXPECT_EQ(d.selected[s], all);
}

TEST(TopK, TieGoesToLowerIndex) {
  std::vector<double> p(16, 0.0);
  const double col[] = {0.9, 0.1, 0.5, 0.5};
  for (std::size_t j = 0; j < 4; ++j) p[j * 4] = col[j];
  DecisionSet d = topk_select(ScoreMatrix::from_probabilities(Tensor::from({4, 4}, p)), 0.5);
  EXPECT_EQ(d.selected[0], (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(d.ranking[0], (std::vector<std::size_t>{0, 2}));
}

TEST(TopK, MatchesFullSortOracle) {
  Rng rng(10);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t l = 5 + rng.below(200);
    const double rho = rng.uniform(0.05, 1.0);
    std::vector<double> p(l * 4);
    // Coarse values so ties occur.
    for (double& v : p) v = std::round(rng.uniform(0, 1) * 20) / 20;
    ScoreMatrix sm = ScoreMatrix::from_probabilities(Tensor::from({l, 4}, p));
    DecisionSet d = topk_select(sm, rho);
    const std::size_t k = static_cast<std::size_t>(std::ceil(rho * l - 1e-9));
    for (std::size_t s = 0; s < kNumScales; ++s) {
      std::vector<std::pair<double, std::size_t>> keyed;
      for (std::size_t j = 0; j < l; ++j) keyed.push_back({-p[j * 4 + s], j});
      std::sort(keyed.begin(), keyed.end());
      std::vector<std::size_t> expected_rank, expected;
      for (std::size_t i = 0; i < k; ++i) expected_rank.push_back(keyed[i].second);
      expected = expected_rank;
      std::sort(expected.begin(), expected.end());
      EXPECT_EQ(d.ranking[s], expected_rank);
      EXPECT_EQ(d.selected[s], expected);
      for (std::size_t i = 1; i < k; ++i) EXPECT_GE(p[d.ranking[s][i - 1] * 4 + s], p[d.ranking[s][i] * 4 + s]);
    }
  }
}

TEST(TopK, RankInvariantUnderMonotoneTransform) {
  Rng rng(11);
  Tensor p = random_tensor({40, 4}, rng, 0.01, 0.99, false);
  std::vector<double> q(p.values().begin(), p.values().end());
  for (double& v : q) v = v * v * v;
  DecisionSet a = topk_select(ScoreMatrix::from_probabilities(p), 0.3);
  DecisionSet b = topk_select(ScoreMatrix::from_probabilities(Tensor::from({40, 4}, q)), 0.3);
  for (std::size_t s = 0; s < kNumScales; ++s) EXPECT_EQ(a.ranking[s], b.ranking[s]);
}

TEST(TopK, CountAndErrors) {
  EXPECT_EQ(selection_count(0.6, 340), 204u);
  EXPECT_EQ(selection_count(0.6, 193), 116u);
  EXPECT_EQ(selection_count(0.5, 4), 2u);
  EXPECT_EQ(selection_count(1e-6, 10), 1u);
  EXPECT_EQ(selection_count(0.7, 10), 7u);
  EXPECT_EQ(selection_count(0.3, 10), 3u);
  ScoreMatrix sm = constant_scores(10, 0.5);
  EXPECT_THROW(topk_select(sm, 0.0), ConfigError);
  EXPECT_THROW(topk_select(sm, 1.5), ConfigError);
  DecisionSet d = topk_select(sm, 0.6);
  EXPECT_DOUBLE_EQ(d.keep_ratio(1, 10), 0.6);
}

TEST(Export, CsvAndPgmContents) {
  TokenSequence seq;
  seq.heights = {4, 2, 1, 1};
  seq.widths = {4, 2, 1, 1};
  seq.lengths = {16, 4, 1, 1};
  seq.offsets = {0, 16, 20, 21};
  for (std::size_t s = 1; s <= 4; ++s)
    for (std::size_t r = 0; r < seq.heights[s - 1]; ++r)
      for (std::size_t c = 0; c < seq.widths[s - 1]; ++c) seq.provenance.push_back({s, r, c});
  const std::size_t l = seq.provenance.size();
  seq.tokens = Tensor::zeros({l, 2});
  Rng rng(12);
  ScoreMatrix sm = ScoreMatrix::from_probabilities(random_tensor({l, 4}, rng, 0, 1, false));
  DecisionSet d = topk_select(sm, 0.6);
  auto dir = scratch_dir("export");
  export_selection_maps(seq, sm, d, dir);
  for (std::size_t s = 1; s <= 4; ++s) {
    std::ifstream csv(dir / ("selection_q" + std::to_string(s) + ".csv"));
    ASSERT_TRUE(csv);
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(line, "token_index,scale,row,col,score,selected");
    std::size_t rows = 0, selected = 0;
    while (std::getline(csv, line)) {
      ++rows;
      selected += line.back() == '1';
    }
    EXPECT_EQ(rows, l);
    EXPECT_EQ(selected, selection_count(0.6, l));

    std::ifstream pgm(dir / ("selection_q" + std::to_string(s) + ".pgm"), std::ios::binary);
    ASSERT_TRUE(pgm);
    std::string magic;
    std::size_t w, h, maxval;
    pgm >> magic >> w >> h >> maxval;
    EXPECT_EQ(magic, "P5");
    EXPECT_EQ(w, 8u);
    EXPECT_EQ(h, 4u);
    EXPECT_EQ(maxval, 255u);
    pgm.get();
    std::vector<unsigned char> px(w * h);
    pgm.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
    ASSERT_TRUE(pgm);
    // Token 5 is scale 1, row 1, col 1.
    EXPECT_EQ(px[1 * w + 1], static_cast<unsigned char>(std::lround(sm.probs[5 * 4 + s - 1] * 255)));
  }
  std::filesystem::remove_all(dir);
}
