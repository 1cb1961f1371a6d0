#include "msfuse/selection.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace msfuse {

namespace {

Tensor row_of(const Tensor& m, std::size_t row) {
  const std::size_t idx[] = {row};
  return reshape(gather_rows(m, idx), {m.dim(1)});
}

void require_scores(const ScoreMatrix& s) {
  if (!s.probs.defined() || s.probs.rank() != 2 || s.probs.dim(1) != kNumScales) {
    throw ShapeError("score matrix must be L×4");
  }
}

}  // namespace

ScoreMatrix ScoreMatrix::from_probabilities(const Tensor& probs) {
  if (probs.rank() != 2 || probs.dim(1) != kNumScales) throw ShapeError("probabilities must be L×4, got " + shape_str(probs.shape()));
  std::vector<double> margin(probs.numel());
  auto p = probs.values();
  for (std::size_t i = 0; i < margin.size(); ++i) {
    if (!(p[i] >= 0.0 && p[i] <= 1.0)) throw ConfigError("probability outside [0,1]");
    margin[i] = std::log(p[i]) - std::log1p(-p[i]);
  }
  return {probs.detach(), Tensor::from(probs.shape(), std::move(margin))};
}

Tensor ScoreMatrix::column(std::size_t scale) const {
  scale_stride(scale);
  return row_of(transpose(probs), scale - 1);
}

double ScoreMatrix::column_mean(std::size_t scale) const {
  scale_stride(scale);
  auto p = probs.values();
  double s = 0.0;
  const std::size_t l = tokens();
  for (std::size_t j = 0; j < l; ++j) s += p[j * kNumScales + scale - 1];
  return s / static_cast<double>(l);
}

ScorerMLP ScorerMLP::make(std::size_t common_dim, Rng& rng) {
  if (common_dim < 2) throw ConfigError("common_dim must be at least 2");
  ScorerMLP m{Linear::make(common_dim, common_dim / 2, rng), Linear::make(common_dim / 2, 2 * kNumScales, rng)};
  // Start near P = 0.5 everywhere.
  for (double& w : m.out.weight.mutable_values()) w *= 0.1;
  return m;
}

void ScorerMLP::collect(const std::string& prefix, ParamMap& params) const {
  hidden.collect(prefix + ".hidden", params);
  out.collect(prefix + ".out", params);
}

ScoreMatrix score_from_logits(const Tensor& logits) {
  if (logits.rank() != 2 || logits.dim(1) != 2 * kNumScales) {
    throw ShapeError("scorer logits must be L×8, got " + shape_str(logits.shape()));
  }
  const std::size_t l = logits.dim(0);
  Tensor pairs = reshape(logits, {l * kNumScales, 2});
  Tensor pair_probs = transpose(softmax(pairs, 1));  // 2 × 4L
  Tensor by_class = transpose(pairs);
  ScoreMatrix s;
  s.probs = reshape(row_of(pair_probs, 0), {l, kNumScales});
  s.margin = reshape(sub(row_of(by_class, 0), row_of(by_class, 1)), {l, kNumScales});
  return s;
}

ScoreMatrix score(const TokenSequence& seq, const ScorerMLP& mlp) {
  return score_from_logits(mlp.out.forward(gelu(mlp.hidden.forward(seq.tokens))));
}

double DecisionSet::keep_ratio(std::size_t scale, std::size_t sequence_length) const {
  scale_stride(scale);
  const std::size_t i = scale - 1;
  if (mode == Mode::inference) return static_cast<double>(selected[i].size()) / static_cast<double>(sequence_length);
  auto v = keep[i].values();
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

DecisionSet keep_all(std::size_t sequence_length) {
  DecisionSet d;
  d.mode = Mode::training;
  for (std::size_t i = 0; i < kNumScales; ++i) {
    d.keep[i] = Tensor::full({sequence_length}, 1.0);
    d.soft[i] = d.keep[i];
  }
  return d;
}

DecisionSet gumbel_sample(const ScoreMatrix& scores, double temperature, Rng& rng, bool relaxed) {
  require_scores(scores);
  if (!(temperature > 0.0)) throw ConfigError("gumbel temperature must be positive");
  const std::size_t l = scores.tokens();
  // Difference of two independent Gumbel(0,1) draws (keep minus drop).
  std::vector<double> noise(l * kNumScales);
  for (double& n : noise) {
    const double g_keep = -std::log(-std::log(rng.uniform()));
    const double g_drop = -std::log(-std::log(rng.uniform()));
    n = g_keep - g_drop;
  }
  Tensor soft_all = sigmoid(scale(add(scores.margin, Tensor::from({l, kNumScales}, std::move(noise))), 1.0 / temperature));
  Tensor by_scale = transpose(soft_all);
  DecisionSet d;
  d.mode = Mode::training;
  d.relaxed = relaxed;
  for (std::size_t i = 0; i < kNumScales; ++i) {
    d.soft[i] = row_of(by_scale, i);
    if (relaxed) {
      d.keep[i] = d.soft[i];
      continue;
    }
    auto s = d.soft[i].values();
    std::vector<double> hard(s.size());
    for (std::size_t j = 0; j < s.size(); ++j) hard[j] = s[j] > 0.5 ? 1.0 : 0.0;
    d.keep[i] = straight_through(std::move(hard), d.soft[i]);
  }
  return d;
}

std::size_t selection_count(double rho, std::size_t sequence_length) {
  if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("target ratio must lie in (0, 1], got " + std::to_string(rho));
  const double x = rho * static_cast<double>(sequence_length);
  const double nearest = std::round(x);
  const double k = std::abs(x - nearest) <= 1e-9 * std::max(1.0, x) ? nearest : std::ceil(x);
  return std::clamp<std::size_t>(static_cast<std::size_t>(k), 1, sequence_length);
}

DecisionSet topk_select(const ScoreMatrix& scores, double rho) {
  require_scores(scores);
  const std::size_t l = scores.tokens();
  const std::size_t k = selection_count(rho, l);
  auto p = scores.probs.values();
  DecisionSet d;
  d.mode = Mode::inference;
  for (std::size_t i = 0; i < kNumScales; ++i) {
    std::vector<std::size_t> order(l);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return p[a * kNumScales + i] > p[b * kNumScales + i]; });
    order.resize(k);
    d.ranking[i] = order;
    std::sort(order.begin(), order.end());
    d.selected[i] = std::move(order);
  }
  return d;
}

void export_selection_maps(const TokenSequence& seq, const ScoreMatrix& scores, const DecisionSet& decisions,
                           const std::filesystem::path& out_dir) {
  require_scores(scores);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  const std::size_t l = seq.size();
  if (scores.tokens() != l) throw ShapeError("export_selection_maps: score rows differ from sequence length");
  auto p = scores.probs.values();
  std::size_t mosaic_w = 0;
  std::array<std::size_t, kNumScales> x_offset{};
  for (std::size_t s = 0; s < kNumScales; ++s) {
    x_offset[s] = mosaic_w;
    mosaic_w += seq.widths[s];
  }
  const std::size_t mosaic_h = *std::max_element(seq.heights.begin(), seq.heights.end());
  for (std::size_t q = 1; q <= kNumScales; ++q) {
    std::vector<char> flag(l, 0);
    if (decisions.mode == Mode::inference) {
      for (auto t : decisions.selected[q - 1]) flag[t] = 1;
    } else {
      auto k = decisions.keep[q - 1].values();
      for (std::size_t t = 0; t < l; ++t) flag[t] = k[t] > 0.5 ? 1 : 0;
    }
    const auto stem = out_dir / ("selection_q" + std::to_string(q));
    std::ofstream csv(stem.string() + ".csv");
    if (!csv) throw IoError("cannot write " + stem.string() + ".csv");
    csv << "token_index,scale,row,col,score,selected\n";
    csv.precision(17);
    std::vector<unsigned char> pixels(mosaic_w * mosaic_h, 0);
    for (std::size_t t = 0; t < l; ++t) {
      const auto& o = seq.provenance[t];
      const double value = p[t * kNumScales + (q - 1)];
      csv << t << ',' << o.scale << ',' << o.row << ',' << o.col << ',' << value << ',' << int(flag[t]) << '\n';
      const auto level = static_cast<unsigned char>(std::lround(std::clamp(value, 0.0, 1.0) * 255.0));
      pixels[o.row * mosaic_w + x_offset[o.scale - 1] + o.col] = level;
    }
    std::ofstream pgm(stem.string() + ".pgm", std::ios::binary);
    if (!pgm) throw IoError("cannot write " + stem.string() + ".pgm");
    pgm << "P5\n" << mosaic_w << ' ' << mosaic_h << "\n255\n";
    pgm.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  }
}

}  // namespace msfuse
