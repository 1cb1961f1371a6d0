#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "msfuse/selection.hpp"

namespace msfuse {

/// Multi-head cross-attention parameters; every map is D → D and heads split
/// D into d_k = D / heads.
struct MCAParams {
  std::size_t heads = 1;
  Linear query, key, value, output;

  static MCAParams make(std::size_t common_dim, std::size_t heads, Rng& rng);
  std::size_t head_dim() const { return query.weight.dim(1) / heads; }
  void collect(const std::string& prefix, ParamMap& params) const;
};

/// Binary decisions Q_i repeated over the N_i query rows; the same mask is
/// used for every head.
struct AttentionMask {
  Tensor decisions;  // length L
  std::size_t rows = 0;

  /// Materialised N_i × L matrix.
  Tensor dense() const;
};

/// Per-token affine map D → N_i' producing the N_i × N_i' projection.
struct ProjectionGenerator {
  Linear affine;
  std::size_t reduction = 1;

  static ProjectionGenerator make(std::size_t common_dim, std::size_t tokens, std::size_t reduction, Rng& rng);
  void collect(const std::string& prefix, ParamMap& params) const;
};

struct ProjectionMatrix {
  Tensor matrix;  // N_i × N_i', columns sum to 1
};

struct ProjectedTokens {
  ProjectionMatrix projection;
  Tensor compact;  // N_i' × D
};

struct FusionOptions {
  bool eq5_literal = false;
  bool residual = true;
};

struct ScaleCost {
  std::size_t scale = 0;
  bool projected = false;
  std::size_t attention_macs = 0;   // QKᵀ and attention-weighted values
  std::size_t projection_macs = 0;  // generator, compaction and re-projection
  std::size_t peak_activation_floats = 0;
};

/// Counters filled by one forward pass.
struct FusionStats {
  std::vector<ScaleCost> costs;
  std::size_t empty_mask_rows = 0;
};

struct FusedOutput {
  std::size_t scale = 0;
  Tensor tokens;  // N_i × D
  Tensor map;     // D × h_i × w_i
};

/// Per-head scaled scores (q·kᵀ)/√d_k, shape heads × N × L.
Tensor attention_scores(const Tensor& queries, const Tensor& keys, const MCAParams& params);

/// Masked softmax over keys (or the literal exp·M/ΣM form when
/// options.eq5_literal). All-masked rows come out as zeros and are counted.
Tensor masked_normalize(const Tensor& scores, const AttentionMask& mask, const FusionOptions& options = {},
                        FusionStats* stats = nullptr);

/// Cross-attention from one query scale over the full sequence. Training
/// decisions mask the scores; inference decisions gather the selected keys.
FusedOutput mca_fuse(const Tensor& queries, const TokenSequence& seq, const DecisionSet& decisions,
                     std::size_t scale, const MCAParams& params, const FusionOptions& options = {},
                     FusionStats* stats = nullptr);

/// Q = column-softmax(f(queries)); compact = Qᵀ·queries.
ProjectedTokens project_tokens(const Tensor& queries, const ProjectionGenerator& generator);

/// Attention on the compact sequence, re-projected to N_i rows by Q.
FusedOutput mca_fuse_projected(const Tensor& queries, const TokenSequence& seq, const DecisionSet& decisions,
                               std::size_t scale, const MCAParams& params, const ProjectionGenerator& generator,
                               const FusionOptions& options = {}, FusionStats* stats = nullptr);
/// Same with a caller-supplied projection matrix.
FusedOutput mca_fuse_projected(const Tensor& queries, const TokenSequence& seq, const DecisionSet& decisions,
                               std::size_t scale, const MCAParams& params, const ProjectionMatrix& projection,
                               const FusionOptions& options = {}, FusionStats* stats = nullptr);

/// Fuses every scale against the whole sequence; generators are only used
/// for scales that have one.
std::array<FusedOutput, kNumScales> fuse_all_scales(const TokenSequence& seq, const DecisionSet& decisions,
                                                    const std::array<MCAParams, kNumScales>& params,
                                                    const std::array<std::optional<ProjectionGenerator>, kNumScales>& generators,
                                                    const FusionOptions& options = {}, FusionStats* stats = nullptr);

}  // namespace msfuse
