#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "msfuse/tensor.hpp"

namespace msfuse {

// Elementwise (identical shapes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double offset);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// x[m×n] + bias[n] on every row.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& order);
// Swaps the last two axes.
Tensor transpose(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);

// Rows along axis 0, in the given order (repeats allowed).
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);

/// 2-D [m×k]·[k×n] or batched [b×m×k]·[b×k×n].
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor softmax(const Tensor& x, std::size_t axis);

/// Softmax over the last axis restricted to entries whose mask weight is
/// non-zero. `mask` has length equal to the last axis and is shared by every
/// row. Rows with no masked-in entry come out as zeros; `empty_rows`, when
/// given, is incremented once per such row.
Tensor masked_softmax(const Tensor& scores, const Tensor& mask, std::size_t* empty_rows = nullptr);

/// exp(a)·m / Σm, the unnormalised form taken literally from the printed
/// attention equation. Kept for comparison only.
Tensor masked_exp_literal(const Tensor& scores, const Tensor& mask, std::size_t* empty_rows = nullptr);

/// Forward returns `hard`; backward passes the incoming gradient to `soft`
/// unchanged.
Tensor straight_through(std::vector<double> hard, const Tensor& soft);

/// Cross-correlation with zero padding. x: C_in×H×W, w: C_out×C_in×k×k,
/// bias (optional, may be undefined): C_out. Output spatial size is
/// floor((H + 2·pad − k)/stride) + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride,
              std::size_t pad);
std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride,
                             std::size_t pad);

/// Replicates every pixel factor×factor.
Tensor upsample_nearest(const Tensor& x, std::size_t factor);
/// Nearest upsample followed by a top-left crop to out_h × out_w.
Tensor upsample_nearest(const Tensor& x, std::size_t factor, std::size_t out_h, std::size_t out_w);

struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> labels;  // row-major
};

inline constexpr int kIgnoreIndex = 255;

/// Mean negative log-softmax over the class axis of logits K×H×W, skipping
/// pixels labelled ignore_index. Zero (with zero gradient) if every pixel is
/// ignored.
Tensor cross_entropy(const Tensor& logits, const LabelMap& labels, int ignore_index = kIgnoreIndex);

}  // namespace msfuse
