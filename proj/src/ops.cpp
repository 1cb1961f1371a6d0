#include "msfuse/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "kernels.hpp"

namespace msfuse {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Accumulates into an input's gradient when it participates in autodiff.
template <typename F>
void accumulate(const TensorPtr& in, F&& body) {
  if (!in || !in->requires_grad) return;
  body(in->grad_buffer());
}

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& a, const char* name, Fwd fwd, Bwd dfdx) {
  auto in = a.values();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  TensorPtr ap = a.ptr();
  return make_result(a.shape(), std::move(out), {a}, name, [ap, dfdx](TensorImpl& o) {
    accumulate(ap, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * dfdx(ap->values[i], o.values[i]);
    });
  });
}

// Splits a shape around `axis` into (outer, axis, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw ShapeError("axis " + std::to_string(axis) + " invalid for " + shape_str(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto x = a.values();
  auto y = b.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  TensorPtr ap = a.ptr(), bp = b.ptr();
  return make_result(a.shape(), std::move(out), {a, b}, "add", [ap, bp](TensorImpl& o) {
    for (const auto& p : {ap, bp}) {
      accumulate(p, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
      });
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto x = a.values();
  auto y = b.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  TensorPtr ap = a.ptr(), bp = b.ptr();
  return make_result(a.shape(), std::move(out), {a, b}, "sub", [ap, bp](TensorImpl& o) {
    accumulate(ap, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    });
    accumulate(bp, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
    });
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto x = a.values();
  auto y = b.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  TensorPtr ap = a.ptr(), bp = b.ptr();
  return make_result(a.shape(), std::move(out), {a, b}, "mul", [ap, bp](TensorImpl& o) {
    accumulate(ap, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bp->values[i];
    });
    accumulate(bp, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * ap->values[i];
    });
  });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      a, "scale", [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double offset) {
  return unary(
      a, "add_scalar", [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      a, "log", [](double v) { return std::log(v); }, [](double x, double) { return 1.0 / x; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return unary(
      a, "gelu", [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [=](double x, double) {
        double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
        return cdf + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, "sigmoid",
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw ShapeError("add_row_bias: " + shape_str(x.shape()) + " with bias " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  auto xv = x.values();
  auto bv = bias.values();
  std::vector<double> out(xv.begin(), xv.end());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bv[c];
  TensorPtr xp = x.ptr(), bp = bias.ptr();
  return make_result(x.shape(), std::move(out), {x, bias}, "add_row_bias", [xp, bp, rows, cols](TensorImpl& o) {
    accumulate(xp, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    });
    accumulate(bp, [&](std::vector<double>& g) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) g[c] += o.grad[r * cols + c];
    });
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  auto v = a.values();
  TensorPtr ap = a.ptr();
  return make_result(std::move(shape), std::vector<double>(v.begin(), v.end()), {a}, "reshape",
                     [ap](TensorImpl& o) {
                       accumulate(ap, [&](std::vector<double>& g) {
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                       });
                     });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& order) {
  const Shape& in_shape = a.shape();
  const std::size_t r = in_shape.size();
  if (order.size() != r) throw ShapeError("permute: order rank differs from " + shape_str(in_shape));
  std::vector<bool> seen(r, false);
  for (auto d : order) {
    if (d >= r || seen[d]) throw ShapeError("permute: invalid axis order for " + shape_str(in_shape));
    seen[d] = true;
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(r);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[order[i]];
    src_stride[i] = in_strides[order[i]];
  }
  // map[flat_out] = flat_in
  const std::size_t n = a.numel();
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t f = 0; f < n; ++f) {
    map[f] = src;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      src += src_stride[d];
      if (idx[d] < out_shape[d]) break;
      src -= src_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  auto v = a.values();
  std::vector<double> out(n);
  for (std::size_t f = 0; f < n; ++f) out[f] = v[map[f]];
  TensorPtr ap = a.ptr();
  return make_result(std::move(out_shape), std::move(out), {a}, "permute",
                     [ap, map = std::move(map)](TensorImpl& o) {
                       accumulate(ap, [&](std::vector<double>& g) {
                         for (std::size_t f = 0; f < map.size(); ++f) g[map[f]] += o.grad[f];
                       });
                     });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose: needs rank >= 2, got " + shape_str(a.shape()));
  std::vector<std::size_t> order(a.rank());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::swap(order[order.size() - 1], order[order.size() - 2]);
  return permute(a, order);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw ShapeError("concat: incompatible " + shape_str(first) + " and " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  auto split = split_axis(first, axis);
  const std::size_t outer = split.outer, inner = split.inner;
  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t row = p.dim(axis) * inner;
    auto v = p.values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.begin() + o * row, row, out.begin() + o * out_row + off);
    off += row;
  }
  std::vector<TensorPtr> ptrs;
  for (const auto& p : parts) ptrs.push_back(p.ptr());
  return make_result(std::move(out_shape), std::move(out), parts, "concat",
                     [ptrs, offsets, outer, inner, out_row, axis](TensorImpl& o) {
                       for (std::size_t k = 0; k < ptrs.size(); ++k) {
                         accumulate(ptrs[k], [&](std::vector<double>& g) {
                           const std::size_t row = ptrs[k]->shape[axis] * inner;
                           for (std::size_t r = 0; r < outer; ++r)
                             for (std::size_t i = 0; i < row; ++i) g[r * row + i] += o.grad[r * out_row + offsets[k] + i];
                         });
                       }
                     });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  TensorPtr ap = a.ptr();
  return make_result({}, {s}, {a}, "sum", [ap](TensorImpl& o) {
    accumulate(ap, [&](std::vector<double>& g) {
      for (double& x : g) x += o.grad[0];
    });
  });
}

namespace {

// Neumaier-compensated running sum.
struct CompensatedSum {
  double s = 0.0, c = 0.0;
  void add(double x) {
    const double t = s + x;
    c += std::abs(s) >= std::abs(x) ? (s - t) + x : (x - t) + s;
    s = t;
  }
  double value() const { return s + c; }
};

}  // namespace

Tensor mean(const Tensor& a) {
  const std::size_t n = a.numel();
  if (n == 0) throw ShapeError("mean of empty tensor");
  CompensatedSum acc;
  for (double v : a.values()) acc.add(v);
  TensorPtr ap = a.ptr();
  const double dn = static_cast<double>(n);
  return make_result({}, {acc.value() / dn}, {a}, "mean", [ap, dn](TensorImpl& o) {
    accumulate(ap, [&](std::vector<double>& g) {
      for (double& x : g) x += o.grad[0] / dn;
    });
  });
}

Tensor sum(const Tensor& a, std::size_t axis) {
  auto sp = split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  auto v = a.values();
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.extent; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += v[(o * sp.extent + k) * sp.inner + i];
  TensorPtr ap = a.ptr();
  return make_result(std::move(out_shape), std::move(out), {a}, "sum_axis", [ap, sp](TensorImpl& o) {
    accumulate(ap, [&](std::vector<double>& g) {
      for (std::size_t r = 0; r < sp.outer; ++r)
        for (std::size_t k = 0; k < sp.extent; ++k)
          for (std::size_t i = 0; i < sp.inner; ++i) g[(r * sp.extent + k) * sp.inner + i] += o.grad[r * sp.inner + i];
    });
  });
}

Tensor mean(const Tensor& a, std::size_t axis) {
  auto sp = split_axis(a.shape(), axis);
  if (sp.extent == 0) throw ShapeError("mean over empty axis");
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  auto v = a.values();
  const double dn = static_cast<double>(sp.extent);
  std::vector<double> out(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      CompensatedSum acc;
      for (std::size_t k = 0; k < sp.extent; ++k) acc.add(v[(o * sp.extent + k) * sp.inner + i]);
      out[o * sp.inner + i] = acc.value() / dn;
    }
  TensorPtr ap = a.ptr();
  return make_result(std::move(out_shape), std::move(out), {a}, "mean_axis", [ap, sp, dn](TensorImpl& o) {
    accumulate(ap, [&](std::vector<double>& g) {
      for (std::size_t r = 0; r < sp.outer; ++r)
        for (std::size_t k = 0; k < sp.extent; ++k)
          for (std::size_t i = 0; i < sp.inner; ++i) g[(r * sp.extent + k) * sp.inner + i] += o.grad[r * sp.inner + i] / dn;
    });
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> indices) {
  if (a.rank() == 0) throw ShapeError("gather_rows on a scalar");
  const std::size_t rows = a.dim(0);
  const std::size_t width = rows ? a.numel() / rows : 0;
  Shape out_shape = a.shape();
  out_shape[0] = indices.size();
  auto v = a.values();
  std::vector<double> out(indices.size() * width);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= rows) {
      throw ShapeError("gather_rows: index " + std::to_string(indices[r]) + " out of range for " + shape_str(a.shape()));
    }
    std::copy_n(v.begin() + indices[r] * width, width, out.begin() + r * width);
  }
  TensorPtr ap = a.ptr();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result(std::move(out_shape), std::move(out), {a}, "gather_rows",
                     [ap, idx = std::move(idx), width](TensorImpl& o) {
                       accumulate(ap, [&](std::vector<double>& g) {
                         for (std::size_t r = 0; r < idx.size(); ++r)
                           for (std::size_t c = 0; c < width; ++c) g[idx[r] * width + c] += o.grad[r * width + c];
                       });
                     });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.dim(0)) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                     shape_str(a.shape()));
  }
  std::vector<std::size_t> idx(end - begin);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
  return gather_rows(a, idx);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool batched = a.rank() == 3;
  const bool ok = (a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0)) ||
                  (a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1));
  if (!ok) throw ShapeError("matmul: dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t batch = batched ? a.dim(0) : 1;
  const std::size_t m = a.dim(batched ? 1 : 0), k = a.dim(batched ? 2 : 1), n = b.dim(batched ? 2 : 1);
  Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
  std::vector<double> out(batch * m * n, 0.0);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < batch; ++i)
    kernels::gemm_nn(av.data() + i * m * k, bv.data() + i * k * n, out.data() + i * m * n, m, k, n);
  TensorPtr ap = a.ptr(), bp = b.ptr();
  return make_result(std::move(out_shape), std::move(out), {a, b}, "matmul", [ap, bp, batch, m, k, n](TensorImpl& o) {
    accumulate(ap, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < batch; ++i)
        kernels::gemm_nt(o.grad.data() + i * m * n, bp->values.data() + i * k * n, g.data() + i * m * k, m, n, k);
    });
    accumulate(bp, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < batch; ++i)
        kernels::gemm_tn(ap->values.data() + i * m * k, o.grad.data() + i * m * n, g.data() + i * k * n, m, k, n);
    });
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  auto sp = split_axis(x.shape(), axis);
  auto v = x.values();
  std::vector<double> out(v.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.extent; ++k) mx = std::max(mx, v[base + k * sp.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < sp.extent; ++k) {
        double e = std::exp(v[base + k * sp.inner] - mx);
        out[base + k * sp.inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < sp.extent; ++k) out[base + k * sp.inner] /= z;
    }
  }
  TensorPtr xp = x.ptr();
  return make_result(x.shape(), std::move(out), {x}, "softmax", [xp, sp](TensorImpl& o) {
    accumulate(xp, [&](std::vector<double>& g) {
      for (std::size_t r = 0; r < sp.outer; ++r) {
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const std::size_t base = r * sp.extent * sp.inner + i;
          double dot = 0.0;
          for (std::size_t k = 0; k < sp.extent; ++k) dot += o.grad[base + k * sp.inner] * o.values[base + k * sp.inner];
          for (std::size_t k = 0; k < sp.extent; ++k) {
            const std::size_t j = base + k * sp.inner;
            g[j] += o.values[j] * (o.grad[j] - dot);
          }
        }
      }
    });
  });
}

Tensor masked_softmax(const Tensor& scores, const Tensor& mask, std::size_t* empty_rows) {
  if (scores.rank() == 0) throw ShapeError("masked_softmax on a scalar");
  const std::size_t width = scores.shape().back();
  if (mask.numel() != width) {
    throw ShapeError("masked_softmax: mask " + shape_str(mask.shape()) + " does not match scores " +
                     shape_str(scores.shape()));
  }
  const std::size_t rows = width ? scores.numel() / width : 0;
  auto s = scores.values();
  auto w = mask.values();
  std::vector<double> out(s.size(), 0.0);
  // Per-row max over masked-in entries and normaliser, reused by backward.
  std::vector<double> row_max(rows, 0.0), row_z(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = s.data() + r * width;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < width; ++j)
      if (w[j] != 0.0) mx = std::max(mx, x[j]);
    double z = 0.0;
    double* y = out.data() + r * width;
    if (std::isfinite(mx)) {
      for (std::size_t j = 0; j < width; ++j) {
        if (w[j] == 0.0) continue;
        y[j] = w[j] * std::exp(x[j] - mx);
        z += y[j];
      }
    }
    if (z > 0.0) {
      for (std::size_t j = 0; j < width; ++j) y[j] /= z;
    } else {
      std::fill(y, y + width, 0.0);
      if (empty_rows) ++*empty_rows;
    }
    row_max[r] = mx;
    row_z[r] = z;
  }
  TensorPtr sp = scores.ptr(), mp = mask.ptr();
  return make_result(scores.shape(), std::move(out), {scores, mask}, "masked_softmax",
                     [sp, mp, rows, width, row_max = std::move(row_max), row_z = std::move(row_z)](TensorImpl& o) {
                       std::vector<double> dots(rows, 0.0);
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (row_z[r] <= 0.0) continue;
                         double d = 0.0;
                         for (std::size_t j = 0; j < width; ++j) d += o.grad[r * width + j] * o.values[r * width + j];
                         dots[r] = d;
                       }
                       accumulate(sp, [&](std::vector<double>& g) {
                         for (std::size_t r = 0; r < rows; ++r) {
                           if (row_z[r] <= 0.0) continue;
                           for (std::size_t j = 0; j < width; ++j) {
                             const std::size_t i = r * width + j;
                             g[i] += o.values[i] * (o.grad[i] - dots[r]);
                           }
                         }
                       });
                       accumulate(mp, [&](std::vector<double>& g) {
                         for (std::size_t r = 0; r < rows; ++r) {
                           if (row_z[r] <= 0.0) continue;
                           for (std::size_t j = 0; j < width; ++j) {
                             const std::size_t i = r * width + j;
                             const double a = std::exp(sp->values[i] - row_max[r]) / row_z[r];
                             g[j] += a * (o.grad[i] - dots[r]);
                           }
                         }
                       });
                     });
}

Tensor masked_exp_literal(const Tensor& scores, const Tensor& mask, std::size_t* empty_rows) {
  if (scores.rank() == 0) throw ShapeError("masked_exp_literal on a scalar");
  const std::size_t width = scores.shape().back();
  if (mask.numel() != width) {
    throw ShapeError("masked_exp_literal: mask " + shape_str(mask.shape()) + " does not match scores " +
                     shape_str(scores.shape()));
  }
  const std::size_t rows = width ? scores.numel() / width : 0;
  auto s = scores.values();
  auto w = mask.values();
  double count = 0.0;
  for (double m : w) count += m;
  std::vector<double> out(s.size(), 0.0);
  if (count != 0.0) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double m = w[i % width];
      if (m != 0.0) out[i] = std::exp(s[i]) * m / count;
    }
  } else if (empty_rows) {
    *empty_rows += rows;
  }
  TensorPtr sp = scores.ptr(), mp = mask.ptr();
  return make_result(scores.shape(), std::move(out), {scores, mask}, "masked_exp_literal",
                     [sp, mp, rows, width, count](TensorImpl& o) {
                       if (count == 0.0) return;
                       accumulate(sp, [&](std::vector<double>& g) {
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * o.values[i];
                       });
                       accumulate(mp, [&](std::vector<double>& g) {
                         double total = 0.0;
                         for (std::size_t i = 0; i < o.values.size(); ++i) total += o.grad[i] * o.values[i];
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < width; ++j) {
                             const std::size_t i = r * width + j;
                             g[j] += o.grad[i] * std::exp(sp->values[i]) / count;
                           }
                         for (std::size_t j = 0; j < width; ++j) g[j] -= total / count;
                       });
                     });
}

Tensor straight_through(std::vector<double> hard, const Tensor& soft) {
  if (hard.size() != soft.numel()) throw ShapeError("straight_through: value count differs from " + shape_str(soft.shape()));
  TensorPtr sp = soft.ptr();
  return make_result(soft.shape(), std::move(hard), {soft}, "straight_through", [sp](TensorImpl& o) {
    accumulate(sp, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    });
  });
}

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ConfigError("conv2d: stride must be >= 1");
  if (in + 2 * pad < kernel) {
    throw ConfigError("conv2d: input extent " + std::to_string(in) + " with pad " + std::to_string(pad) +
                      " is smaller than kernel " + std::to_string(kernel));
  }
  return (in + 2 * pad - kernel) / stride + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride, std::size_t pad) {
  if (x.rank() != 3 || w.rank() != 4 || w.dim(1) != x.dim(0) || w.dim(2) != w.dim(3)) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  }
  const std::size_t k = w.dim(2);
  if (k != 1 && k != 3) throw ConfigError("conv2d: kernel size must be 1 or 3, got " + std::to_string(k));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != w.dim(0))) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " for weight " + shape_str(w.shape()));
  }
  kernels::ConvGeometry geo{x.dim(0), x.dim(1), x.dim(2), k, stride, pad,
                            conv_output_size(x.dim(1), k, stride, pad), conv_output_size(x.dim(2), k, stride, pad)};
  const std::size_t c_out = w.dim(0);
  const std::size_t q = geo.channels * k * k;
  const std::size_t p = geo.out_h * geo.out_w;
  const bool direct = k == 1 && stride == 1 && pad == 0;
  std::vector<double> cols;
  if (!direct) cols = kernels::im2col(x.values().data(), geo);
  const double* col_ptr = direct ? x.values().data() : cols.data();
  std::vector<double> out(c_out * p, 0.0);
  if (bias.defined()) {
    auto bv = bias.values();
    for (std::size_t c = 0; c < c_out; ++c) std::fill_n(out.begin() + c * p, p, bv[c]);
  }
  kernels::gemm_nn(w.values().data(), col_ptr, out.data(), c_out, q, p);
  TensorPtr xp = x.ptr(), wp = w.ptr(), bp = bias.defined() ? bias.ptr() : nullptr;
  return make_result(
      {c_out, geo.out_h, geo.out_w}, std::move(out), {x, w, bias}, "conv2d",
      [xp, wp, bp, geo, c_out, q, p, direct, cols = std::move(cols)](TensorImpl& o) {
        const double* col_ptr = direct ? xp->values.data() : cols.data();
        accumulate(wp, [&](std::vector<double>& g) { kernels::gemm_nt(o.grad.data(), col_ptr, g.data(), c_out, p, q); });
        accumulate(bp, [&](std::vector<double>& g) {
          for (std::size_t c = 0; c < c_out; ++c)
            for (std::size_t i = 0; i < p; ++i) g[c] += o.grad[c * p + i];
        });
        accumulate(xp, [&](std::vector<double>& g) {
          if (direct) {
            kernels::gemm_tn(wp->values.data(), o.grad.data(), g.data(), c_out, q, p);
          } else {
            std::vector<double> dcols(q * p, 0.0);
            kernels::gemm_tn(wp->values.data(), o.grad.data(), dcols.data(), c_out, q, p);
            kernels::col2im_add(dcols.data(), geo, g.data());
          }
        });
      });
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  if (factor < 1) throw ConfigError("upsample_nearest: factor must be >= 1");
  if (x.rank() != 3) throw ShapeError("upsample_nearest: expected C×H×W, got " + shape_str(x.shape()));
  return upsample_nearest(x, factor, x.dim(1) * factor, x.dim(2) * factor);
}

Tensor upsample_nearest(const Tensor& x, std::size_t factor, std::size_t out_h, std::size_t out_w) {
  if (factor < 1) throw ConfigError("upsample_nearest: factor must be >= 1");
  if (x.rank() != 3) throw ShapeError("upsample_nearest: expected C×H×W, got " + shape_str(x.shape()));
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (out_h > h * factor || out_w > w * factor) {
    throw ShapeError("upsample_nearest: crop " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                     " exceeds upsampled " + shape_str(x.shape()));
  }
  auto v = x.values();
  std::vector<double> out(c * out_h * out_w);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < out_h; ++y) {
      const double* src = v.data() + (ch * h + y / factor) * w;
      double* dst = out.data() + (ch * out_h + y) * out_w;
      for (std::size_t xx = 0; xx < out_w; ++xx) dst[xx] = src[xx / factor];
    }
  TensorPtr xp = x.ptr();
  return make_result({c, out_h, out_w}, std::move(out), {x}, "upsample_nearest",
                     [xp, c, h, w, out_h, out_w, factor](TensorImpl& o) {
                       accumulate(xp, [&](std::vector<double>& g) {
                         for (std::size_t ch = 0; ch < c; ++ch)
                           for (std::size_t y = 0; y < out_h; ++y) {
                             double* dst = g.data() + (ch * h + y / factor) * w;
                             const double* src = o.grad.data() + (ch * out_h + y) * out_w;
                             for (std::size_t xx = 0; xx < out_w; ++xx) dst[xx / factor] += src[xx];
                           }
                       });
                     });
}

Tensor cross_entropy(const Tensor& logits, const LabelMap& labels, int ignore_index) {
  if (logits.rank() != 3 || logits.dim(1) != labels.height || logits.dim(2) != labels.width ||
      labels.labels.size() != labels.height * labels.width) {
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs labels " +
                     std::to_string(labels.height) + "x" + std::to_string(labels.width));
  }
  const std::size_t k = logits.dim(0);
  const std::size_t pixels = labels.height * labels.width;
  auto v = logits.values();
  // Softmax probabilities per pixel, kept for backward.
  std::vector<double> probs(k * pixels, 0.0);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < pixels; ++p) {
    const int label = labels.labels[p];
    if (label == ignore_index) continue;
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw ShapeError("cross_entropy: label " + std::to_string(label) + " outside [0," + std::to_string(k) + ")");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, v[c * pixels + p]);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      double e = std::exp(v[c * pixels + p] - mx);
      probs[c * pixels + p] = e;
      z += e;
    }
    for (std::size_t c = 0; c < k; ++c) probs[c * pixels + p] /= z;
    total += (mx + std::log(z)) - v[static_cast<std::size_t>(label) * pixels + p];
    ++count;
  }
  const double loss = count ? total / static_cast<double>(count) : 0.0;
  TensorPtr lp = logits.ptr();
  std::vector<int> lab = labels.labels;
  return make_result({}, {loss}, {logits}, "cross_entropy",
                     [lp, k, pixels, count, ignore_index, probs = std::move(probs), lab = std::move(lab)](TensorImpl& o) {
                       if (count == 0) return;
                       const double s = o.grad[0] / static_cast<double>(count);
                       accumulate(lp, [&](std::vector<double>& g) {
                         for (std::size_t p = 0; p < pixels; ++p) {
                           if (lab[p] == ignore_index) continue;
                           for (std::size_t c = 0; c < k; ++c) g[c * pixels + p] += s * probs[c * pixels + p];
                           g[static_cast<std::size_t>(lab[p]) * pixels + p] -= s;
                         }
                       });
                     });
}

}  // namespace msfuse
