#include "m2occ/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "m2occ/errors.hpp"

namespace m2occ::ops {

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(a.shape()));
  }
}

// Adds `g` into t's gradient buffer when t participates in differentiation.
void accumulate(Tensor t, std::span<const double> g) {
  if (!t.requires_grad()) return;
  auto dst = t.mutable_grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

std::vector<double> copy_of(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return make_recorded("matmul", {m, n}, std::move(out), {a, b},
                       [a, b, m, k, n](std::span<const double> g) {
                         auto A = a.data();
                         auto B = b.data();
                         if (a.requires_grad()) {
                           std::vector<double> ga(m * k, 0.0);
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t p = 0; p < k; ++p) {
                               double s = 0.0;
                               for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * B[p * n + j];
                               ga[i * k + p] = s;
                             }
                           accumulate(a, ga);
                         }
                         if (b.requires_grad()) {
                           std::vector<double> gb(k * n, 0.0);
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t p = 0; p < k; ++p) {
                               const double av = A[i * k + p];
                               for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
                             }
                           accumulate(b, gb);
                         }
                       });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  auto A = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = A[i * n + j];
  return make_recorded("transpose", {n, m}, std::move(out), {a},
                       [a, m, n](std::span<const double> g) {
                         std::vector<double> ga(m * n);
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) ga[i * n + j] = g[j * m + i];
                         accumulate(a, ga);
                       });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return make_recorded("reshape", std::move(shape), copy_of(a), {a},
                       [a](std::span<const double> g) { accumulate(a, g); });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out = copy_of(a);
  auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return make_recorded("add", a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
    accumulate(a, g);
    accumulate(b, g);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out = copy_of(a);
  auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= B[i];
  return make_recorded("sub", a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
    accumulate(a, g);
    if (b.requires_grad()) {
      std::vector<double> neg(g.begin(), g.end());
      for (double& v : neg) v = -v;
      accumulate(b, neg);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out = copy_of(a);
  auto B = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return make_recorded("mul", a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
    auto A = a.data();
    auto B = b.data();
    if (a.requires_grad()) {
      std::vector<double> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * B[i];
      accumulate(a, ga);
    }
    if (b.requires_grad()) {
      std::vector<double> gb(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * A[i];
      accumulate(b, gb);
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out = copy_of(a);
  for (double& v : out) v *= factor;
  return make_recorded("scale", a.shape(), std::move(out), {a},
                       [a, factor](std::span<const double> g) {
                         std::vector<double> ga(g.begin(), g.end());
                         for (double& v : ga) v *= factor;
                         accumulate(a, ga);
                       });
}

namespace {

void require_row_vector(const char* op, const Tensor& x, const Tensor& v) {
  if (v.rank() != 1 || x.shape().back() != v.dim(0)) {
    throw DimensionError(std::string(op) + ": vector " + shape_str(v.shape()) +
                         " does not match last axis of " + shape_str(x.shape()));
  }
}

}  // namespace

Tensor add_row(const Tensor& x, const Tensor& v) {
  require_row_vector("add_row", x, v);
  const std::size_t n = v.numel();
  std::vector<double> out = copy_of(x);
  auto V = v.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += V[i % n];
  return make_recorded("add_row", x.shape(), std::move(out), {x, v},
                       [x, v, n](std::span<const double> g) {
                         accumulate(x, g);
                         if (v.requires_grad()) {
                           std::vector<double> gv(n, 0.0);
                           for (std::size_t i = 0; i < g.size(); ++i) gv[i % n] += g[i];
                           accumulate(v, gv);
                         }
                       });
}

Tensor mul_row(const Tensor& x, const Tensor& v) {
  require_row_vector("mul_row", x, v);
  const std::size_t n = v.numel();
  std::vector<double> out = copy_of(x);
  auto V = v.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= V[i % n];
  return make_recorded("mul_row", x.shape(), std::move(out), {x, v},
                       [x, v, n](std::span<const double> g) {
                         auto X = x.data();
                         auto V = v.data();
                         if (x.requires_grad()) {
                           std::vector<double> gx(g.size());
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * V[i % n];
                           accumulate(x, gx);
                         }
                         if (v.requires_grad()) {
                           std::vector<double> gv(n, 0.0);
                           for (std::size_t i = 0; i < g.size(); ++i) gv[i % n] += g[i] * X[i];
                           accumulate(v, gv);
                         }
                       });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) ok = false;
    }
    if (!ok) {
      throw DimensionError("concat: shape " + shape_str(s) + " incompatible with " +
                           shape_str(first) + " along axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  const AxisSplit os = split_at(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.dim(axis);
    auto P = p.data();
    for (std::size_t o = 0; o < os.outer; ++o) {
      std::copy_n(P.begin() + static_cast<std::ptrdiff_t>(o * len * os.inner), len * os.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * os.len + offset) * os.inner));
    }
    offset += len;
  }
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return make_recorded("concat", out_shape, std::move(out), inputs,
                       [inputs, offsets, os, axis](std::span<const double> g) {
                         for (std::size_t k = 0; k < inputs.size(); ++k) {
                           if (!inputs[k].requires_grad()) continue;
                           const std::size_t len = inputs[k].dim(axis);
                           std::vector<double> gp(inputs[k].numel());
                           for (std::size_t o = 0; o < os.outer; ++o) {
                             std::copy_n(g.begin() + static_cast<std::ptrdiff_t>(
                                                         (o * os.len + offsets[k]) * os.inner),
                                         len * os.inner,
                                         gp.begin() + static_cast<std::ptrdiff_t>(o * len * os.inner));
                           }
                           accumulate(inputs[k], gp);
                         }
                       });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= a.rank()) throw DimensionError("slice: axis out of range for " + shape_str(a.shape()));
  if (begin >= end || end > a.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for extent " + std::to_string(a.dim(axis)));
  }
  const AxisSplit s = split_at(a.shape(), axis);
  const std::size_t len = end - begin;
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  std::vector<double> out(shape_numel(out_shape));
  auto A = a.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(A.begin() + static_cast<std::ptrdiff_t>((o * s.len + begin) * s.inner),
                len * s.inner, out.begin() + static_cast<std::ptrdiff_t>(o * len * s.inner));
  }
  return make_recorded("slice", out_shape, std::move(out), {a},
                       [a, s, begin, len](std::span<const double> g) {
                         if (!a.requires_grad()) return;
                         std::vector<double> ga(a.numel(), 0.0);
                         for (std::size_t o = 0; o < s.outer; ++o) {
                           std::copy_n(g.begin() + static_cast<std::ptrdiff_t>(o * len * s.inner),
                                       len * s.inner,
                                       ga.begin() + static_cast<std::ptrdiff_t>(
                                                        (o * s.len + begin) * s.inner));
                         }
                         accumulate(a, ga);
                       });
}

Tensor gelu(const Tensor& x) {
  std::vector<double> out = copy_of(x);
  for (double& v : out) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  return make_recorded("gelu", x.shape(), std::move(out), {x}, [x](std::span<const double> g) {
    auto X = x.data();
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    std::vector<double> gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = X[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      gx[i] = g[i] * (cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v));
    }
    accumulate(x, gx);
  });
}

namespace {

Tensor softmax_impl(const char* name, const Tensor& x, double temperature,
                    std::span<const std::uint8_t> valid) {
  if (!(temperature > 0.0)) {
    throw ParameterError(std::string(name) + ": temperature must be positive, got " +
                         std::to_string(temperature));
  }
  const std::size_t n = x.shape().back();
  if (!valid.empty() && (valid.size() % n != 0 || x.numel() % valid.size() != 0)) {
    throw DimensionError(std::string(name) + ": validity pattern of length " +
                         std::to_string(valid.size()) + " does not tile " + shape_str(x.shape()));
  }
  auto is_valid = [&](std::size_t flat) { return valid.empty() || valid[flat % valid.size()] != 0; };
  const std::size_t rows = x.numel() / n;
  auto X = x.data();
  std::vector<double> out(x.numel(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * n;
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (is_valid(base + j)) m = std::max(m, X[base + j]);
    if (m == -std::numeric_limits<double>::infinity()) continue;
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!is_valid(base + j)) continue;
      out[base + j] = std::exp((X[base + j] - m) / temperature);
      z += out[base + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[base + j] /= z;
  }
  std::vector<double> y = out;
  return make_recorded(name, x.shape(), std::move(out), {x},
                       [x, y = std::move(y), n, rows, temperature](std::span<const double> g) {
                         std::vector<double> gx(g.size());
                         for (std::size_t r = 0; r < rows; ++r) {
                           const std::size_t base = r * n;
                           double dot = 0.0;
                           for (std::size_t j = 0; j < n; ++j) dot += g[base + j] * y[base + j];
                           for (std::size_t j = 0; j < n; ++j)
                             gx[base + j] = y[base + j] * (g[base + j] - dot) / temperature;
                         }
                         accumulate(x, gx);
                       });
}

}  // namespace

Tensor softmax(const Tensor& x, double temperature) { return softmax_impl("softmax", x, temperature, {}); }

Tensor masked_softmax(const Tensor& x, double temperature, std::span<const std::uint8_t> valid) {
  return softmax_impl("masked_softmax", x, temperature, valid);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (!(eps > 0.0)) throw ParameterError("layer_norm: eps must be positive");
  require_row_vector("layer_norm", x, gamma);
  require_row_vector("layer_norm", x, beta);
  const std::size_t d = gamma.numel();
  const std::size_t rows = x.numel() / d;
  auto X = x.data();
  auto G = gamma.data();
  auto B = beta.data();
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * inv_std[r];
      out[r * d + j] = G[j] * xhat[r * d + j] + B[j];
    }
  }
  return make_recorded(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), d,
       rows](std::span<const double> g) {
        auto G = gamma.data();
        if (x.requires_grad()) {
          std::vector<double> gx(x.numel());
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dh = 0.0, mean_dh_xh = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g[r * d + j] * G[j];
              mean_dh += dh;
              mean_dh_xh += dh * xhat[r * d + j];
            }
            mean_dh /= static_cast<double>(d);
            mean_dh_xh /= static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g[r * d + j] * G[j];
              gx[r * d + j] = inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_xh);
            }
          }
          accumulate(x, gx);
        }
        if (gamma.requires_grad() || beta.requires_grad()) {
          std::vector<double> gg(d, 0.0), gb(d, 0.0);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) {
              gg[j] += g[r * d + j] * xhat[r * d + j];
              gb[j] += g[r * d + j];
            }
          accumulate(gamma, gg);
          accumulate(beta, gb);
        }
      });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return make_recorded("sum", {1}, {s}, {a}, [a](std::span<const double> g) {
    accumulate(a, std::vector<double>(a.numel(), g[0]));
  });
}

Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double n = static_cast<double>(a.numel());
  return make_recorded("mean", {1}, {s / n}, {a}, [a, n](std::span<const double> g) {
    accumulate(a, std::vector<double>(a.numel(), g[0] / n));
  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape("mse", a, b);
  auto A = a.data();
  auto B = b.data();
  double s = 0.0;
  for (std::size_t i = 0; i < A.size(); ++i) s += (A[i] - B[i]) * (A[i] - B[i]);
  const double n = static_cast<double>(A.size());
  return make_recorded("mse", {1}, {s / n}, {a, b}, [a, b, n](std::span<const double> g) {
    auto A = a.data();
    auto B = b.data();
    std::vector<double> ga(A.size());
    for (std::size_t i = 0; i < A.size(); ++i) ga[i] = 2.0 * (A[i] - B[i]) / n * g[0];
    accumulate(a, ga);
    if (b.requires_grad()) {
      for (double& v : ga) v = -v;
      accumulate(b, ga);
    }
  });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> indices) {
  require_rank("embedding", table, 2);
  if (indices.empty()) throw DimensionError("embedding: no indices");
  const std::size_t rows = table.dim(0), c = table.dim(1);
  auto T = table.data();
  std::vector<double> out(indices.size() * c);
  for (std::size_t n = 0; n < indices.size(); ++n) {
    if (indices[n] >= rows) {
      throw DimensionError("embedding: index " + std::to_string(indices[n]) +
                           " out of range for table " + shape_str(table.shape()));
    }
    std::copy_n(T.begin() + static_cast<std::ptrdiff_t>(indices[n] * c), c,
                out.begin() + static_cast<std::ptrdiff_t>(n * c));
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_recorded("embedding", {indices.size(), c}, std::move(out), {table},
                       [table, idx = std::move(idx), c](std::span<const double> g) {
                         std::vector<double> gt(table.numel(), 0.0);
                         for (std::size_t n = 0; n < idx.size(); ++n)
                           for (std::size_t j = 0; j < c; ++j) gt[idx[n] * c + j] += g[n * c + j];
                         accumulate(table, gt);
                       });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels,
                     std::span<const double> class_weights) {
  require_rank("cross_entropy", logits, 2);
  const std::size_t v = logits.dim(0), c = logits.dim(1);
  if (labels.size() != v) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         shape_str(logits.shape()) + " logits");
  }
  if (class_weights.size() != c) {
    throw DimensionError("cross_entropy: " + std::to_string(class_weights.size()) +
                         " class weights for " + std::to_string(c) + " classes");
  }
  auto L = logits.data();
  std::vector<double> probs(v * c);
  double total = 0.0, weight_sum = 0.0;
  for (std::size_t r = 0; r < v; ++r) {
    const int y = labels[r];
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ParameterError("cross_entropy: label " + std::to_string(y) + " out of range");
    }
    const double* lr = L.data() + r * c;
    double m = lr[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, lr[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[r * c + j] = std::exp(lr[j] - m);
      z += probs[r * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
    const double w = class_weights[static_cast<std::size_t>(y)];
    total += w * (m + std::log(z) - lr[y]);
    weight_sum += w;
  }
  if (!(weight_sum > 0.0)) throw ParameterError("cross_entropy: selected class weights sum to zero");
  std::vector<int> ys(labels.begin(), labels.end());
  std::vector<double> ws(class_weights.begin(), class_weights.end());
  return make_recorded(
      "cross_entropy", {1}, {total / weight_sum}, {logits},
      [logits, probs = std::move(probs), ys = std::move(ys), ws = std::move(ws), v, c,
       weight_sum](std::span<const double> g) {
        std::vector<double> gl(v * c);
        for (std::size_t r = 0; r < v; ++r) {
          const auto y = static_cast<std::size_t>(ys[r]);
          const double f = g[0] * ws[y] / weight_sum;
          for (std::size_t j = 0; j < c; ++j)
            gl[r * c + j] = f * (probs[r * c + j] - (j == y ? 1.0 : 0.0));
        }
        accumulate(logits, gl);
      });
}

Tensor sparse_mix(const Tensor& x, std::size_t out_rows, std::span<const MixEntry> entries) {
  require_rank("sparse_mix", x, 2);
  const std::size_t rows = x.dim(0), c = x.dim(1);
  auto X = x.data();
  std::vector<double> out(out_rows * c, 0.0);
  for (const MixEntry& e : entries) {
    if (e.out_row >= out_rows || e.in_row >= rows) {
      throw DimensionError("sparse_mix: entry (" + std::to_string(e.out_row) + " <- " +
                           std::to_string(e.in_row) + ") out of range");
    }
    for (std::size_t j = 0; j < c; ++j) out[e.out_row * c + j] += e.weight * X[e.in_row * c + j];
  }
  std::vector<MixEntry> es(entries.begin(), entries.end());
  return make_recorded("sparse_mix", {out_rows, c}, std::move(out), {x},
                       [x, es = std::move(es), c](std::span<const double> g) {
                         std::vector<double> gx(x.numel(), 0.0);
                         for (const MixEntry& e : es)
                           for (std::size_t j = 0; j < c; ++j)
                             gx[e.in_row * c + j] += e.weight * g[e.out_row * c + j];
                         accumulate(x, gx);
                       });
}

Tensor cosine_similarity(const Tensor& x, const Tensor& refs, double eps) {
  require_rank("cosine_similarity", x, 2);
  require_rank("cosine_similarity", refs, 2);
  if (x.dim(1) != refs.dim(1)) {
    throw DimensionError("cosine_similarity: feature dim " + shape_str(x.shape()) + " vs " +
                         shape_str(refs.shape()));
  }
  const std::size_t v = x.dim(0), p = refs.dim(0), d = x.dim(1);
  auto X = x.data();
  auto R = refs.data();
  std::vector<double> xnorm(v), rnorm(p);
  for (std::size_t i = 0; i < v; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += X[i * d + j] * X[i * d + j];
    xnorm[i] = std::sqrt(s);
  }
  for (std::size_t k = 0; k < p; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += R[k * d + j] * R[k * d + j];
    rnorm[k] = std::sqrt(s);
  }
  std::vector<double> dots(v * p), out(v * p);
  for (std::size_t i = 0; i < v; ++i)
    for (std::size_t k = 0; k < p; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += X[i * d + j] * R[k * d + j];
      dots[i * p + k] = s;
      out[i * p + k] = s / ((xnorm[i] + eps) * (rnorm[k] + eps));
    }
  return make_recorded(
      "cosine_similarity", {v, p}, std::move(out), {x},
      [x, refs, xnorm = std::move(xnorm), rnorm = std::move(rnorm), dots = std::move(dots), v, p, d,
       eps](std::span<const double> g) {
        auto X = x.data();
        auto R = refs.data();
        std::vector<double> gx(v * d, 0.0);
        for (std::size_t i = 0; i < v; ++i) {
          const double nx = xnorm[i] + eps;
          for (std::size_t k = 0; k < p; ++k) {
            const double gk = g[i * p + k];
            if (gk == 0.0) continue;
            const double nr = rnorm[k] + eps;
            const double direct = gk / (nx * nr);
            const double radial = xnorm[i] > 0.0 ? gk * dots[i * p + k] / (nx * nx * nr * xnorm[i]) : 0.0;
            for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += direct * R[k * d + j] - radial * X[i * d + j];
          }
        }
        accumulate(x, gx);
      });
}

Tensor memory_readout(const Tensor& gate, const Tensor& weights, const Tensor& bank) {
  require_rank("memory_readout", gate, 2);
  require_rank("memory_readout", weights, 3);
  require_rank("memory_readout", bank, 3);
  const std::size_t v = gate.dim(0), k = gate.dim(1), np = bank.dim(1), d = bank.dim(2);
  if (bank.dim(0) != k || weights.shape() != Shape{v, k, np}) {
    throw DimensionError("memory_readout: gate " + shape_str(gate.shape()) + ", weights " +
                         shape_str(weights.shape()) + ", bank " + shape_str(bank.shape()));
  }
  auto G = gate.data();
  auto W = weights.data();
  auto M = bank.data();
  std::vector<double> out(v * d, 0.0);
  for (std::size_t i = 0; i < v; ++i)
    for (std::size_t c = 0; c < k; ++c) {
      const double gv = G[i * k + c];
      for (std::size_t j = 0; j < np; ++j) {
        const double coef = gv * W[(i * k + c) * np + j];
        const double* m = M.data() + (c * np + j) * d;
        for (std::size_t e = 0; e < d; ++e) out[i * d + e] += coef * m[e];
      }
    }
  return make_recorded(
      "memory_readout", {v, d}, std::move(out), {gate, weights},
      [gate, weights, bank, v, k, np, d](std::span<const double> g) {
        auto G = gate.data();
        auto W = weights.data();
        auto M = bank.data();
        std::vector<double> gg(v * k, 0.0), gw(v * k * np, 0.0);
        for (std::size_t i = 0; i < v; ++i)
          for (std::size_t c = 0; c < k; ++c)
            for (std::size_t j = 0; j < np; ++j) {
              const double* m = M.data() + (c * np + j) * d;
              double proj = 0.0;
              for (std::size_t e = 0; e < d; ++e) proj += g[i * d + e] * m[e];
              gg[i * k + c] += W[(i * k + c) * np + j] * proj;
              gw[(i * k + c) * np + j] = G[i * k + c] * proj;
            }
        accumulate(gate, gg);
        accumulate(weights, gw);
      });
}

}  // namespace m2occ::ops
