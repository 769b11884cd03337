// Copyright 2026 The SDCL Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "sdcl/tensor.hpp"

// Differentiable operations over sdcl::Tensor. Feature maps are laid out as
// (batch, channels, height, width); matrices as (rows, cols).

namespace sdcl {

namespace detail {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMajor>;
using ConstMapRM = Eigen::Map<const RowMajor>;

inline void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

inline void require_rank(std::string_view op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got shape " + shape_str(t.shape()));
  }
}

struct MapDims {
  std::size_t batch, channels, spatial;
};

inline MapDims feature_dims(std::string_view op, const Tensor& x) {
  require_rank(op, x, 4);
  const std::size_t spatial = x.dim(2) * x.dim(3);
  if (spatial == 0) {
    throw ShapeError(std::string(op) + ": empty spatial extent in " + shape_str(x.shape()));
  }
  return {x.dim(0), x.dim(1), spatial};
}

// Output columns [first, second) whose input column ox + kx - 1 is in range.
inline std::pair<std::size_t, std::size_t> valid_span(std::size_t kx, std::size_t w) {
  return {kx == 0 ? 1 : 0, kx == 2 ? w - 1 : w};
}

// Rows over the last axis of a rank-1 or rank-2 tensor.
inline std::pair<std::size_t, std::size_t> row_dims(std::string_view op, const Tensor& x) {
  if (x.rank() == 1) return {1, x.dim(0)};
  if (x.rank() == 2) return {x.dim(0), x.dim(1)};
  throw ShapeError(std::string(op) + ": expected rank 1 or 2, got " + shape_str(x.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result("add", a.shape(), std::move(out), {a.node(), b.node()},
                             [](detail::Node& self) {
                               for (std::size_t k = 0; k < 2; ++k) {
                                 if (double* g = detail::grad_of(self, k)) {
                                   for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                                 }
                               }
                             });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result("sub", a.shape(), std::move(out), {a.node(), b.node()},
                             [](detail::Node& self) {
                               if (double* g = detail::grad_of(self, 0)) {
                                 for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                               }
                               if (double* g = detail::grad_of(self, 1)) {
                                 for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
                               }
                             });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result("mul", a.shape(), std::move(out), {a.node(), b.node()},
                             [](detail::Node& self) {
                               const auto& ad = self.inputs[0]->data;
                               const auto& bd = self.inputs[1]->data;
                               if (double* g = detail::grad_of(self, 0)) {
                                 for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bd[i];
                               }
                               if (double* g = detail::grad_of(self, 1)) {
                                 for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * ad[i];
                               }
                             });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return detail::make_result("scale", a.shape(), std::move(out), {a.node()},
                             [s](detail::Node& self) {
                               double* g = detail::grad_of(self, 0);
                               for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += s * self.grad[i];
                             });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  return detail::make_result("relu", a.shape(), std::move(out), {a.node()},
                             [](detail::Node& self) {
                               double* g = detail::grad_of(self, 0);
                               const auto& x = self.inputs[0]->data;
                               for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                 if (x[i] > 0.0) g[i] += self.grad[i];
                               }
                             });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return detail::make_result("sum", {1}, {s}, {a.node()}, [](detail::Node& self) {
    double* g = detail::grad_of(self, 0);
    const double up = self.grad[0];
    for (std::size_t i = 0; i < self.inputs[0]->data.size(); ++i) g[i] += up;
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Sum over the batch axis of a (rows, cols) matrix -> (cols).
inline Tensor column_sum(const Tensor& x) {
  detail::require_rank("column_sum", x, 2);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c] += x[r * cols + c];
  return detail::make_result("column_sum", {cols}, std::move(out), {x.node()},
                             [rows, cols](detail::Node& self) {
                               double* g = detail::grad_of(self, 0);
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += self.grad[c];
                             });
}

/// Squared coefficient of variation Var(v)/Mean(v)^2 with population
/// variance. A zero mean yields 0 with zero gradient.
inline Tensor cv_squared(const Tensor& v) {
  detail::require_rank("cv_squared", v, 1);
  const std::size_t n = v.numel();
  if (n == 0) throw ShapeError("cv_squared: empty vector");
  double m = 0.0;
  for (double x : v.values()) m += x;
  m /= static_cast<double>(n);
  double var = 0.0;
  for (double x : v.values()) var += (x - m) * (x - m);
  var /= static_cast<double>(n);
  const bool degenerate = m == 0.0;
  const double value = degenerate ? 0.0 : var / (m * m);
  return detail::make_result("cv_squared", {1}, {value}, {v.node()},
                             [n, m, var, degenerate](detail::Node& self) {
                               if (degenerate) return;
                               double* g = detail::grad_of(self, 0);
                               const auto& x = self.inputs[0]->data;
                               const double c = 2.0 / (static_cast<double>(n) * m * m);
                               for (std::size_t j = 0; j < n; ++j) {
                                 g[j] += self.grad[0] * c * ((x[j] - m) - var / m);
                               }
                             });
}

// ---------------------------------------------------------------------------
// Probability

/// Softmax over the last axis of a rank-1 or rank-2 tensor, max-subtracted.
inline Tensor softmax(const Tensor& x) {
  const auto [rows, cols] = detail::row_dims("softmax", x);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.values().data() + r * cols;
    double* o = out.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (o[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= z;
  }
  return detail::make_result("softmax", x.shape(), std::move(out), {x.node()},
                             [rows, cols](detail::Node& self) {
                               double* g = detail::grad_of(self, 0);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double* y = self.data.data() + r * cols;
                                 const double* up = self.grad.data() + r * cols;
                                 double dot = 0.0;
                                 for (std::size_t c = 0; c < cols; ++c) dot += up[c] * y[c];
                                 for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (up[c] - dot);
                               }
                             });
}

/// Softmax restricted to entries with mask != 0 (same layout as x); masked
/// entries are exactly zero. Every row needs at least one selected entry.
inline Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> mask) {
  const auto [rows, cols] = detail::row_dims("masked_softmax", x);
  if (mask.size() != x.numel()) throw ShapeError("masked_softmax: mask size mismatch");
  std::vector<double> out(x.numel(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.values().data() + r * cols;
    const std::uint8_t* m = mask.data() + r * cols;
    double mx = -INFINITY;
    for (std::size_t c = 0; c < cols; ++c)
      if (m[c]) mx = std::max(mx, in[c]);
    if (mx == -INFINITY) throw ContractError("masked_softmax: row with empty selection");
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c)
      if (m[c]) z += (out[r * cols + c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= z;
  }
  return detail::make_result("masked_softmax", x.shape(), std::move(out), {x.node()},
                             [rows, cols](detail::Node& self) {
                               double* g = detail::grad_of(self, 0);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double* y = self.data.data() + r * cols;
                                 const double* up = self.grad.data() + r * cols;
                                 double dot = 0.0;
                                 for (std::size_t c = 0; c < cols; ++c) dot += up[c] * y[c];
                                 for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (up[c] - dot);
                               }
                             });
}

/// Mean negative log-likelihood of integer labels under softmax(logits).
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  detail::require_rank("cross_entropy", logits, 2);
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (labels.size() != rows) throw ShapeError("cross_entropy: label count mismatch");
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  std::vector<int> lab(labels.begin(), labels.end());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = lab[r];
    if (y < 0 || static_cast<std::size_t>(y) >= cols) throw ShapeError("cross_entropy: label out of range");
    const double* in = logits.values().data() + r * cols;
    double* p = probs->data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (p[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) p[c] /= z;
    loss -= (in[y] - mx) - std::log(z);
  }
  loss /= static_cast<double>(rows);
  return detail::make_result("cross_entropy", {1}, {loss}, {logits.node()},
                             [probs, lab = std::move(lab), rows, cols](detail::Node& self) {
                               double* g = detail::grad_of(self, 0);
                               const double up = self.grad[0] / static_cast<double>(rows);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 for (std::size_t c = 0; c < cols; ++c) {
                                   const double onehot = static_cast<int>(c) == lab[r] ? 1.0 : 0.0;
                                   g[r * cols + c] += up * ((*probs)[r * cols + c] - onehot);
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// Layers

/// y = x W^T + b for x (batch, in), W (out, in), b (out).
inline Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::require_rank("dense", x, 2);
  detail::require_rank("dense", weight, 2);
  const std::size_t batch = x.dim(0), in = x.dim(1), out = weight.dim(0);
  if (weight.dim(1) != in || bias.shape() != Shape{out}) {
    throw ShapeError("dense: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()) + " / bias " + shape_str(bias.shape()));
  }
  std::vector<double> result(batch * out);
  detail::ConstMapRM X(x.values().data(), batch, in);
  detail::ConstMapRM W(weight.values().data(), out, in);
  detail::MapRM Y(result.data(), batch, out);
  Y.noalias() = X * W.transpose();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < out; ++o) Y(b, o) += bias[o];
  return detail::make_result("dense", {batch, out}, std::move(result),
                             {x.node(), weight.node(), bias.node()},
                             [batch, in, out](detail::Node& self) {
                               detail::ConstMapRM G(self.grad.data(), batch, out);
                               if (double* g = detail::grad_of(self, 0)) {
                                 detail::ConstMapRM W(self.inputs[1]->data.data(), out, in);
                                 detail::MapRM(g, batch, in).noalias() += G * W;
                               }
                               if (double* g = detail::grad_of(self, 1)) {
                                 detail::ConstMapRM X(self.inputs[0]->data.data(), batch, in);
                                 detail::MapRM(g, out, in).noalias() += G.transpose() * X;
                               }
                               if (double* g = detail::grad_of(self, 2)) {
                                 for (std::size_t b = 0; b < batch; ++b)
                                   for (std::size_t o = 0; o < out; ++o) g[o] += G(b, o);
                               }
                             });
}

/// 3x3 convolution, unit stride, zero same-padding. W is (out, in, 3, 3).
inline Tensor conv3x3(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const auto d = detail::feature_dims("conv3x3", x);
  detail::require_rank("conv3x3", weight, 4);
  const std::size_t cin = d.channels, cout = weight.dim(0);
  const std::size_t h = x.dim(2), w = x.dim(3), batch = d.batch, plane = d.spatial;
  if (weight.dim(1) != cin || weight.dim(2) != 3 || weight.dim(3) != 3 || bias.shape() != Shape{cout}) {
    throw ShapeError("conv3x3: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()) + " / bias " + shape_str(bias.shape()));
  }
  const std::size_t k = cin * 9, cols = batch * plane;
  auto patches = std::make_shared<detail::RowMajor>(k, cols);
  const double* xd = x.values().data();
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t ky = 0; ky < 3; ++ky)
      for (std::size_t kx = 0; kx < 3; ++kx) {
        double* row = patches->data() + ((c * 9 + ky * 3 + kx) * cols);
        const auto span_x = detail::valid_span(kx, w);
        for (std::size_t b = 0; b < batch; ++b) {
          const double* src = xd + (b * cin + c) * plane;
          double* dst = row + b * plane;
          for (std::size_t oy = 0; oy < h; ++oy) {
            double* out_row = dst + oy * w;
            const long iy = static_cast<long>(oy + ky) - 1;
            if (iy < 0 || iy >= static_cast<long>(h)) {
              std::fill_n(out_row, w, 0.0);
              continue;
            }
            std::fill(out_row, out_row + span_x.first, 0.0);
            std::copy(src + iy * static_cast<long>(w) + static_cast<long>(span_x.first + kx) - 1,
                      src + iy * static_cast<long>(w) + static_cast<long>(span_x.second + kx) - 1,
                      out_row + span_x.first);
            std::fill(out_row + span_x.second, out_row + w, 0.0);
          }
        }
      }
  detail::RowMajor product(cout, cols);
  product.noalias() = detail::ConstMapRM(weight.values().data(), cout, k) * (*patches);
  std::vector<double> result(batch * cout * plane);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < cout; ++o) {
      const double* src = product.data() + o * cols + b * plane;
      double* dst = result.data() + (b * cout + o) * plane;
      const double bo = bias[o];
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + bo;
    }
  return detail::make_result(
      "conv3x3", {batch, cout, h, w}, std::move(result), {x.node(), weight.node(), bias.node()},
      [patches, batch, cin, cout, h, w, plane, k, cols](detail::Node& self) {
        detail::RowMajor grad_mat(cout, cols);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t o = 0; o < cout; ++o) {
            const double* src = self.grad.data() + (b * cout + o) * plane;
            std::copy(src, src + plane, grad_mat.data() + o * cols + b * plane);
          }
        if (double* g = detail::grad_of(self, 1)) {
          detail::MapRM(g, cout, k).noalias() += grad_mat * patches->transpose();
        }
        if (double* g = detail::grad_of(self, 2)) {
          for (std::size_t o = 0; o < cout; ++o) g[o] += grad_mat.row(static_cast<Eigen::Index>(o)).sum();
        }
        if (double* g = detail::grad_of(self, 0)) {
          detail::RowMajor dpatches(k, cols);
          dpatches.noalias() = detail::ConstMapRM(self.inputs[1]->data.data(), cout, k).transpose() * grad_mat;
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const double* row = dpatches.data() + ((c * 9 + ky * 3 + kx) * cols);
                const auto span_x = detail::valid_span(kx, w);
                for (std::size_t b = 0; b < batch; ++b) {
                  double* dst = g + (b * cin + c) * plane;
                  const double* src = row + b * plane;
                  for (std::size_t oy = 0; oy < h; ++oy) {
                    const long iy = static_cast<long>(oy + ky) - 1;
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    double* d = dst + iy * static_cast<long>(w) + static_cast<long>(kx) - 1;
                    const double* s = src + oy * w;
                    for (std::size_t ox = span_x.first; ox < span_x.second; ++ox) d[ox] += s[ox];
                  }
                }
              }
        }
      });
}

/// 2x2 average pooling with stride 2; H and W must be even.
inline Tensor avg_pool2(const Tensor& x) {
  const auto d = detail::feature_dims("avg_pool2", x);
  const std::size_t h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw ShapeError("avg_pool2: odd spatial extent in " + shape_str(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2, maps = d.batch * d.channels;
  std::vector<double> out(maps * oh * ow);
  for (std::size_t m = 0; m < maps; ++m) {
    const double* src = x.values().data() + m * h * w;
    double* dst = out.data() + m * oh * ow;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const double* p = src + 2 * y * w + 2 * xx;
        dst[y * ow + xx] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
      }
  }
  return detail::make_result("avg_pool2", {x.dim(0), x.dim(1), oh, ow}, std::move(out), {x.node()},
                             [maps, h, w, oh, ow](detail::Node& self) {
                               double* g = detail::grad_of(self, 0);
                               for (std::size_t m = 0; m < maps; ++m) {
                                 double* dst = g + m * h * w;
                                 const double* up = self.grad.data() + m * oh * ow;
                                 for (std::size_t y = 0; y < oh; ++y)
                                   for (std::size_t xx = 0; xx < ow; ++xx) {
                                     const double v = 0.25 * up[y * ow + xx];
                                     double* p = dst + 2 * y * w + 2 * xx;
                                     p[0] += v;
                                     p[1] += v;
                                     p[w] += v;
                                     p[w + 1] += v;
                                   }
                               }
                             });
}

// ---------------------------------------------------------------------------
// Channel statistics

/// Per-(sample, channel) spatial mean: (B,C,H,W) -> (B,C).
inline Tensor channel_mean(const Tensor& x) {
  const auto d = detail::feature_dims("channel_mean", x);
  const std::size_t maps = d.batch * d.channels, plane = d.spatial;
  std::vector<double> out(maps);
  for (std::size_t m = 0; m < maps; ++m) {
    const double* p = x.values().data() + m * plane;
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += p[i];
    out[m] = s / static_cast<double>(plane);
  }
  return detail::make_result("channel_mean", {d.batch, d.channels}, std::move(out), {x.node()},
                             [maps, plane](detail::Node& self) {
                               double* g = detail::grad_of(self, 0);
                               const double inv = 1.0 / static_cast<double>(plane);
                               for (std::size_t m = 0; m < maps; ++m)
                                 for (std::size_t i = 0; i < plane; ++i) g[m * plane + i] += self.grad[m] * inv;
                             });
}

/// Floor applied to sigma wherever it appears in a denominator.
inline constexpr double kSigmaFloor = 1e-5;

/// Per-(sample, channel) population standard deviation: (B,C,H,W) -> (B,C).
inline Tensor channel_std(const Tensor& x) {
  const auto d = detail::feature_dims("channel_std", x);
  const std::size_t maps = d.batch * d.channels, plane = d.spatial;
  std::vector<double> out(maps);
  auto means = std::make_shared<std::vector<double>>(maps);
  for (std::size_t m = 0; m < maps; ++m) {
    const double* p = x.values().data() + m * plane;
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += p[i];
    const double mu = s / static_cast<double>(plane);
    double v = 0.0;
    for (std::size_t i = 0; i < plane; ++i) v += (p[i] - mu) * (p[i] - mu);
    (*means)[m] = mu;
    out[m] = std::sqrt(v / static_cast<double>(plane));
  }
  return detail::make_result("channel_std", {d.batch, d.channels}, std::move(out), {x.node()},
                             [maps, plane, means](detail::Node& self) {
                               double* g = detail::grad_of(self, 0);
                               const auto& xd = self.inputs[0]->data;
                               for (std::size_t m = 0; m < maps; ++m) {
                                 const double denom = static_cast<double>(plane) * std::max(self.data[m], kSigmaFloor);
                                 const double c = self.grad[m] / denom;
                                 const double mu = (*means)[m];
                                 for (std::size_t i = 0; i < plane; ++i) g[m * plane + i] += c * (xd[m * plane + i] - mu);
                               }
                             });
}

/// Per-sample channel statistics of a feature map, each (B,C).
struct ChannelStats {
  Tensor mu;
  Tensor sigma;
};

inline ChannelStats channel_stats(const Tensor& features) {
  return {channel_mean(features), channel_std(features)};
}

/// (x - mu) / max(sigma, floor) per sample and channel.
inline Tensor instance_normalize(const Tensor& x) {
  const auto d = detail::feature_dims("instance_normalize", x);
  const std::size_t maps = d.batch * d.channels, plane = d.spatial;
  auto inv_sigma = std::make_shared<std::vector<double>>(maps);
  auto floored = std::make_shared<std::vector<std::uint8_t>>(maps);
  std::vector<double> out(x.numel());
  for (std::size_t m = 0; m < maps; ++m) {
    const double* p = x.values().data() + m * plane;
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += p[i];
    const double mu = s / static_cast<double>(plane);
    double v = 0.0;
    for (std::size_t i = 0; i < plane; ++i) v += (p[i] - mu) * (p[i] - mu);
    const double sigma = std::sqrt(v / static_cast<double>(plane));
    (*floored)[m] = sigma < kSigmaFloor;
    const double inv = 1.0 / std::max(sigma, kSigmaFloor);
    (*inv_sigma)[m] = inv;
    for (std::size_t i = 0; i < plane; ++i) out[m * plane + i] = (p[i] - mu) * inv;
  }
  return detail::make_result(
      "instance_normalize", x.shape(), std::move(out), {x.node()},
      [maps, plane, inv_sigma, floored](detail::Node& self) {
        double* g = detail::grad_of(self, 0);
        const double n = static_cast<double>(plane);
        for (std::size_t m = 0; m < maps; ++m) {
          const double* up = self.grad.data() + m * plane;
          const double* y = self.data.data() + m * plane;
          double mean_up = 0.0, mean_up_y = 0.0;
          for (std::size_t i = 0; i < plane; ++i) {
            mean_up += up[i];
            mean_up_y += up[i] * y[i];
          }
          mean_up /= n;
          mean_up_y /= n;
          // A floored sigma is a constant, so only the centering term remains.
          if ((*floored)[m]) mean_up_y = 0.0;
          const double inv = (*inv_sigma)[m];
          for (std::size_t i = 0; i < plane; ++i) {
            g[m * plane + i] += inv * (up[i] - mean_up - y[i] * mean_up_y);
          }
        }
      });
}

/// y[b,c,:,:] = x[b,c,:,:] * scale[c] + shift[c] with constant scale/shift.
inline Tensor channel_affine(const Tensor& x, std::span<const double> scale_c,
                             std::span<const double> shift_c) {
  const auto d = detail::feature_dims("channel_affine", x);
  if (scale_c.size() != d.channels || shift_c.size() != d.channels) {
    throw ShapeError("channel_affine: expected " + std::to_string(d.channels) + " channels, got " +
                     std::to_string(scale_c.size()) + "/" + std::to_string(shift_c.size()));
  }
  std::vector<double> sc(scale_c.begin(), scale_c.end());
  std::vector<double> out(x.numel());
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t c = 0; c < d.channels; ++c) {
      const std::size_t off = (b * d.channels + c) * d.spatial;
      for (std::size_t i = 0; i < d.spatial; ++i) out[off + i] = x[off + i] * sc[c] + shift_c[c];
    }
  return detail::make_result("channel_affine", x.shape(), std::move(out), {x.node()},
                             [d, sc = std::move(sc)](detail::Node& self) {
                               double* g = detail::grad_of(self, 0);
                               for (std::size_t b = 0; b < d.batch; ++b)
                                 for (std::size_t c = 0; c < d.channels; ++c) {
                                   const std::size_t off = (b * d.channels + c) * d.spatial;
                                   for (std::size_t i = 0; i < d.spatial; ++i) g[off + i] += self.grad[off + i] * sc[c];
                                 }
                             });
}

/// Mean over H and W: (B,C,H,W) -> (B,C).
inline Tensor global_avg_pool(const Tensor& x) { return channel_mean(x); }

/// Row-wise concatenation of (B,p) and (B,q) -> (B,p+q).
inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  detail::require_rank("concat_cols", a, 2);
  detail::require_rank("concat_cols", b, 2);
  if (a.dim(0) != b.dim(0)) throw ShapeError("concat_cols: row count mismatch");
  const std::size_t rows = a.dim(0), p = a.dim(1), q = b.dim(1);
  std::vector<double> out(rows * (p + q));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.values().data() + r * p, p, out.data() + r * (p + q));
    std::copy_n(b.values().data() + r * q, q, out.data() + r * (p + q) + p);
  }
  return detail::make_result("concat_cols", {rows, p + q}, std::move(out), {a.node(), b.node()},
                             [rows, p, q](detail::Node& self) {
                               if (double* g = detail::grad_of(self, 0))
                                 for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t i = 0; i < p; ++i) g[r * p + i] += self.grad[r * (p + q) + i];
                               if (double* g = detail::grad_of(self, 1))
                                 for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t i = 0; i < q; ++i) g[r * q + i] += self.grad[r * (p + q) + p + i];
                             });
}

/// out[b] = sum_i weights[b,i] * xs[i][b] for per-sample mixture weights
/// (B, n). An undefined xs[i] is allowed only when column i is all zero.
inline Tensor weighted_sum(const std::vector<Tensor>& xs, const Tensor& weights) {
  detail::require_rank("weighted_sum", weights, 2);
  const std::size_t batch = weights.dim(0), n = weights.dim(1);
  if (xs.size() != n) throw ShapeError("weighted_sum: expected " + std::to_string(n) + " inputs");
  const Tensor* ref = nullptr;
  for (std::size_t i = 0; i < n; ++i) {
    if (!xs[i].defined()) {
      for (std::size_t b = 0; b < batch; ++b)
        if (weights[b * n + i] != 0.0) throw ContractError("weighted_sum: missing input with nonzero weight");
      continue;
    }
    if (ref && xs[i].shape() != ref->shape()) throw ShapeError("weighted_sum: input shapes differ");
    if (xs[i].rank() == 0 || xs[i].dim(0) != batch) throw ShapeError("weighted_sum: batch mismatch");
    ref = &xs[i];
  }
  if (!ref) throw ContractError("weighted_sum: no inputs");
  const Shape shape = ref->shape();
  const std::size_t per = ref->numel() / batch;
  std::vector<double> out(ref->numel(), 0.0);
  std::vector<std::shared_ptr<detail::Node>> inputs{weights.node()};
  std::vector<std::size_t> slot(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!xs[i].defined()) continue;
    slot[i] = inputs.size();
    inputs.push_back(xs[i].node());
    for (std::size_t b = 0; b < batch; ++b) {
      const double wt = weights[b * n + i];
      if (wt == 0.0) continue;
      const double* src = xs[i].values().data() + b * per;
      double* dst = out.data() + b * per;
      for (std::size_t j = 0; j < per; ++j) dst[j] += wt * src[j];
    }
  }
  return detail::make_result("weighted_sum", shape, std::move(out), std::move(inputs),
                             [batch, n, per, slot](detail::Node& self) {
                               const auto& wd = self.inputs[0]->data;
                               double* gw = detail::grad_of(self, 0);
                               for (std::size_t i = 0; i < n; ++i) {
                                 if (slot[i] == 0) continue;
                                 const auto& xd = self.inputs[slot[i]]->data;
                                 double* gx = detail::grad_of(self, slot[i]);
                                 for (std::size_t b = 0; b < batch; ++b) {
                                   const double* up = self.grad.data() + b * per;
                                   const double wt = wd[b * n + i];
                                   if (gx && wt != 0.0)
                                     for (std::size_t j = 0; j < per; ++j) gx[b * per + j] += wt * up[j];
                                   if (gw) {
                                     double dot = 0.0;
                                     for (std::size_t j = 0; j < per; ++j) dot += up[j] * xd[b * per + j];
                                     gw[b * n + i] += dot;
                                   }
                                 }
                               }
                             });
}

}  // namespace sdcl
