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
#include <atomic>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sdcl/ops.hpp"
#include "sdcl/rng.hpp"
#include "sdcl/sgem.hpp"

// Back-door fusion: AdaIN re-styling of expert features with each stratum of
// the confounder set, averaged under a uniform prior and blended with the
// unmodified features. Training-time only.

namespace sdcl {

enum class NoiseMode { off, paper_literal, bounded };

/// Multiplicative per-channel perturbation of the target sigma.
struct NoisePolicy {
  NoiseMode mode = NoiseMode::bounded;
  double scale = 0.1;
  double lo = 0.5;
  double hi = 1.5;

  void validate() const {
    if (!(scale >= 0.0)) throw ConfigError("bdcl.noise.scale", "must be nonnegative");
    if (!(lo <= hi)) throw ConfigError("bdcl.noise.lo", "lower bound exceeds upper bound");
  }

  /// bounded: clip(1 + scale * N(0,1), lo, hi); paper_literal: N(0,1);
  /// off: 1.
  std::vector<double> draw(std::size_t channels, Rng& rng) const {
    std::vector<double> eps(channels, 1.0);
    if (mode == NoiseMode::off) return eps;
    for (auto& e : eps) {
      const double z = standard_normal(rng);
      e = mode == NoiseMode::paper_literal ? z : std::clamp(1.0 + scale * z, lo, hi);
    }
    return eps;
  }
};

struct FusionConfig {
  double alpha = 0.7;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("bdcl.alpha", "must lie in [0, 1]");
  }
};

/// Instrumentation: AdaIN applications and fusions skipped for lack of
/// initialized strata.
inline std::atomic<std::size_t>& adain_counter() {
  static std::atomic<std::size_t> count{0};
  return count;
}

inline std::atomic<std::size_t>& empty_fusion_counter() {
  static std::atomic<std::size_t> count{0};
  return count;
}

namespace detail {

inline Tensor restyle(const Tensor& normalized, const ChannelStyle& style, std::span<const double> eps) {
  std::vector<double> scale_c(style.sigma.size());
  for (std::size_t c = 0; c < scale_c.size(); ++c) scale_c[c] = style.sigma[c] * eps[c];
  adain_counter().fetch_add(1, std::memory_order_relaxed);
  return channel_affine(normalized, scale_c, style.mu);
}

inline void require_style_channels(const Tensor& f, const ChannelStyle& style) {
  const auto d = feature_dims("adain_transfer", f);
  if (style.mu.size() != d.channels || style.sigma.size() != d.channels) {
    throw ShapeError("adain_transfer: style has " + std::to_string(style.mu.size()) +
                     " channels, features have " + std::to_string(d.channels));
  }
}

}  // namespace detail

/// f_s = (sigma_s * eps) * (f - mu(f)) / sigma(f) + mu_s per sample and
/// channel. The style and eps are constants; gradient flows through f only.
inline Tensor adain_transfer(const Tensor& features, const ChannelStyle& style, const NoisePolicy& noise,
                             std::uint64_t seed) {
  detail::require_style_channels(features, style);
  Rng rng = make_rng(seed, "adain");
  const auto eps = noise.draw(style.mu.size(), rng);
  return detail::restyle(instance_normalize(features), style, eps);
}

/// f_cau = alpha * f + (1 - alpha) * mean over the m initialized strata of
/// adain_transfer(f, s). With no initialized strata f is returned and
/// empty_fusion_counter() is bumped.
inline Tensor causal_fuse(const Tensor& features, const ConfounderSet& set, const FusionConfig& cfg,
                          const NoisePolicy& noise, std::uint64_t seed) {
  cfg.validate();
  if (set.initialized_count() == 0) {
    empty_fusion_counter().fetch_add(1, std::memory_order_relaxed);
    return features;
  }
  if (cfg.alpha == 1.0) return features;
  const auto d = detail::feature_dims("causal_fuse", features);
  if (d.channels != set.channels()) throw ShapeError("causal_fuse: channel count mismatch");
  const Tensor normalized = instance_normalize(features);
  Tensor mixture;
  std::size_t m = 0;
  for (std::size_t s = 0; s < set.size(); ++s) {
    const auto& e = set.entry(s);
    if (!e.initialized) continue;
    Rng rng = make_rng(seed, "stratum", s);
    const Tensor styled = detail::restyle(normalized, e.style, noise.draw(d.channels, rng));
    mixture = mixture.defined() ? add(mixture, styled) : styled;
    ++m;
  }
  return add(scale(features, cfg.alpha), scale(mixture, (1.0 - cfg.alpha) / static_cast<double>(m)));
}

struct NwgmGap {
  double max_tv = 0.0;
  double mean_tv = 0.0;
};

/// Distance between E_s[Softmax(g(f_s'))] and Softmax(g(E_s[f_s'])) where
/// f_s' = alpha * f + (1 - alpha) * adain(f, s) and eps = 1. Reports the
/// max and mean per-sample total variation.
inline NwgmGap nwgm_gap_report(const std::function<Tensor(const Tensor&)>& logit_fn, const Tensor& features,
                               const ConfounderSet& set, const FusionConfig& cfg = {}) {
  cfg.validate();
  if (set.initialized_count() < 2) throw ContractError("nwgm_gap_report: needs at least two initialized strata");
  const Tensor normalized = instance_normalize(features.detach());
  const std::vector<double> ones(set.channels(), 1.0);
  std::vector<Tensor> fused;
  for (std::size_t s = 0; s < set.size(); ++s) {
    const auto& e = set.entry(s);
    if (!e.initialized) continue;
    const Tensor styled = detail::restyle(normalized, e.style, ones);
    fused.push_back(add(scale(features.detach(), cfg.alpha), scale(styled, 1.0 - cfg.alpha)));
  }
  const double inv_m = 1.0 / static_cast<double>(fused.size());
  std::vector<double> expected_probs;
  Tensor mean_features;
  for (const auto& f : fused) {
    const Tensor p = softmax(logit_fn(f));
    if (expected_probs.empty()) expected_probs.assign(p.numel(), 0.0);
    for (std::size_t i = 0; i < p.numel(); ++i) expected_probs[i] += inv_m * p[i];
    mean_features = mean_features.defined() ? add(mean_features, f) : f;
  }
  const Tensor pooled = softmax(logit_fn(scale(mean_features, inv_m)));
  const std::size_t rows = pooled.rank() == 2 ? pooled.dim(0) : 1;
  const std::size_t cols = pooled.numel() / rows;
  NwgmGap gap;
  for (std::size_t r = 0; r < rows; ++r) {
    double tv = 0.0;
    for (std::size_t c = 0; c < cols; ++c) tv += std::abs(expected_probs[r * cols + c] - pooled[r * cols + c]);
    tv *= 0.5;
    gap.max_tv = std::max(gap.max_tv, tv);
    gap.mean_tv += tv / static_cast<double>(rows);
  }
  return gap;
}

}  // namespace sdcl
