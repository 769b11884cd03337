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
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sdcl/layers.hpp"
#include "sdcl/ops.hpp"

// Style-guided expert module: style embedding, Top-K routing over a set of
// experts, the per-expert confounder statistics, and the load-balance loss.

namespace sdcl {

enum class RoutingMode {
  standard,  // softmax over the k largest router logits
  literal,   // Softmax(TopK(Softmax(logits)))
};

/// concat(mu, sigma) of a feature map, shape (B, 2C).
struct StyleEmbedding {
  Tensor z;
};

inline StyleEmbedding style_embedding(const Tensor& features) {
  const auto stats = channel_stats(features);
  return {concat_cols(stats.mu, stats.sigma)};
}

struct GatingDecision {
  std::vector<double> weights;
  std::vector<std::size_t> selected;  // ascending
  std::size_t argmax_expert = 0;
  std::vector<double> raw_router_output;
};

/// Batch routing result. `weights` is the differentiable (B, n) gate matrix;
/// `decisions` are plain per-sample copies.
struct Routing {
  Tensor weights;
  Tensor logits;
  std::vector<GatingDecision> decisions;
};

/// Indices of the k largest values; ties go to the lower index.
inline std::vector<std::size_t> top_k_indices(std::span<const double> values, std::size_t k) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::size_t argmax_index(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

/// Gate a (B, n) matrix of router logits down to k experts per row.
inline Routing gate_logits(const Tensor& logits, std::size_t k, RoutingMode mode) {
  detail::require_rank("route", logits, 2);
  const std::size_t batch = logits.dim(0), n = logits.dim(1);
  if (k < 1 || k > n) {
    throw ConfigError("sgem.k", "top-k " + std::to_string(k) + " must lie in [1, " + std::to_string(n) + "]");
  }
  const Tensor scores = mode == RoutingMode::literal ? softmax(logits) : logits;
  std::vector<std::uint8_t> mask(batch * n, 0);
  Routing out;
  out.logits = logits;
  out.decisions.resize(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto row = scores.values().subspan(b * n, n);
    auto& d = out.decisions[b];
    d.selected = top_k_indices(row, k);
    for (std::size_t s : d.selected) mask[b * n + s] = 1;
    d.raw_router_output.assign(logits.values().begin() + b * n, logits.values().begin() + (b + 1) * n);
    d.argmax_expert = argmax_index(d.raw_router_output);
  }
  out.weights = masked_softmax(scores, mask);
  for (std::size_t b = 0; b < batch; ++b) {
    out.decisions[b].weights.assign(out.weights.values().begin() + b * n,
                                    out.weights.values().begin() + (b + 1) * n);
  }
  return out;
}

/// Router: dense 2C -> 4n, ReLU, dense 4n -> n.
inline LayerStack make_router(std::size_t channels, std::size_t n, Rng& rng) {
  LayerStack r;
  r.push(make_dense(2 * channels, 4 * n, rng));
  r.push(ReluLayer{});
  r.push(make_dense(4 * n, n, rng));
  return r;
}

inline Routing route(const LayerStack& router, const StyleEmbedding& z, std::size_t n, std::size_t k,
                     RoutingMode mode = RoutingMode::standard) {
  const Tensor logits = router.forward(z.z);
  if (logits.rank() != 2 || logits.dim(1) != n) {
    throw ShapeError("route: router produced " + shape_str(logits.shape()) + ", expected (B," +
                     std::to_string(n) + ")");
  }
  return gate_logits(logits, k, mode);
}

/// Expert body: 3x3 convolution C -> C followed by ReLU.
inline LayerStack make_expert(std::size_t channels, Rng& rng) {
  LayerStack e;
  e.push(make_conv3x3(channels, channels, rng));
  e.push(ReluLayer{});
  return e;
}

enum class Branch { original, augmented };

/// Original branch: the first expert alone. Augmented branch: gate-weighted
/// sum over experts; experts unselected by every sample are not evaluated.
/// With `residual`, each expert computes f + body(f); since gate rows sum to
/// one the skip is added once after mixing.
inline Tensor moe_forward(const std::vector<LayerStack>& experts, const Tensor& features,
                          const Tensor& gate_weights, Branch branch, bool residual = false) {
  if (experts.empty()) throw ContractError("moe_forward: no experts");
  auto check = [&](const Tensor& out) {
    if (out.shape() != features.shape()) {
      throw ShapeError("moe_forward: expert maps " + shape_str(features.shape()) + " to " +
                       shape_str(out.shape()));
    }
    return out;
  };
  auto skip = [&](const Tensor& out) { return residual ? add(features, out) : out; };
  if (branch == Branch::original) return skip(check(experts.front().forward(features)));
  detail::require_rank("moe_forward", gate_weights, 2);
  const std::size_t batch = gate_weights.dim(0), n = gate_weights.dim(1);
  if (n != experts.size() || batch != features.dim(0)) {
    throw ShapeError("moe_forward: gate matrix " + shape_str(gate_weights.shape()) + " does not match " +
                     std::to_string(experts.size()) + " experts and batch " + std::to_string(features.dim(0)));
  }
  std::vector<Tensor> outputs(n);
  for (std::size_t i = 0; i < n; ++i) {
    bool used = false;
    for (std::size_t b = 0; b < batch && !used; ++b) used = gate_weights[b * n + i] != 0.0;
    if (used) outputs[i] = check(experts[i].forward(features));
  }
  return skip(weighted_sum(outputs, gate_weights));
}

/// Load-balance regularizer: CV^2 of per-expert importance, the batch sum of
/// post-gating weights.
inline Tensor load_balance_loss(const Tensor& gate_weights) {
  detail::require_rank("load_balance_loss", gate_weights, 2);
  if (gate_weights.dim(0) == 0) throw ContractError("load_balance_loss: empty batch");
  return cv_squared(column_sum(gate_weights));
}

/// Per-channel style statistics of one stratum.
struct ChannelStyle {
  std::vector<double> mu;
  std::vector<double> sigma;
};

/// n style strata estimated by momentum from the features routed to each
/// expert. Entries begin uninitialized and adopt their first batch statistic.
class ConfounderSet {
 public:
  struct Entry {
    ChannelStyle style;
    bool initialized = false;
  };

  ConfounderSet() = default;
  ConfounderSet(std::size_t n, std::size_t channels, double tau) : channels_(channels), tau_(tau) {
    if (n == 0) throw ConfigError("sgem.n", "expert count must be positive");
    if (!(tau >= 0.0 && tau < 1.0)) throw ConfigError("sgem.tau", "momentum must lie in [0, 1)");
    entries_.resize(n);
    for (auto& e : entries_) {
      e.style.mu.assign(channels, 0.0);
      e.style.sigma.assign(channels, 0.0);
    }
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t channels() const { return channels_; }
  double tau() const { return tau_; }
  double prior() const { return 1.0 / static_cast<double>(entries_.size()); }
  const Entry& entry(std::size_t s) const { return entries_.at(s); }
  const std::vector<Entry>& entries() const { return entries_; }

  std::size_t initialized_count() const {
    return static_cast<std::size_t>(
        std::count_if(entries_.begin(), entries_.end(), [](const Entry& e) { return e.initialized; }));
  }

  /// Momentum update of stratum s toward a batch statistic.
  void blend(std::size_t s, std::span<const double> batch_mu, std::span<const double> batch_sigma) {
    auto& e = entries_.at(s);
    if (batch_mu.size() != channels_ || batch_sigma.size() != channels_) {
      throw ShapeError("ConfounderSet: statistic has wrong channel count");
    }
    for (std::size_t c = 0; c < channels_; ++c) {
      if (e.initialized) {
        e.style.mu[c] = (1.0 - tau_) * batch_mu[c] + tau_ * e.style.mu[c];
        e.style.sigma[c] = (1.0 - tau_) * batch_sigma[c] + tau_ * e.style.sigma[c];
      } else {
        e.style.mu[c] = batch_mu[c];
        e.style.sigma[c] = batch_sigma[c];
      }
    }
    e.initialized = true;
  }

  /// Restores an entry verbatim (checkpoint loading).
  void set_entry(std::size_t s, ChannelStyle style, bool initialized) {
    if (style.mu.size() != channels_ || style.sigma.size() != channels_) {
      throw ShapeError("ConfounderSet: entry has wrong channel count");
    }
    entries_.at(s) = Entry{std::move(style), initialized};
  }

  /// FNV-1a over the raw bytes of every entry.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* p, std::size_t n) {
      const auto* c = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= c[i];
        h *= 0x100000001b3ULL;
      }
    };
    for (const auto& e : entries_) {
      mix(e.style.mu.data(), e.style.mu.size() * sizeof(double));
      mix(e.style.sigma.data(), e.style.sigma.size() * sizeof(double));
      const unsigned char flag = e.initialized;
      mix(&flag, 1);
    }
    return h;
  }

 private:
  std::vector<Entry> entries_;
  std::size_t channels_ = 0;
  double tau_ = 0.9;
};

/// Groups augmented-branch samples by the argmax of their raw router output
/// and blends each group's mean channel statistics into its stratum. Reads
/// values only; nothing here is differentiated.
inline void update_confounder_set(ConfounderSet& set, const Tensor& expert_features,
                                  std::span<const GatingDecision> decisions) {
  const auto d = detail::feature_dims("update_confounder_set", expert_features);
  if (decisions.size() != d.batch) throw ShapeError("update_confounder_set: decision count mismatch");
  if (d.batch == 0) throw ContractError("update_confounder_set: empty batch");
  if (d.channels != set.channels()) throw ShapeError("update_confounder_set: channel count mismatch");
  const std::size_t n = set.size(), channels = d.channels, plane = d.spatial;
  std::vector<double> mu_sum(n * channels, 0.0), sigma_sum(n * channels, 0.0);
  std::vector<std::size_t> count(n, 0);
  const double* x = expert_features.values().data();
  for (std::size_t b = 0; b < d.batch; ++b) {
    const std::size_t s = decisions[b].argmax_expert;
    if (s >= n) throw ShapeError("update_confounder_set: expert index out of range");
    ++count[s];
    for (std::size_t c = 0; c < channels; ++c) {
      const double* p = x + (b * channels + c) * plane;
      double m = 0.0;
      for (std::size_t i = 0; i < plane; ++i) m += p[i];
      m /= static_cast<double>(plane);
      double v = 0.0;
      for (std::size_t i = 0; i < plane; ++i) v += (p[i] - m) * (p[i] - m);
      mu_sum[s * channels + c] += m;
      sigma_sum[s * channels + c] += std::sqrt(v / static_cast<double>(plane));
    }
  }
  std::vector<double> mu(channels), sigma(channels);
  for (std::size_t s = 0; s < n; ++s) {
    if (count[s] == 0) continue;
    const double inv = 1.0 / static_cast<double>(count[s]);
    for (std::size_t c = 0; c < channels; ++c) {
      mu[c] = mu_sum[s * channels + c] * inv;
      sigma[c] = sigma_sum[s * channels + c] * inv;
    }
    set.blend(s, mu, sigma);
  }
}

}  // namespace sdcl
