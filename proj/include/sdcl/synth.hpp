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
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdcl/rng.hpp"
#include "sdcl/tensor.hpp"

// Style-confounded image classification benchmark. Class is carried by a
// shape motif; style is a global photometric regime (palette, background
// texture, contrast curve, grain) that is correlated with class in training
// and independent of it at test time.

namespace sdcl {

struct BenchmarkSpec {
  std::array<std::size_t, 3> image_size{3, 16, 16};
  std::size_t num_classes = 4;
  std::size_t num_styles = 4;
  double train_correlation = 0.95;
  std::size_t num_test_domains = 2;
  std::size_t train_count = 4000;
  std::size_t test_count = 1000;
  std::uint64_t seed = 0;
};

struct LabeledBatch {
  Tensor images;  // (B, 3, H, W), values in [0, 1]
  std::vector<int> labels;
  std::vector<int> style_ids;  // diagnostics only

  std::size_t size() const { return labels.size(); }
};

struct TestDomain {
  std::string name;
  LabeledBatch data;
};

struct Benchmark {
  LabeledBatch train;
  std::vector<TestDomain> test;
};

enum class Motif { bars, cross, blob, ring, diagonal, square };
inline constexpr std::size_t kMotifCount = 6;

/// Photometric regime of one style id.
struct StyleParams {
  std::array<double, 3> foreground;
  std::array<double, 3> background;
  double texture_frequency;  // cycles per image width
  double texture_angle;      // radians
  double texture_amplitude;
  double gamma;
  double grain;
};

inline StyleParams style_params(std::size_t id) {
  // Ids 0-3 are the default seen styles, 4-5 the default held-out ones.
  static const StyleParams table[] = {
      {{0.95, 0.85, 0.30}, {0.55, 0.15, 0.10}, 1.0, 0.0, 0.20, 1.0, 0.02},
      {{0.40, 0.90, 1.00}, {0.05, 0.15, 0.45}, 3.0, 0.8, 0.30, 0.8, 0.00},
      {{0.85, 1.00, 0.60}, {0.10, 0.40, 0.10}, 2.0, 1.57, 0.40, 1.3, 0.05},
      {{0.90, 0.90, 0.90}, {0.35, 0.30, 0.40}, 5.0, 2.3, 0.25, 1.6, 0.08},
      {{1.00, 0.55, 0.90}, {0.30, 0.05, 0.35}, 4.0, 0.4, 0.35, 0.7, 0.04},
      {{0.70, 0.75, 0.95}, {0.40, 0.25, 0.05}, 1.5, 1.1, 0.30, 1.2, 0.06},
  };
  if (id < std::size(table)) return table[id];
  Rng rng = make_rng(id, "style-params");
  StyleParams p{};
  for (auto& c : p.background) c = 0.05 + 0.45 * uniform01(rng);
  for (std::size_t c = 0; c < 3; ++c) p.foreground[c] = std::min(1.0, p.background[c] + 0.35 + 0.4 * uniform01(rng));
  p.texture_frequency = 1.0 + 5.0 * uniform01(rng);
  p.texture_angle = 3.14159 * uniform01(rng);
  p.texture_amplitude = 0.15 + 0.3 * uniform01(rng);
  p.gamma = std::exp(0.5 * (2.0 * uniform01(rng) - 1.0));
  p.grain = 0.08 * uniform01(rng);
  return p;
}

inline std::size_t matched_style(std::size_t label, std::size_t num_styles) { return label % num_styles; }

namespace detail {

inline bool motif_covers(Motif motif, double u, double v) {
  const double r = std::sqrt(u * u + v * v);
  switch (motif) {
    case Motif::bars: return std::abs(v) < 1.0 && std::abs(std::abs(u) - 0.55) < 0.22;
    case Motif::cross: return (std::abs(u) < 0.25 && std::abs(v) < 1.0) || (std::abs(v) < 0.25 && std::abs(u) < 1.0);
    case Motif::blob: return r < 0.85;
    case Motif::ring: return r > 0.6 && r < 1.0;
    case Motif::diagonal: return std::abs(u - v) < 0.4 && std::abs(u) < 1.0 && std::abs(v) < 1.0;
    case Motif::square: return std::max(std::abs(u), std::abs(v)) > 0.62 && std::max(std::abs(u), std::abs(v)) < 1.0;
  }
  return false;
}

/// Renders one image into dst (3*H*W values) from its own RNG stream.
inline void render_sample(double* dst, std::size_t label, std::size_t style, std::size_t h, std::size_t w, Rng& rng) {
  const StyleParams sp = style_params(style);
  const double size = static_cast<double>(std::min(h, w));
  const double radius = size * (0.26 + 0.12 * uniform01(rng));
  const double cx = radius + (static_cast<double>(w) - 2.0 * radius) * uniform01(rng);
  const double cy = radius + (static_cast<double>(h) - 2.0 * radius) * uniform01(rng);
  const double phase = 6.283185307179586 * uniform01(rng);
  std::array<double, 3> fg, bg;
  for (std::size_t c = 0; c < 3; ++c) {
    fg[c] = std::clamp(sp.foreground[c] + 0.05 * (2.0 * uniform01(rng) - 1.0), 0.0, 1.0);
    bg[c] = std::clamp(sp.background[c] + 0.05 * (2.0 * uniform01(rng) - 1.0), 0.0, 1.0);
  }
  const double ca = std::cos(sp.texture_angle), sa = std::sin(sp.texture_angle);
  const double k = 6.283185307179586 * sp.texture_frequency / static_cast<double>(w);
  const std::size_t plane = h * w;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const bool on = motif_covers(static_cast<Motif>(label), (px - cx) / radius, (py - cy) / radius);
      const double tex = 1.0 - sp.texture_amplitude +
                         sp.texture_amplitude * (0.5 + 0.5 * std::sin(k * (px * ca + py * sa) + phase));
      for (std::size_t c = 0; c < 3; ++c) {
        double v = on ? fg[c] : bg[c] * tex;
        v = std::pow(std::clamp(v, 0.0, 1.0), sp.gamma);
        v += sp.grain * standard_normal(rng);
        dst[c * plane + y * w + x] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
}

// Exactly balanced labels in a seeded order.
inline std::vector<int> balanced_labels(std::size_t count, std::size_t classes, Rng& rng) {
  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = static_cast<int>(i % classes);
  shuffle(labels.begin(), labels.end(), rng);
  return labels;
}

template <class StylePick>
LabeledBatch render_split(const BenchmarkSpec& spec, std::string_view stream, std::size_t count, StylePick pick) {
  const std::size_t h = spec.image_size[1], w = spec.image_size[2], per = 3 * h * w;
  Rng order = make_rng(spec.seed, std::string(stream) + "/labels");
  LabeledBatch out;
  out.labels = balanced_labels(count, spec.num_classes, order);
  out.style_ids.resize(count);
  std::vector<double> pixels(count * per);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = make_rng(spec.seed, stream, i);
    const auto style = pick(static_cast<std::size_t>(out.labels[i]), rng);
    out.style_ids[i] = static_cast<int>(style);
    render_sample(pixels.data() + i * per, static_cast<std::size_t>(out.labels[i]), style, h, w, rng);
  }
  out.images = Tensor({count, 3, h, w}, std::move(pixels));
  return out;
}

}  // namespace detail

inline void validate(const BenchmarkSpec& spec) {
  if (spec.image_size[0] != 3) throw ConfigError("benchmark.image_size", "images must have 3 channels");
  if (spec.image_size[1] < 4 || spec.image_size[2] < 4) throw ConfigError("benchmark.image_size", "images must be at least 4x4");
  if (spec.num_classes < 2) throw ConfigError("benchmark.num_classes", "must be at least 2");
  if (spec.num_classes > kMotifCount) {
    throw ConfigError("benchmark.num_classes", "only " + std::to_string(kMotifCount) + " shape motifs are available");
  }
  if (spec.num_styles < 2) throw ConfigError("benchmark.num_styles", "must be at least 2");
  if (!(spec.train_correlation >= 0.0 && spec.train_correlation <= 1.0)) {
    throw ConfigError("benchmark.train_correlation", "must lie in [0, 1]");
  }
  if (spec.num_test_domains < 2) {
    throw ConfigError("benchmark.num_test_domains", "needs the decorrelated domain plus at least one held-out style");
  }
  if (spec.train_count < 1) throw ConfigError("benchmark.train_count", "must be at least 1");
  if (spec.test_count < 1) throw ConfigError("benchmark.test_count", "must be at least 1");
}

/// Train split with style = class-matched style with probability rho (else
/// uniform over the other seen styles). Test domain 0 ("decorrelated") draws
/// seen styles uniformly; domains 1.. each use one style never seen in
/// training.
inline Benchmark generate_benchmark(const BenchmarkSpec& spec) {
  validate(spec);
  const std::size_t styles = spec.num_styles;
  Benchmark bench;
  bench.train = detail::render_split(spec, "train", spec.train_count, [&](std::size_t label, Rng& rng) {
    const std::size_t match = matched_style(label, styles);
    if (uniform01(rng) < spec.train_correlation) return match;
    const std::size_t other = uniform_index(rng, styles - 1);
    return other < match ? other : other + 1;
  });
  bench.test.push_back({"decorrelated", detail::render_split(spec, "test/decorrelated", spec.test_count,
                                                             [&](std::size_t, Rng& rng) {
                                                               return static_cast<std::size_t>(uniform_index(rng, styles));
                                                             })});
  for (std::size_t d = 1; d < spec.num_test_domains; ++d) {
    const std::size_t style = styles + d - 1;
    bench.test.push_back({"heldout" + std::to_string(d),
                          detail::render_split(spec, "test/heldout" + std::to_string(d), spec.test_count,
                                               [style](std::size_t, Rng&) { return style; })});
  }
  return bench;
}

/// Photometric jitter per sample: channel gain/offset tint, gamma, grain,
/// each scaled by strength; clamps to [0, 1]. strength 0 is the identity.
inline LabeledBatch style_jitter(const LabeledBatch& batch, double strength, std::uint64_t seed) {
  if (strength == 0.0) return batch;
  const auto& shape = batch.images.shape();
  const std::size_t count = shape.at(0), channels = shape.at(1), plane = shape.at(2) * shape.at(3);
  std::vector<double> pixels(batch.images.values().begin(), batch.images.values().end());
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = make_rng(seed, "jitter", i);
    const double gamma = std::exp(0.5 * strength * standard_normal(rng));
    for (std::size_t c = 0; c < channels; ++c) {
      const double gain = 1.0 + 0.6 * strength * (2.0 * uniform01(rng) - 1.0);
      const double offset = 0.3 * strength * (2.0 * uniform01(rng) - 1.0);
      double* p = pixels.data() + (i * channels + c) * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        const double tinted = std::clamp(p[j] * gain + offset, 0.0, 1.0);
        p[j] = std::clamp(std::pow(tinted, gamma) + 0.05 * strength * standard_normal(rng), 0.0, 1.0);
      }
    }
  }
  LabeledBatch out;
  out.images = Tensor(shape, std::move(pixels));
  out.labels = batch.labels;
  out.style_ids = batch.style_ids;
  return out;
}

/// Rows `indices` of a batch, in that order.
inline LabeledBatch gather(const LabeledBatch& batch, std::span<const std::size_t> indices) {
  const auto& shape = batch.images.shape();
  const std::size_t per = batch.images.numel() / shape.at(0);
  std::vector<double> pixels(indices.size() * per);
  LabeledBatch out;
  out.labels.reserve(indices.size());
  out.style_ids.reserve(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(batch.images.values().begin() + static_cast<std::ptrdiff_t>(indices[i] * per), per,
                pixels.begin() + static_cast<std::ptrdiff_t>(i * per));
    out.labels.push_back(batch.labels.at(indices[i]));
    out.style_ids.push_back(batch.style_ids.at(indices[i]));
  }
  Shape s = shape;
  s[0] = indices.size();
  out.images = Tensor(std::move(s), std::move(pixels));
  return out;
}

/// Raw little-endian float32 image arrays plus manifest.json.
inline void export_benchmark(const Benchmark& bench, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["dtype"] = "float32-le";
  manifest["layout"] = "NCHW";
  auto& splits = manifest["splits"] = nlohmann::json::array();
  auto dump = [&](const std::string& name, const LabeledBatch& b) {
    const std::string file = name + ".f32";
    std::ofstream os(dir / file, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + (dir / file).string());
    for (double v : b.images.values()) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      const unsigned char bytes[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                      static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
      os.write(reinterpret_cast<const char*>(bytes), 4);
    }
    splits.push_back({{"name", name}, {"file", file}, {"shape", b.images.shape()}, {"labels", b.labels},
                      {"style_ids", b.style_ids}});
  };
  dump("train", bench.train);
  for (const auto& d : bench.test) dump(d.name, d.data);
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
}

}  // namespace sdcl
