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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "golden.hpp"
#include "sdcl/synth.hpp"

namespace sdcl {
namespace {

BenchmarkSpec small_spec(double rho, std::size_t styles = 4, std::size_t train = 400) {
  BenchmarkSpec s;
  s.train_correlation = rho;
  s.num_styles = styles;
  s.train_count = train;
  s.test_count = 200;
  s.seed = 17;
  return s;
}

std::uint64_t pixel_checksum(const Tensor& t) {
  std::uint64_t h = 1469598103934665603ULL;
  for (double v : t.values()) h = (h ^ std::bit_cast<std::uint64_t>(v)) * 1099511628211ULL;
  return h;
}

TEST(Synth, FullCorrelationAlwaysMatches) {
  const auto b = generate_benchmark(small_spec(1.0));
  for (std::size_t i = 0; i < b.train.size(); ++i) {
    EXPECT_EQ(static_cast<std::size_t>(b.train.style_ids[i]),
              matched_style(static_cast<std::size_t>(b.train.labels[i]), 4));
  }
}

TEST(Synth, ZeroCorrelationNeverMatches) {
  auto spec = small_spec(0.0, 2);
  spec.num_classes = 2;
  spec.image_size = {3, 16, 16};
  const auto b = generate_benchmark(spec);
  for (std::size_t i = 0; i < b.train.size(); ++i) {
    EXPECT_NE(static_cast<std::size_t>(b.train.style_ids[i]),
              matched_style(static_cast<std::size_t>(b.train.labels[i]), 2));
  }
}

TEST(Synth, MatchRateIsBinomial) {
  auto spec = small_spec(0.95, 4, 4000);
  spec.seed = 3;
  const auto b = generate_benchmark(spec);
  double matches = 0.0;
  for (std::size_t i = 0; i < b.train.size(); ++i) {
    matches += static_cast<std::size_t>(b.train.style_ids[i]) ==
               matched_style(static_cast<std::size_t>(b.train.labels[i]), 4);
  }
  const double se = std::sqrt(0.95 * 0.05 / 4000.0);
  EXPECT_NEAR(matches / 4000.0, 0.95, 3.0 * se);
}

TEST(Synth, ClassBalanceAndRange) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto spec = small_spec(0.95, 4, 1000);
    spec.seed = seed;
    const auto b = generate_benchmark(spec);
    std::vector<double> counts(4, 0.0);
    for (int y : b.train.labels) counts[static_cast<std::size_t>(y)] += 1.0;
    for (double c : counts) EXPECT_NEAR(c, 250.0, 12.5);
    for (double v : b.train.images.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Synth, TestDomainsShareLabelsAndHoldOutStyles) {
  const auto b = generate_benchmark(small_spec(0.95));
  ASSERT_EQ(b.test.size(), 2u);
  EXPECT_EQ(b.test[0].name, "decorrelated");
  EXPECT_EQ(b.test[1].name, "heldout1");
  for (const auto& d : b.test) {
    std::vector<double> counts(4, 0.0);
    for (int y : d.data.labels) counts[static_cast<std::size_t>(y)] += 1.0;
    for (double c : counts) EXPECT_NEAR(c, 50.0, 2.5);
  }
  for (int s : b.test[0].data.style_ids) EXPECT_LT(s, 4);
  for (int s : b.test[1].data.style_ids) EXPECT_EQ(s, 4);
  for (int s : b.train.style_ids) EXPECT_LT(s, 4);
}

TEST(Synth, DecorrelatedDomainIsIndependentOfClass) {
  auto spec = small_spec(0.95);
  spec.test_count = 4000;
  const auto b = generate_benchmark(spec);
  double matches = 0.0;
  for (std::size_t i = 0; i < b.test[0].data.size(); ++i) {
    matches += static_cast<std::size_t>(b.test[0].data.style_ids[i]) ==
               matched_style(static_cast<std::size_t>(b.test[0].data.labels[i]), 4);
  }
  EXPECT_NEAR(matches / 4000.0, 0.25, 3.0 * std::sqrt(0.25 * 0.75 / 4000.0));
}

TEST(Synth, Deterministic) {
  const auto a = generate_benchmark(small_spec(0.9)), b = generate_benchmark(small_spec(0.9));
  EXPECT_EQ(pixel_checksum(a.train.images), pixel_checksum(b.train.images));
  EXPECT_EQ(a.train.labels, b.train.labels);
  EXPECT_EQ(pixel_checksum(a.test[1].data.images), pixel_checksum(b.test[1].data.images));
  auto other = small_spec(0.9);
  other.seed = 18;
  EXPECT_NE(pixel_checksum(generate_benchmark(other).train.images), pixel_checksum(a.train.images));
}

TEST(Synth, TooManyClassesIsConfigError) {
  auto spec = small_spec(0.9);
  spec.num_classes = 7;
  try {
    generate_benchmark(spec);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "benchmark.num_classes");
  }
  spec = small_spec(0.9);
  spec.num_test_domains = 1;
  EXPECT_THROW(generate_benchmark(spec), ConfigError);
}

TEST(Jitter, ZeroStrengthIsIdentity) {
  const auto b = generate_benchmark(small_spec(0.9));
  const auto j = style_jitter(b.train, 0.0, 5);
  EXPECT_EQ(pixel_checksum(j.images), pixel_checksum(b.train.images));
}

TEST(Jitter, PreservesLabelsAndRange) {
  const auto b = generate_benchmark(small_spec(0.9));
  for (double strength : {0.25, 0.5, 1.0}) {
    const auto j = style_jitter(b.train, strength, 9);
    EXPECT_EQ(j.labels, b.train.labels);
    EXPECT_NE(pixel_checksum(j.images), pixel_checksum(b.train.images));
    for (double v : j.images.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Jitter, GoldenChecksum) {
  const auto b = generate_benchmark(small_spec(0.9));
  EXPECT_EQ(pixel_checksum(style_jitter(b.train, 0.5, 1234).images), golden::kJitterChecksum);
}

TEST(Synth, GatherAndExport) {
  const auto b = generate_benchmark(small_spec(0.9, 4, 16));
  const std::vector<std::size_t> idx{3, 0};
  const auto g = gather(b.train, idx);
  EXPECT_EQ(g.labels[0], b.train.labels[3]);
  const std::size_t per = 3 * 16 * 16;
  for (std::size_t i = 0; i < per; ++i) EXPECT_EQ(g.images[per + i], b.train.images[i]);
  const auto dir = std::filesystem::temp_directory_path() / "sdcl_export_test";
  std::filesystem::remove_all(dir);
  export_benchmark(b, dir);
  EXPECT_EQ(std::filesystem::file_size(dir / "train.f32"), 16u * per * 4u);
  EXPECT_TRUE(std::filesystem::exists(dir / "heldout1.f32"));
  std::ifstream is(dir / "manifest.json");
  const auto manifest = nlohmann::json::parse(is);
  EXPECT_EQ(manifest.at("splits").size(), 3u);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace sdcl
