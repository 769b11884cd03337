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

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdcl/bdcl.hpp"
#include "sdcl/nets.hpp"
#include "sdcl/synth.hpp"

// RunConfig and its JSON form. A config file is merged over the defaults
// (unknown keys are rejected), then dotted-path overrides are applied, then
// the result is converted with per-key validation.

namespace sdcl {

enum class OptimizerKind { sgd, adam };
enum class AugLoss { causal, raw };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct RunConfig {
  ModelSpec model;
  BenchmarkSpec benchmark;
  std::size_t n = 6;
  std::size_t k = 4;
  double alpha = 0.7;
  double tau = 0.9;
  bool residual_experts = true;
  bool shared_init = true;
  double lambda = 1.0;
  NoisePolicy noise;
  RoutingMode routing = RoutingMode::standard;
  bool enable_sgem = true;
  bool enable_bdcl = true;
  AugLoss aug_loss = AugLoss::causal;
  double jitter_strength = 0.5;
  OptimizerConfig optimizer;
  std::size_t epochs = 12;
  std::size_t batch_size = 64;
  std::uint64_t seed = 7;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string output_dir = "runs/default";

  /// Model spec with the expert settings of this run folded in.
  ModelSpec resolved_model() const {
    ModelSpec m = model;
    m.experts.num_experts = n;
    m.experts.top_k = k;
    m.experts.routing = routing;
    m.experts.tau = tau;
    m.experts.enabled = enable_sgem;
    m.experts.residual = residual_experts;
    m.experts.shared_init = shared_init;
    return m;
  }

  void validate() const {
    if (n < 1) throw ConfigError("sgem.n", "must be at least 1");
    if (k < 1 || k > n) {
      throw ConfigError("sgem.k", "k=" + std::to_string(k) + " must lie in [1, n=" + std::to_string(n) + "]");
    }
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("bdcl.alpha", "must lie in [0, 1]");
    if (!(tau >= 0.0 && tau < 1.0)) throw ConfigError("sgem.tau", "must lie in [0, 1)");
    if (!(lambda >= 0.0)) throw ConfigError("sgem.lambda", "must be nonnegative");
    if (!(jitter_strength >= 0.0 && jitter_strength <= 1.0)) throw ConfigError("augment.strength", "must lie in [0, 1]");
    if (batch_size < 1) throw ConfigError("batch_size", "must be at least 1");
    if (!(optimizer.lr > 0.0)) throw ConfigError("optimizer.lr", "must be positive");
    noise.validate();
    resolved_model().validate();
    validate_benchmark();
  }

  void validate_benchmark() const {
    sdcl::validate(benchmark);
    if (benchmark.num_classes != model.num_classes) {
      throw ConfigError("model.num_classes", "must equal benchmark.num_classes");
    }
    if (benchmark.image_size != model.input_shape) {
      throw ConfigError("model.input_shape", "must equal benchmark.image_size");
    }
  }
};

// ---------------------------------------------------------------------------

inline const char* to_string(NoiseMode m) {
  switch (m) {
    case NoiseMode::off: return "off";
    case NoiseMode::paper_literal: return "literal";
    case NoiseMode::bounded: return "bounded";
  }
  return "bounded";
}

inline NoiseMode noise_from_string(const std::string& s, const std::string& key = "bdcl.noise.mode") {
  if (s == "off") return NoiseMode::off;
  if (s == "literal" || s == "paper_literal") return NoiseMode::paper_literal;
  if (s == "bounded") return NoiseMode::bounded;
  throw ConfigError(key, "unknown noise mode '" + s + "'");
}

inline const char* to_string(AugLoss a) { return a == AugLoss::raw ? "raw" : "cau"; }

inline AugLoss aug_loss_from_string(const std::string& s, const std::string& key = "bdcl.aug_loss") {
  if (s == "cau") return AugLoss::causal;
  if (s == "raw") return AugLoss::raw;
  throw ConfigError(key, "unknown augmented-loss mode '" + s + "'");
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json model = {{"input_shape", c.model.input_shape}, {"stem_blocks", c.model.stem_blocks},
                          {"deep_blocks", c.model.deep_blocks}, {"expert_point", c.model.expert_point},
                          {"channels", c.model.channels},       {"num_classes", c.model.num_classes}};
  nlohmann::json bench = {{"image_size", c.benchmark.image_size},
                          {"num_classes", c.benchmark.num_classes},
                          {"num_styles", c.benchmark.num_styles},
                          {"train_correlation", c.benchmark.train_correlation},
                          {"num_test_domains", c.benchmark.num_test_domains},
                          {"train_count", c.benchmark.train_count},
                          {"test_count", c.benchmark.test_count}};
  return {{"model", model},
          {"benchmark", bench},
          {"sgem",
           {{"enabled", c.enable_sgem},
            {"n", c.n},
            {"k", c.k},
            {"tau", c.tau},
            {"residual", c.residual_experts},
            {"shared_init", c.shared_init},
            {"lambda", c.lambda},
            {"routing", to_string(c.routing)}}},
          {"bdcl",
           {{"enabled", c.enable_bdcl},
            {"alpha", c.alpha},
            {"aug_loss", to_string(c.aug_loss)},
            {"noise",
             {{"mode", to_string(c.noise.mode)}, {"scale", c.noise.scale}, {"lo", c.noise.lo}, {"hi", c.noise.hi}}}}},
          {"augment", {{"strength", c.jitter_strength}}},
          {"optimizer",
           {{"kind", c.optimizer.kind == OptimizerKind::sgd ? "sgd" : "adam"},
            {"lr", c.optimizer.lr},
            {"momentum", c.optimizer.momentum},
            {"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"eps", c.optimizer.eps}}},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"seeds", c.seeds},
          {"output_dir", c.output_dir}};
}

namespace detail {

// Recursively merges `patch` into `base`; every patched key must already
// exist in base.
inline void merge_known(nlohmann::json& base, const nlohmann::json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ConfigError(prefix.empty() ? "config" : prefix, "expected an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError(key, "unknown configuration key");
    auto& slot = base[it.key()];
    if (slot.is_object()) {
      merge_known(slot, it.value(), key);
    } else {
      slot = it.value();
    }
  }
}

template <class T>
T get_key(const nlohmann::json& root, const std::string& dotted) {
  const nlohmann::json* node = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    const std::string part = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError(dotted, "missing configuration key");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  try {
    if constexpr (std::is_unsigned_v<T> && std::is_integral_v<T>) {
      if (node->is_number_float() || (node->is_number_integer() && node->template get<long long>() < 0)) {
        throw ConfigError(dotted, "expected a nonnegative integer");
      }
    }
    return node->template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(dotted, std::string("wrong type: ") + e.what());
  }
}

}  // namespace detail

/// Applies "a.b.c=value". The value is parsed as JSON when possible and
/// taken as a string otherwise; the path must name an existing key.
inline void apply_override(nlohmann::json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError(path, "unknown configuration key");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw ConfigError(path, "cannot replace a whole section");
  *node = std::move(value);
}

inline RunConfig run_config_from_json(const nlohmann::json& patch) {
  nlohmann::json j = to_json(RunConfig{});
  detail::merge_known(j, patch, "");
  using detail::get_key;
  RunConfig c;
  c.model.input_shape = get_key<std::array<std::size_t, 3>>(j, "model.input_shape");
  c.model.stem_blocks = get_key<std::size_t>(j, "model.stem_blocks");
  c.model.deep_blocks = get_key<std::size_t>(j, "model.deep_blocks");
  c.model.expert_point = get_key<std::size_t>(j, "model.expert_point");
  c.model.channels = get_key<std::vector<std::size_t>>(j, "model.channels");
  c.model.num_classes = get_key<std::size_t>(j, "model.num_classes");
  c.benchmark.image_size = get_key<std::array<std::size_t, 3>>(j, "benchmark.image_size");
  c.benchmark.num_classes = get_key<std::size_t>(j, "benchmark.num_classes");
  c.benchmark.num_styles = get_key<std::size_t>(j, "benchmark.num_styles");
  c.benchmark.train_correlation = get_key<double>(j, "benchmark.train_correlation");
  c.benchmark.num_test_domains = get_key<std::size_t>(j, "benchmark.num_test_domains");
  c.benchmark.train_count = get_key<std::size_t>(j, "benchmark.train_count");
  c.benchmark.test_count = get_key<std::size_t>(j, "benchmark.test_count");
  c.enable_sgem = get_key<bool>(j, "sgem.enabled");
  c.n = get_key<std::size_t>(j, "sgem.n");
  c.k = get_key<std::size_t>(j, "sgem.k");
  c.tau = get_key<double>(j, "sgem.tau");
  c.residual_experts = get_key<bool>(j, "sgem.residual");
  c.shared_init = get_key<bool>(j, "sgem.shared_init");
  c.lambda = get_key<double>(j, "sgem.lambda");
  c.routing = routing_from_string(get_key<std::string>(j, "sgem.routing"));
  c.enable_bdcl = get_key<bool>(j, "bdcl.enabled");
  c.alpha = get_key<double>(j, "bdcl.alpha");
  c.aug_loss = aug_loss_from_string(get_key<std::string>(j, "bdcl.aug_loss"));
  c.noise.mode = noise_from_string(get_key<std::string>(j, "bdcl.noise.mode"));
  c.noise.scale = get_key<double>(j, "bdcl.noise.scale");
  c.noise.lo = get_key<double>(j, "bdcl.noise.lo");
  c.noise.hi = get_key<double>(j, "bdcl.noise.hi");
  c.jitter_strength = get_key<double>(j, "augment.strength");
  const auto kind = get_key<std::string>(j, "optimizer.kind");
  if (kind == "adam") {
    c.optimizer.kind = OptimizerKind::adam;
  } else if (kind == "sgd") {
    c.optimizer.kind = OptimizerKind::sgd;
  } else {
    throw ConfigError("optimizer.kind", "unknown optimizer '" + kind + "'");
  }
  c.optimizer.lr = get_key<double>(j, "optimizer.lr");
  c.optimizer.momentum = get_key<double>(j, "optimizer.momentum");
  c.optimizer.beta1 = get_key<double>(j, "optimizer.beta1");
  c.optimizer.beta2 = get_key<double>(j, "optimizer.beta2");
  c.optimizer.eps = get_key<double>(j, "optimizer.eps");
  c.epochs = get_key<std::size_t>(j, "epochs");
  c.batch_size = get_key<std::size_t>(j, "batch_size");
  c.seed = get_key<std::uint64_t>(j, "seed");
  c.seeds = get_key<std::vector<std::uint64_t>>(j, "seeds");
  c.output_dir = get_key<std::string>(j, "output_dir");
  // SGEM is a prerequisite for fusion; a run without experts never fuses.
  if (!c.enable_sgem) c.enable_bdcl = false;
  c.validate();
  return c;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded()) throw ConfigError(path.string(), "not valid JSON");
  return j;
}

}  // namespace sdcl
