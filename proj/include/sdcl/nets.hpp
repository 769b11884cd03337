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

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sdcl/layers.hpp"
#include "sdcl/sgem.hpp"

namespace sdcl {

/// Expert pool attached at the insertion point.
struct ExpertSpec {
  std::size_t num_experts = 6;
  std::size_t top_k = 4;
  RoutingMode routing = RoutingMode::standard;
  double tau = 0.9;
  // When false the model always uses the first expert (no routing).
  bool enabled = true;
  // Experts compute f + conv(f) instead of conv(f).
  bool residual = true;
  // Every expert starts from a copy of the first expert's weights.
  bool shared_init = true;
};

/// A plain CNN of `stem_blocks + deep_blocks` blocks (conv3x3, ReLU, then
/// 2x2 average pooling on every block but the last), followed by global
/// average pooling and a dense classifier. The expert pool sits after block
/// `expert_point` (1-based); the blocks up to it form the shallow encoder.
struct ModelSpec {
  std::array<std::size_t, 3> input_shape{3, 16, 16};
  std::size_t stem_blocks = 2;
  std::size_t deep_blocks = 2;
  std::size_t expert_point = 1;
  std::vector<std::size_t> channels{16, 32, 32, 64};
  std::size_t num_classes = 4;
  ExpertSpec experts;

  std::size_t block_count() const { return stem_blocks + deep_blocks; }

  void validate() const {
    const std::size_t blocks = block_count();
    if (blocks == 0) throw ConfigError("model.stem_blocks", "network needs at least one block");
    if (channels.empty()) throw ConfigError("model.channels", "must be nonempty");
    if (channels.size() != blocks) {
      throw ConfigError("model.channels", "expected " + std::to_string(blocks) + " widths, got " +
                                              std::to_string(channels.size()));
    }
    for (auto c : channels)
      if (c == 0) throw ConfigError("model.channels", "widths must be positive");
    if (expert_point < 1 || expert_point > blocks) {
      throw ConfigError("model.expert_point", "must lie in [1, " + std::to_string(blocks) + "]");
    }
    if (num_classes < 2) throw ConfigError("model.num_classes", "must be at least 2");
    if (input_shape[0] == 0) throw ConfigError("model.input_shape", "channel count must be positive");
    const std::size_t reduce = std::size_t{1} << (blocks - 1);
    if (input_shape[1] % reduce || input_shape[2] % reduce || input_shape[1] == 0 || input_shape[2] == 0) {
      throw ConfigError("model.input_shape", "height and width must be positive multiples of " +
                                                 std::to_string(reduce));
    }
    if (experts.num_experts < 1) throw ConfigError("sgem.n", "must be at least 1");
    if (experts.top_k < 1 || experts.top_k > experts.num_experts) {
      throw ConfigError("sgem.k", "k=" + std::to_string(experts.top_k) + " must lie in [1, n=" +
                                      std::to_string(experts.num_experts) + "]");
    }
    if (!(experts.tau >= 0.0 && experts.tau < 1.0)) throw ConfigError("sgem.tau", "must lie in [0, 1)");
  }
};

struct Model {
  ModelSpec spec;
  LayerStack shallow;
  std::vector<LayerStack> experts;
  LayerStack router;
  LayerStack deep;
  LayerStack head;
  ConfounderSet confounders;

  std::size_t expert_channels() const { return spec.channels[spec.expert_point - 1]; }

  /// Every trainable tensor, in a fixed order that defines the checkpoint.
  std::vector<NamedTensor> parameters() const {
    std::vector<NamedTensor> out;
    shallow.collect("shallow", out);
    for (std::size_t i = 0; i < experts.size(); ++i) experts[i].collect("expert" + std::to_string(i), out);
    router.collect("router", out);
    deep.collect("deep", out);
    head.collect("head", out);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.numel();
    return n;
  }
};

/// Deterministic He-normal initialization (zero biases) from the "params"
/// stream of `seed`.
inline Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng = make_rng(seed, "params");
  Model model;
  model.spec = spec;
  const std::size_t blocks = spec.block_count();
  std::size_t in = spec.input_shape[0];
  for (std::size_t i = 0; i < blocks; ++i) {
    LayerStack& target = i < spec.expert_point ? model.shallow : model.deep;
    target.push(make_conv3x3(in, spec.channels[i], rng));
    target.push(ReluLayer{});
    if (i + 1 < blocks) target.push(AvgPoolLayer{});
    in = spec.channels[i];
    if (i + 1 == spec.expert_point) {
      for (std::size_t e = 0; e < spec.experts.num_experts; ++e) model.experts.push_back(make_expert(in, rng));
      model.router = make_router(in, spec.experts.num_experts, rng);
    }
  }
  if (spec.experts.shared_init) {
    std::vector<NamedTensor> first;
    model.experts.front().collect("", first);
    for (std::size_t e = 1; e < model.experts.size(); ++e) {
      std::vector<NamedTensor> copy;
      model.experts[e].collect("", copy);
      for (std::size_t i = 0; i < copy.size(); ++i) {
        auto src = first[i].tensor.values();
        std::copy(src.begin(), src.end(), copy[i].tensor.mutable_values().begin());
      }
    }
  }
  model.head.push(GlobalAvgPoolLayer{});
  model.head.push(make_dense(in, spec.num_classes, rng));
  model.confounders = ConfounderSet(spec.experts.num_experts, model.expert_channels(), spec.experts.tau);
  return model;
}

inline void require_input_shape(const Model& model, const Tensor& batch) {
  const auto& s = model.spec.input_shape;
  if (batch.rank() != 4 || batch.dim(1) != s[0] || batch.dim(2) != s[1] || batch.dim(3) != s[2]) {
    throw ShapeError("model expects (B," + std::to_string(s[0]) + "," + std::to_string(s[1]) + "," +
                     std::to_string(s[2]) + ") input, got " + shape_str(batch.shape()));
  }
}

/// Shallow encoder -> expert mixture -> deep encoder -> head, from already
/// encoded shallow features. No confounder update and no fusion.
inline Tensor expert_path(const Model& model, const Tensor& shallow_features) {
  Tensor f_e;
  if (model.spec.experts.enabled) {
    const auto z = style_embedding(shallow_features);
    const auto gating =
        route(model.router, z, model.spec.experts.num_experts, model.spec.experts.top_k, model.spec.experts.routing);
    f_e = moe_forward(model.experts, shallow_features, gating.weights, Branch::augmented,
                      model.spec.experts.residual);
  } else {
    f_e = moe_forward(model.experts, shallow_features, Tensor(), Branch::original, model.spec.experts.residual);
  }
  return f_e;
}

inline Tensor forward_inference(const Model& model, const Tensor& batch) {
  require_input_shape(model, batch);
  const Tensor f = model.shallow.forward(batch.detach());
  return model.head.forward(model.deep.forward(expert_path(model, f)));
}

// ---------------------------------------------------------------------------
// JSON form of the spec

inline const char* to_string(RoutingMode m) { return m == RoutingMode::literal ? "literal" : "default"; }

inline RoutingMode routing_from_string(const std::string& s, const std::string& key = "sgem.routing") {
  if (s == "default" || s == "standard") return RoutingMode::standard;
  if (s == "literal") return RoutingMode::literal;
  throw ConfigError(key, "unknown routing mode '" + s + "'");
}

inline nlohmann::json to_json(const ModelSpec& s) {
  return {{"input_shape", s.input_shape},
          {"stem_blocks", s.stem_blocks},
          {"deep_blocks", s.deep_blocks},
          {"expert_point", s.expert_point},
          {"channels", s.channels},
          {"num_classes", s.num_classes},
          {"experts",
           {{"n", s.experts.num_experts},
            {"k", s.experts.top_k},
            {"routing", to_string(s.experts.routing)},
            {"tau", s.experts.tau},
            {"enabled", s.experts.enabled},
            {"residual", s.experts.residual},
            {"shared_init", s.experts.shared_init}}}};
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.input_shape = j.at("input_shape").get<std::array<std::size_t, 3>>();
  s.stem_blocks = j.at("stem_blocks").get<std::size_t>();
  s.deep_blocks = j.at("deep_blocks").get<std::size_t>();
  s.expert_point = j.at("expert_point").get<std::size_t>();
  s.channels = j.at("channels").get<std::vector<std::size_t>>();
  s.num_classes = j.at("num_classes").get<std::size_t>();
  const auto& e = j.at("experts");
  s.experts.num_experts = e.at("n").get<std::size_t>();
  s.experts.top_k = e.at("k").get<std::size_t>();
  s.experts.routing = routing_from_string(e.at("routing").get<std::string>());
  s.experts.tau = e.at("tau").get<double>();
  s.experts.enabled = e.at("enabled").get<bool>();
  s.experts.residual = e.at("residual").get<bool>();
  s.experts.shared_init = e.at("shared_init").get<bool>();
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoint: "SDCLCKP1", u64 LE header length, JSON header, then a flat
// array of little-endian float64 parameters. The header carries the spec,
// a manifest of (name, shape, offset in elements), and the confounder set.

inline constexpr char kCheckpointMagic[8] = {'S', 'D', 'C', 'L', 'C', 'K', 'P', '1'};

namespace detail {

inline void write_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64_le(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  nlohmann::json header;
  header["format"] = "sdcl-checkpoint";
  header["version"] = 1;
  header["spec"] = to_json(model.spec);
  auto& manifest = header["parameters"] = nlohmann::json::array();
  std::size_t offset = 0;
  const auto params = model.parameters();
  for (const auto& p : params) {
    manifest.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}});
    offset += p.tensor.numel();
  }
  header["total"] = offset;
  auto& conf = header["confounders"] = nlohmann::json::array();
  for (const auto& e : model.confounders.entries()) {
    conf.push_back({{"initialized", e.initialized}, {"mu", e.style.mu}, {"sigma", e.style.sigma}});
  }
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic, 8);
  detail::write_u64_le(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params)
    for (double v : p.tensor.values()) detail::write_u64_le(os, std::bit_cast<std::uint64_t>(v));
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw std::runtime_error(path.string() + " is not an sdcl checkpoint");
  }
  const auto length = detail::read_u64_le(is);
  std::string text(length, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(length))) throw std::runtime_error("checkpoint truncated");
  const auto header = nlohmann::json::parse(text);
  Model model = build_model(model_spec_from_json(header.at("spec")), 0);
  auto params = model.parameters();
  const auto& manifest = header.at("parameters");
  if (manifest.size() != params.size()) throw std::runtime_error("checkpoint manifest does not match spec");
  std::vector<double> flat(header.at("total").get<std::size_t>());
  for (auto& v : flat) v = std::bit_cast<double>(detail::read_u64_le(is));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& m = manifest[i];
    if (m.at("name").get<std::string>() != params[i].name ||
        m.at("shape").get<Shape>() != params[i].tensor.shape()) {
      throw std::runtime_error("checkpoint entry " + m.at("name").get<std::string>() + " does not match spec");
    }
    const auto off = m.at("offset").get<std::size_t>();
    auto dst = params[i].tensor.mutable_values();
    if (off + dst.size() > flat.size()) throw std::runtime_error("checkpoint offsets out of range");
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), dst.size(), dst.begin());
  }
  const auto& conf = header.at("confounders");
  for (std::size_t s = 0; s < conf.size(); ++s) {
    model.confounders.set_entry(
        s, {conf[s].at("mu").get<std::vector<double>>(), conf[s].at("sigma").get<std::vector<double>>()},
        conf[s].at("initialized").get<bool>());
  }
  return model;
}

}  // namespace sdcl
