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

#include <cmath>
#include <string>
#include <variant>
#include <vector>

#include "sdcl/ops.hpp"
#include "sdcl/rng.hpp"

namespace sdcl {

struct DenseLayer {
  Tensor weight;  // (out, in)
  Tensor bias;    // (out)
};

struct Conv3x3Layer {
  Tensor weight;  // (out, in, 3, 3)
  Tensor bias;    // (out)
};

struct ReluLayer {};
struct AvgPoolLayer {};
struct GlobalAvgPoolLayer {};

using Layer = std::variant<DenseLayer, Conv3x3Layer, ReluLayer, AvgPoolLayer, GlobalAvgPoolLayer>;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

inline Tensor apply_layer(const Layer& layer, const Tensor& input) {
  struct Visitor {
    const Tensor& x;
    Tensor operator()(const DenseLayer& l) const { return dense(x, l.weight, l.bias); }
    Tensor operator()(const Conv3x3Layer& l) const { return conv3x3(x, l.weight, l.bias); }
    Tensor operator()(const ReluLayer&) const { return relu(x); }
    Tensor operator()(const AvgPoolLayer&) const { return avg_pool2(x); }
    Tensor operator()(const GlobalAvgPoolLayer&) const { return global_avg_pool(x); }
  };
  return std::visit(Visitor{input}, layer);
}

namespace detail {

inline Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = stddev * standard_normal(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace detail

inline DenseLayer make_dense(std::size_t in, std::size_t out, Rng& rng) {
  return {detail::he_normal({out, in}, in, rng), Tensor::zeros({out}, true)};
}

inline Conv3x3Layer make_conv3x3(std::size_t in, std::size_t out, Rng& rng) {
  return {detail::he_normal({out, in, 3, 3}, in * 9, rng), Tensor::zeros({out}, true)};
}

/// Sequential composition of layers.
class LayerStack {
 public:
  LayerStack() = default;
  explicit LayerStack(std::vector<Layer> layers) : layers_(std::move(layers)) {}

  void push(Layer layer) { layers_.push_back(std::move(layer)); }
  bool empty() const { return layers_.empty(); }
  std::size_t size() const { return layers_.size(); }
  const std::vector<Layer>& layers() const { return layers_; }

  Tensor forward(Tensor x) const {
    for (const auto& layer : layers_) x = apply_layer(layer, x);
    return x;
  }

  /// Trainable tensors named "<prefix>.<layer index>.{weight,bias}".
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string base = prefix + "." + std::to_string(i);
      if (const auto* d = std::get_if<DenseLayer>(&layers_[i])) {
        out.push_back({base + ".weight", d->weight});
        out.push_back({base + ".bias", d->bias});
      } else if (const auto* c = std::get_if<Conv3x3Layer>(&layers_[i])) {
        out.push_back({base + ".weight", c->weight});
        out.push_back({base + ".bias", c->bias});
      }
    }
  }

 private:
  std::vector<Layer> layers_;
};

}  // namespace sdcl
