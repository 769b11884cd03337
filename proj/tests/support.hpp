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

// Helpers shared by the unit tests and the acceptance binary: random
// tensors, the per-op gradient-check registry and the end-to-end step loss
// check on a tiny model.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sdcl/gradcheck.hpp"
#include "sdcl/nets.hpp"
#include "sdcl/ops.hpp"
#include "sdcl/rng.hpp"
#include "sdcl/synth.hpp"
#include "sdcl/trainer.hpp"

namespace sdcl::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = scale * standard_normal(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// Random values kept at least `gap` away from zero so ReLU kinks stay out
/// of the finite-difference stencil.
inline Tensor away_from_zero(Shape shape, Rng& rng, double gap = 0.05) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    const double z = standard_normal(rng);
    x = z >= 0.0 ? z + gap : z - gap;
  }
  return Tensor(std::move(shape), std::move(v));
}

/// Reduces any tensor to a scalar through fixed random weights, so every
/// output coordinate contributes a distinct gradient.
inline Tensor project(const Tensor& y, std::uint64_t seed) {
  Rng rng = make_rng(seed, "projection");
  return sum(mul(y, random_tensor(y.shape(), rng)));
}

struct OpCase {
  std::string name;
  std::function<GradCheckReport(std::uint64_t seed)> run;
};

/// One case per differentiable operation. Multi-input ops are checked with
/// respect to every input at once.
inline std::vector<OpCase> op_cases() {
  std::vector<OpCase> cases;
  auto unary = [&cases](std::string name, Shape shape, std::function<Tensor(const Tensor&)> fn,
                        bool kink_safe = false) {
    cases.push_back({name, [=](std::uint64_t seed) {
                       Rng rng = make_rng(seed, "op-point");
                       const Tensor x = kink_safe ? away_from_zero(shape, rng) : random_tensor(shape, rng);
                       return grad_check(name, [&](const Tensor& t) { return project(fn(t), seed); }, x);
                     }});
  };
  auto multi = [&cases](std::string name, std::vector<Shape> shapes,
                        std::function<Tensor(const std::vector<Tensor>&)> fn) {
    cases.push_back({name, [=](std::uint64_t seed) {
                       Rng rng = make_rng(seed, "op-point");
                       std::vector<Tensor> inputs;
                       for (const auto& s : shapes) inputs.push_back(random_tensor(s, rng, 1.0, true));
                       return grad_check_params(name, [&] { return project(fn(inputs), seed); }, inputs);
                     }});
  };

  multi("add", {{3, 4}, {3, 4}}, [](const auto& in) { return add(in[0], in[1]); });
  multi("sub", {{3, 4}, {3, 4}}, [](const auto& in) { return sub(in[0], in[1]); });
  multi("mul", {{3, 4}, {3, 4}}, [](const auto& in) { return mul(in[0], in[1]); });
  unary("scale", {5}, [](const Tensor& x) { return scale(x, -1.7); });
  unary("relu", {2, 3, 4}, [](const Tensor& x) { return relu(x); }, true);
  unary("sum", {4, 3}, [](const Tensor& x) { return scale(sum(x), 1.3); });
  unary("mean", {4, 3}, [](const Tensor& x) { return scale(mean(x), 1.3); });
  unary("column_sum", {5, 3}, [](const Tensor& x) { return column_sum(x); });
  cases.push_back({"cv_squared", [](std::uint64_t seed) {
                     Rng rng = make_rng(seed, "op-point");
                     std::vector<double> v(5);
                     for (auto& x : v) x = 0.5 + uniform01(rng);  // positive mean, like gate importances
                     return grad_check("cv_squared", [](const Tensor& t) { return cv_squared(t); }, Tensor({5}, v));
                   }});
  unary("softmax_vector", {6}, [](const Tensor& x) { return softmax(x); });
  unary("softmax_rows", {3, 5}, [](const Tensor& x) { return softmax(x); });
  unary("masked_softmax", {2, 4}, [](const Tensor& x) {
    static const std::vector<std::uint8_t> mask{1, 0, 1, 1, 0, 1, 1, 0};
    return masked_softmax(x, mask);
  });
  unary("cross_entropy", {4, 3}, [](const Tensor& x) {
    static const std::vector<int> labels{0, 2, 1, 2};
    return cross_entropy(x, labels);
  });
  multi("dense", {{4, 3}, {5, 3}, {5}}, [](const auto& in) { return dense(in[0], in[1], in[2]); });
  multi("conv3x3", {{2, 2, 4, 5}, {3, 2, 3, 3}, {3}}, [](const auto& in) { return conv3x3(in[0], in[1], in[2]); });
  unary("avg_pool2", {2, 2, 4, 6}, [](const Tensor& x) { return avg_pool2(x); });
  unary("channel_mean", {2, 3, 3, 4}, [](const Tensor& x) { return channel_mean(x); });
  unary("channel_std", {2, 3, 3, 4}, [](const Tensor& x) { return channel_std(x); });
  unary("instance_normalize", {2, 3, 3, 3}, [](const Tensor& x) { return instance_normalize(x); });
  unary("channel_affine", {2, 3, 2, 3}, [](const Tensor& x) {
    static const std::vector<double> s{1.5, -0.5, 2.0}, b{0.1, 0.2, -0.3};
    return channel_affine(x, s, b);
  });
  unary("global_avg_pool", {2, 3, 2, 2}, [](const Tensor& x) { return global_avg_pool(x); });
  multi("concat_cols", {{3, 2}, {3, 4}}, [](const auto& in) { return concat_cols(in[0], in[1]); });
  multi("weighted_sum", {{2, 3, 2, 2}, {2, 3, 2, 2}, {2, 3, 2, 2}, {2, 3}},
        [](const auto& in) { return weighted_sum({in[0], in[1], in[2]}, in[3]); });
  return cases;
}

/// Tiny model used for the end-to-end gradient check and other fast tests.
inline RunConfig mini_config() {
  RunConfig c;
  c.model.input_shape = {3, 4, 4};
  c.model.stem_blocks = 1;
  c.model.deep_blocks = 1;
  c.model.expert_point = 1;
  c.model.channels = {2, 3};
  c.model.num_classes = 2;
  c.benchmark.image_size = {3, 4, 4};
  c.benchmark.num_classes = 2;
  c.benchmark.num_styles = 2;
  c.benchmark.train_count = 64;
  c.benchmark.test_count = 32;
  c.n = 3;
  c.k = 2;
  return c;
}

/// Finite-difference check of the full two-branch step loss with respect to
/// every model parameter. The confounder set is filled once at the starting
/// point and then frozen, so every evaluation sees the same strata.
inline GradCheckReport step_loss_check(std::uint64_t seed, const RunConfig& cfg = mini_config()) {
  Model model = build_model(cfg.resolved_model(), seed);
  Rng rng = make_rng(seed, "step-check");
  const auto& in = cfg.model.input_shape;
  const std::size_t batch = 4;
  std::vector<double> pixels(batch * in[0] * in[1] * in[2]);
  for (auto& p : pixels) p = uniform01(rng);
  LabeledBatch original{Tensor({batch, in[0], in[1], in[2]}, pixels), {0, 1, 1, 0}, {0, 1, 0, 1}};
  const LabeledBatch augmented = style_jitter(original, 0.5, derive_seed(seed, "jitter"));
  StepOptions opt = step_options(cfg);
  const std::uint64_t noise_seed = derive_seed(seed, "noise");
  step_loss(model, original, augmented, opt, noise_seed);  // fills the strata
  opt.update_confounders = false;
  std::vector<Tensor> params;
  for (auto& p : model.parameters()) params.push_back(p.tensor);
  return grad_check_params("step_loss", [&] { return step_loss(model, original, augmented, opt, noise_seed).total; },
                           params);
}

}  // namespace sdcl::testing
