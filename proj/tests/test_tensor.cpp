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
#include <vector>

#include "sdcl/gradcheck.hpp"
#include "sdcl/layers.hpp"
#include "sdcl/ops.hpp"
#include "support.hpp"

namespace sdcl {
namespace {

using testing::random_tensor;

TEST(Tensor, RejectsShapeMismatchAndNonFiniteLeaves) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor({1}, {std::nan("")}), NumericError);
  EXPECT_THROW(Tensor({1}, {INFINITY}), NumericError);
}

TEST(Tensor, NonFiniteResultIsAnError) {
  const Tensor big({1}, {1e308});
  EXPECT_THROW(scale(big, 10.0), NumericError);
}

TEST(Tensor, GradHasDataShape) {
  const Tensor x({2, 3}, std::vector<double>(6, 1.0), true);
  EXPECT_EQ(x.grad().size(), x.numel());
}

TEST(Tensor, ItemNeedsScalar) {
  EXPECT_THROW(Tensor::zeros({2}).item(), ContractError);
  EXPECT_DOUBLE_EQ(Tensor::scalar(4.5).item(), 4.5);
}

TEST(ChannelStats, SingleChannelExample) {
  const auto st = channel_stats(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}));
  EXPECT_NEAR(st.mu[0], 2.5, 1e-12);
  EXPECT_NEAR(st.sigma[0], std::sqrt(1.25), 1e-12);
  EXPECT_NEAR(st.sigma[0], 1.118034, 1e-6);
}

TEST(ChannelStats, ConstantMap) {
  const auto st = channel_stats(Tensor({1, 1, 3, 3}, std::vector<double>(9, -2.5)));
  EXPECT_DOUBLE_EQ(st.mu[0], -2.5);
  EXPECT_DOUBLE_EQ(st.sigma[0], 0.0);
}

TEST(ChannelStats, MeanGradientIsUniform) {
  Tensor x({1, 1, 2, 3}, {1, 5, -2, 0, 3, 7}, true);
  backward(sum(channel_mean(x)));
  for (double g : x.grad()) EXPECT_NEAR(g, 1.0 / 6.0, 1e-15);
}

TEST(ChannelStats, AffineEquivariance) {
  Rng rng = make_rng(11, "test");
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor({2, 3, 4, 4}, rng);
    const double a = 0.1 + 3.0 * uniform01(rng), b = 4.0 * standard_normal(rng);
    const auto s0 = channel_stats(x);
    const auto s1 = channel_stats(Tensor(x.shape(), [&] {
      std::vector<double> v(x.values().begin(), x.values().end());
      for (auto& e : v) e = a * e + b;
      return v;
    }()));
    for (std::size_t i = 0; i < s0.mu.numel(); ++i) {
      EXPECT_NEAR(s1.mu[i], a * s0.mu[i] + b, 1e-9);
      EXPECT_NEAR(s1.sigma[i], a * s0.sigma[i], 1e-9);
    }
  }
}

TEST(Softmax, Examples) {
  const auto p = softmax(Tensor({2}, {0, 0}));
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
  // Hand evaluation: e^k / (e^2 + e^1 + e^0 + e^-1).
  const double z = std::exp(2.0) + std::exp(1.0) + 1.0 + std::exp(-1.0);
  const auto q = softmax(Tensor({4}, {2, 1, 0, -1}));
  const double expected[] = {0.643914, 0.236883, 0.087144, 0.032059};
  for (int i = 0; i < 4; ++i) {
    EXPECT_NEAR(q[i], std::exp(2.0 - i) / z, 1e-15);
    EXPECT_NEAR(q[i], expected[i], 1e-6);
  }
}

TEST(Softmax, ProbabilityVectorAndShiftInvariance) {
  Rng rng = make_rng(3, "test");
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor v = random_tensor({7}, rng, 5.0);
    const double c = 10.0 * standard_normal(rng);
    std::vector<double> shifted(v.values().begin(), v.values().end());
    for (auto& e : shifted) e += c;
    const auto p = softmax(v), q = softmax(Tensor({7}, shifted));
    double total = 0.0;
    for (std::size_t i = 0; i < 7; ++i) {
      EXPECT_GE(p[i], 0.0);
      EXPECT_NEAR(p[i], q[i], 1e-12);
      total += p[i];
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(Layers, IdentityConvKernel) {
  std::vector<double> w(9, 0.0);
  w[4] = 1.0;
  Rng rng = make_rng(1, "test");
  const Tensor x = random_tensor({2, 1, 5, 4}, rng);
  const Tensor y = apply_layer(Conv3x3Layer{Tensor({1, 1, 3, 3}, w), Tensor({1}, {0.0})}, x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], x[i]);
}

TEST(Layers, ConvMatchesDirectLoop) {
  Rng rng = make_rng(2, "test");
  const Tensor x = random_tensor({2, 3, 5, 6}, rng), w = random_tensor({4, 3, 3, 3}, rng),
               b = random_tensor({4}, rng);
  const Tensor y = conv3x3(x, w, b);
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 4; ++o)
      for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 6; ++c) {
          double acc = b[o];
          for (std::size_t i = 0; i < 3; ++i)
            for (int dr = -1; dr <= 1; ++dr)
              for (int dc = -1; dc <= 1; ++dc) {
                const int rr = r + dr, cc = c + dc;
                if (rr < 0 || rr >= 5 || cc < 0 || cc >= 6) continue;
                acc += w[((o * 3 + i) * 3 + static_cast<std::size_t>(dr + 1)) * 3 + static_cast<std::size_t>(dc + 1)] *
                       x[((n * 3 + i) * 5 + static_cast<std::size_t>(rr)) * 6 + static_cast<std::size_t>(cc)];
              }
          EXPECT_NEAR(y[((n * 4 + o) * 5 + static_cast<std::size_t>(r)) * 6 + static_cast<std::size_t>(c)], acc, 1e-12);
        }
}

TEST(Layers, DenseExample) {
  const Tensor y = apply_layer(DenseLayer{Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2}, {0, 0})}, Tensor({1, 2}, {1, 1}));
  EXPECT_DOUBLE_EQ(y[0], 3.0);
  EXPECT_DOUBLE_EQ(y[1], 7.0);
}

TEST(Layers, ReluExample) {
  const Tensor y = relu(Tensor({3}, {-1, 0, 2}));
  EXPECT_DOUBLE_EQ(y[0], 0.0);
  EXPECT_DOUBLE_EQ(y[1], 0.0);
  EXPECT_DOUBLE_EQ(y[2], 2.0);
}

TEST(Layers, AvgPoolRejectsOddSizes) { EXPECT_THROW(avg_pool2(Tensor::zeros({1, 1, 3, 4})), ShapeError); }

TEST(Backward, Square) {
  Tensor x = Tensor::scalar(3.0, true);
  backward(mul(x, x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, DisconnectedLeafHasZeroGrad) {
  Tensor x = Tensor::scalar(3.0, true), y = Tensor::scalar(2.0, true);
  backward(scale(x, 2.0));
  EXPECT_DOUBLE_EQ(y.grad()[0], 0.0);
}

TEST(Backward, RequiresScalarLoss) { EXPECT_THROW(backward(Tensor::zeros({2}, true)), ContractError); }

TEST(Backward, SharedSubexpressionAccumulates) {
  Tensor x = Tensor::scalar(2.0, true);
  const Tensor y = mul(x, x);
  backward(add(y, y));  // 2 x^2
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
}

TEST(Backward, CompositionMatchesFiniteDifferences) {
  Rng rng = make_rng(5, "test");
  Tensor w = random_tensor({4, 3}, rng, 1.0, true), b = random_tensor({4}, rng, 1.0, true);
  const Tensor x = random_tensor({5, 3}, rng);
  const std::vector<int> labels{0, 3, 1, 2, 3};
  const auto r = grad_check_params(
      "dense-relu-softmax-ce",
      [&] { return cross_entropy(softmax(relu(dense(x, w, b))), labels); }, {w, b}, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Backward, DeterministicGradients) {
  auto run = [] {
    Rng rng = make_rng(9, "test");
    Tensor w = random_tensor({3, 2, 3, 3}, rng, 1.0, true), b = random_tensor({3}, rng, 1.0, true);
    const Tensor x = random_tensor({2, 2, 4, 4}, rng);
    backward(sum(channel_std(relu(conv3x3(x, w, b)))));
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, LinearIsExact) {
  Rng rng = make_rng(4, "test");
  const auto r = grad_check("sum", [](const Tensor& t) { return sum(t); }, random_tensor({3, 4}, rng));
  EXPECT_LT(r.max_rel_error, 1e-10);
}

TEST(GradCheck, ChannelSigma) {
  Rng rng = make_rng(6, "test");
  const auto r = grad_check("sigma", [](const Tensor& t) { return sum(channel_std(t)); },
                            random_tensor({2, 3, 4, 4}, rng), 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(GradCheck, EveryOperationAtTenPoints) {
  for (const auto& c : testing::op_cases()) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto r = c.run(seed);
      EXPECT_LT(r.max_rel_error, 1e-4) << c.name << " seed " << seed;
    }
  }
}

TEST(Ops, CvSquaredExamples) {
  EXPECT_NEAR(cv_squared(Tensor({3}, {1, 1, 1})).item(), 0.0, 1e-15);
  EXPECT_NEAR(cv_squared(Tensor({3}, {3, 0, 0})).item(), 2.0, 1e-12);
  EXPECT_DOUBLE_EQ(cv_squared(Tensor({3}, {0, 0, 0})).item(), 0.0);
}

TEST(Ops, WeightedSumAllowsMissingUnusedInputs) {
  const Tensor a({1, 1, 1, 2}, {1, 2});
  const Tensor y = weighted_sum({a, Tensor()}, Tensor({1, 2}, {1.0, 0.0}));
  EXPECT_DOUBLE_EQ(y[1], 2.0);
  EXPECT_THROW(weighted_sum({a, Tensor()}, Tensor({1, 2}, {0.5, 0.5})), ContractError);
}

TEST(Ops, CrossEntropyValidatesLabels) {
  const std::vector<int> bad{0, 3};
  EXPECT_THROW(cross_entropy(Tensor::zeros({2, 3}), bad), ShapeError);
}

}  // namespace
}  // namespace sdcl
