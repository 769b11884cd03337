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

#include <filesystem>

#include "sdcl/bdcl.hpp"
#include "sdcl/nets.hpp"
#include "support.hpp"

namespace sdcl {
namespace {

std::uint64_t parameter_checksum(const Model& m) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : m.parameters())
    for (double v : p.tensor.values()) h = (h ^ std::bit_cast<std::uint64_t>(v)) * 1099511628211ULL;
  return h;
}

TEST(Nets, DefaultForwardShape) {
  const Model m = build_model(ModelSpec{}, 1);
  Rng rng = make_rng(1, "test");
  const Tensor logits = forward_inference(m, testing::random_tensor({8, 3, 16, 16}, rng));
  EXPECT_EQ(logits.shape(), (Shape{8, 4}));
}

TEST(Nets, OutputShapeForEveryExpertPoint) {
  for (std::size_t point = 1; point <= 4; ++point) {
    ModelSpec s;
    s.expert_point = point;
    const Model m = build_model(s, 3);
    EXPECT_EQ(m.expert_channels(), s.channels[point - 1]);
    EXPECT_EQ(forward_inference(m, Tensor::zeros({2, 3, 16, 16})).shape(), (Shape{2, 4}));
  }
}

TEST(Nets, SameSeedSameParameters) {
  EXPECT_EQ(parameter_checksum(build_model(ModelSpec{}, 5)), parameter_checksum(build_model(ModelSpec{}, 5)));
  EXPECT_NE(parameter_checksum(build_model(ModelSpec{}, 5)), parameter_checksum(build_model(ModelSpec{}, 6)));
}

TEST(Nets, SharedInitCopiesFirstExpertOnly) {
  ModelSpec own = ModelSpec{};
  own.experts.shared_init = false;
  const Model shared = build_model(ModelSpec{}, 9), separate = build_model(own, 9);
  const auto a = shared.parameters(), b = separate.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& name = a[i].name;
    const bool later_expert = name.rfind("expert", 0) == 0 && name.rfind("expert0.", 0) != 0;
    if (!later_expert) {
      // Everything outside experts 1..n-1 is drawn from the same stream.
      EXPECT_TRUE(std::equal(a[i].tensor.values().begin(), a[i].tensor.values().end(),
                             b[i].tensor.values().begin()))
          << name;
      continue;
    }
    const auto suffix = name.substr(name.find('.'));
    for (const auto& p : a) {
      if (p.name == "expert0" + suffix) {
        EXPECT_TRUE(std::equal(p.tensor.values().begin(), p.tensor.values().end(), a[i].tensor.values().begin()))
            << name;
      }
    }
  }
}

TEST(Nets, DefaultParameterCountByHand) {
  // conv blocks: 3->16, 16->32, 32->32, 32->64 at 9*in*out + out each.
  const std::size_t convs = (9 * 3 * 16 + 16) + (9 * 16 * 32 + 32) + (9 * 32 * 32 + 32) + (9 * 32 * 64 + 64);
  // six 16->16 experts; router 32->24->6; head 64->4.
  const std::size_t experts = 6 * (9 * 16 * 16 + 16);
  const std::size_t router = (32 * 24 + 24) + (24 * 6 + 6);
  const std::size_t head = 64 * 4 + 4;
  EXPECT_EQ(convs + experts + router + head, 47954u);
  EXPECT_EQ(build_model(ModelSpec{}, 0).parameter_count(), 47954u);
}

TEST(Nets, ZeroBatchGivesIdenticalRows) {
  const Model m = build_model(ModelSpec{}, 2);
  const Tensor logits = forward_inference(m, Tensor::zeros({5, 3, 16, 16}));
  for (std::size_t b = 1; b < 5; ++b)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(logits[b * 4 + k], logits[k]);
}

TEST(Nets, InferenceIsPureAndNeverFuses) {
  Model m = build_model(ModelSpec{}, 4);
  Rng rng = make_rng(2, "test");
  const Tensor x = testing::random_tensor({6, 16, 8, 8}, rng);
  // Give the set real content so a mutation would show.
  std::vector<GatingDecision> decisions(6);
  for (std::size_t i = 0; i < 6; ++i) decisions[i].argmax_expert = i;
  update_confounder_set(m.confounders, x, decisions);
  const auto before = m.confounders.checksum();
  const auto adain_before = adain_counter().load();
  const Tensor batch = testing::random_tensor({4, 3, 16, 16}, rng);
  const Tensor a = forward_inference(m, batch), b = forward_inference(m, batch);
  EXPECT_EQ(std::vector<double>(a.values().begin(), a.values().end()),
            std::vector<double>(b.values().begin(), b.values().end()));
  EXPECT_EQ(m.confounders.checksum(), before);
  EXPECT_EQ(adain_counter().load(), adain_before);
}

TEST(Nets, RejectsWrongInputShape) {
  const Model m = build_model(ModelSpec{}, 1);
  EXPECT_THROW(forward_inference(m, Tensor::zeros({1, 3, 8, 8})), ShapeError);
  EXPECT_THROW(forward_inference(m, Tensor::zeros({3, 16, 16})), ShapeError);
}

TEST(Nets, InvalidSpecsNameTheirKey) {
  auto key_of = [](ModelSpec s) {
    try {
      s.validate();
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string();
  };
  ModelSpec s;
  s.expert_point = 0;
  EXPECT_EQ(key_of(s), "model.expert_point");
  s = {};
  s.expert_point = 5;
  EXPECT_EQ(key_of(s), "model.expert_point");
  s = {};
  s.channels = {16, 32};
  EXPECT_EQ(key_of(s), "model.channels");
  s = {};
  s.num_classes = 1;
  EXPECT_EQ(key_of(s), "model.num_classes");
  s = {};
  s.experts.top_k = 7;
  EXPECT_EQ(key_of(s), "sgem.k");
}

TEST(Nets, CheckpointRoundTrip) {
  Model m = build_model(ModelSpec{}, 8);
  Rng rng = make_rng(3, "test");
  std::vector<GatingDecision> decisions(3);
  decisions[1].argmax_expert = 2;
  update_confounder_set(m.confounders, testing::random_tensor({3, 16, 4, 4}, rng), decisions);
  const auto dir = std::filesystem::temp_directory_path() / "sdcl_ckpt_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(m, dir / "m.bin");
  const Model back = load_checkpoint(dir / "m.bin");
  EXPECT_EQ(parameter_checksum(back), parameter_checksum(m));
  EXPECT_EQ(back.confounders.checksum(), m.confounders.checksum());
  const Tensor x = testing::random_tensor({2, 3, 16, 16}, rng);
  const Tensor a = forward_inference(m, x), b = forward_inference(back, x);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
  std::filesystem::remove_all(dir);
}

TEST(Nets, CheckpointRejectsGarbage) {
  const auto path = std::filesystem::temp_directory_path() / "sdcl_not_a_checkpoint.bin";
  std::ofstream(path) << "hello";
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
  std::filesystem::remove(path);
}

TEST(Nets, SpecJsonRoundTrip) {
  ModelSpec s;
  s.expert_point = 3;
  s.experts.routing = RoutingMode::literal;
  s.experts.residual = false;
  s.experts.shared_init = false;
  const ModelSpec back = model_spec_from_json(to_json(s));
  EXPECT_EQ(to_json(back), to_json(s));
}

}  // namespace
}  // namespace sdcl
