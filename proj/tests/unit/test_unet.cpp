#include <gtest/gtest.h>

#include "reference.hpp"
#include "ulcerforge/adam.hpp"
#include "ulcerforge/error.hpp"
#include "ulcerforge/gradcheck.hpp"
#include "ulcerforge/ops.hpp"
#include "ulcerforge/rng.hpp"
#include "ulcerforge/unet.hpp"

using namespace ulcerforge;

namespace {

// The two-level configuration whose parameter table is in docs/architecture.md.
UNetConfig docs_config() {
  UNetConfig c;
  c.base_channels = 8;
  c.channel_multipliers = {1, 2};
  c.attention_levels = {1};
  c.time_embed_dim = 32;
  c.groups_for_norm = 4;
  c.res_blocks = 2;
  c.image_size = 8;
  return c;
}

std::vector<UNetConfig> config_matrix() {
  std::vector<UNetConfig> out;
  out.push_back(docs_config());
  UNetConfig rgb = docs_config();
  rgb.in_channels = 3;
  rgb.res_blocks = 1;
  rgb.image_size = 16;
  out.push_back(rgb);
  UNetConfig three;
  three.base_channels = 8;
  three.channel_multipliers = {1, 2, 2};
  three.attention_levels = {0, 2};
  three.attention_heads = 2;
  three.time_embed_dim = 16;
  three.res_blocks = 1;
  three.image_size = 8;
  out.push_back(three);
  UNetConfig single;
  single.base_channels = 4;
  single.channel_multipliers = {1};
  single.attention_levels = {};
  single.groups_for_norm = 2;
  single.res_blocks = 1;
  single.image_size = 5;
  out.push_back(single);
  return out;
}

}  // namespace

TEST(Denoiser, DocumentedParameterCount) {
  const auto params = init_denoiser(docs_config(), 1);
  EXPECT_EQ(params.parameter_count(), 39417u);
  for (const auto& c : config_matrix())
    EXPECT_EQ(init_denoiser(c, 1).parameter_count(), oracle::unet_parameter_count(c));
}

TEST(Denoiser, SeededInitIsBitwiseIdentical) {
  const auto a = init_denoiser(docs_config(), 42), b = init_denoiser(docs_config(), 42);
  const auto c = init_denoiser(docs_config(), 43);
  bool differs = false;
  for (const auto& [name, t] : a.tensors) {
    const auto& u = b.at(name);
    ASSERT_EQ(t.shape(), u.shape());
    EXPECT_TRUE(std::equal(t.data().begin(), t.data().end(), u.data().begin())) << name;
    differs |= !std::equal(t.data().begin(), t.data().end(), c.at(name).data().begin());
  }
  EXPECT_TRUE(differs);
}

TEST(Denoiser, OutputConvStartsAtZero) {
  const auto p = init_denoiser(docs_config(), 3);
  for (const char* name : {"out.conv.weight", "out.conv.bias"})
    for (float v : p.at(name).data()) EXPECT_EQ(v, 0.0f);
}

TEST(Denoiser, FreshModelPredictsZero) {
  const auto p = init_denoiser(docs_config(), 4);
  Rng rng(5);
  const Tensor out = predict_noise(p, Tensor::randn({3, 1, 8, 8}, rng), std::vector<int>{1, 500, 1000});
  for (float v : out.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Denoiser, OutputShapeMatchesInput) {
  Rng rng(6);
  for (const auto& c : config_matrix()) {
    const auto p = init_denoiser(c, 7);
    const auto s = static_cast<std::size_t>(c.image_size);
    const Shape shape{2, static_cast<std::size_t>(c.in_channels), s, s};
    EXPECT_EQ(predict_noise(p, Tensor::randn(shape, rng), 10).shape(), shape);
  }
}

TEST(Denoiser, IsPure) {
  auto p = init_denoiser(docs_config(), 8);
  for (auto& v : p.tensors.at("out.conv.weight").data()) v = 0.05f;
  Rng rng(9);
  const Tensor x = Tensor::randn({2, 1, 8, 8}, rng);
  const Tensor a = predict_noise(p, x, std::vector<int>{3, 700});
  const Tensor b = predict_noise(p, x, std::vector<int>{3, 700});
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(Denoiser, InvalidConfigsNameTheConstraint) {
  UNetConfig c = docs_config();
  c.image_size = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = docs_config();
  c.groups_for_norm = 3;
  try {
    init_denoiser(c, 1);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("groups_for_norm"), std::string::npos);
  }
  const auto p = init_denoiser(docs_config(), 1);
  EXPECT_THROW(predict_noise(p, Tensor({1, 1, 5, 5}), 1), ConfigError);
}

TEST(Denoiser, OneStepMakesOutputConvNonzero) {
  auto p = init_denoiser(docs_config(), 10);
  Rng rng(11);
  const Tensor x = Tensor::randn({4, 1, 8, 8}, rng), eps = Tensor::randn({4, 1, 8, 8}, rng);
  Tensor loss = mse_loss(predict_noise(p, x, std::vector<int>{5, 50, 500, 900}), eps);
  ASSERT_GT(loss.item(), 0.0f);
  loss.backward();
  AdamState opt;
  std::vector<Tensor> list = p.list();
  adam_step(list, opt);
  bool nonzero = false;
  for (float v : p.at("out.conv.weight").data()) nonzero |= v != 0.0f;
  EXPECT_TRUE(nonzero);
}

TEST(Denoiser, EveryParameterReceivesGradient) {
  auto p = init_denoiser(docs_config(), 12);
  Rng rng(13);
  for (auto& v : p.tensors.at("out.conv.weight").data()) v = 0.1f * rng.normal();
  const Tensor x = Tensor::randn({2, 1, 8, 8}, rng), eps = Tensor::randn({2, 1, 8, 8}, rng);
  mse_loss(predict_noise(p, x, std::vector<int>{40, 600}), eps).backward();
  for (const auto& [name, t] : p.tensors) {
    ASSERT_TRUE(t.has_grad()) << name;
    bool nonzero = false;
    for (float g : t.grad()) nonzero |= g != 0.0f;
    EXPECT_TRUE(nonzero) << name;
  }
}

TEST(Denoiser, EndToEndGradientCheck) {
  const auto c = docs_config();
  for (std::uint64_t seed : {1u, 2u, 3u}) EXPECT_LE(gradcheck_denoiser(c, seed).rel_error, 1e-2) << seed;
}
