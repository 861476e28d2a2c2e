#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "op_cases.hpp"
#include "reference.hpp"
#include "ulcerforge/adam.hpp"
#include "ulcerforge/error.hpp"
#include "ulcerforge/ops.hpp"
#include "ulcerforge/rng.hpp"

using namespace ulcerforge;

namespace {

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Conv2d, ScalarKernelScales) {
  Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor k({1, 1, 1, 1}, {2});
  EXPECT_EQ(values(conv2d(x, k, Tensor(), 1, 0)), (std::vector<float>{2, 4, 6, 8}));
}

TEST(Conv2d, OnesKernelSumsWindow) {
  Tensor out = conv2d(Tensor({1, 1, 3, 3}, 1.0f), Tensor({1, 1, 2, 2}, 1.0f), Tensor(), 1, 0);
  EXPECT_EQ(out.shape(), (Shape{1, 1, 2, 2}));
  for (float v : out.data()) EXPECT_EQ(v, 4.0f);
}

TEST(Conv2d, OutputSizeFloors) {
  Tensor out = conv2d(Tensor({1, 1, 5, 4}), Tensor({2, 1, 3, 3}), Tensor(), 2, 1);
  EXPECT_EQ(out.shape(), (Shape{1, 2, 3, 2}));
}

TEST(Conv2d, ChannelMismatchNamesAxis) {
  try {
    conv2d(Tensor({1, 2, 3, 3}), Tensor({1, 3, 2, 2}), Tensor(), 1, 0);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("axis 1"), std::string::npos) << e.what();
  }
}

TEST(Conv2d, KernelLargerThanPaddedInput) {
  EXPECT_THROW(conv2d(Tensor({1, 1, 2, 2}), Tensor({1, 1, 3, 3}), Tensor(), 1, 0), DimensionError);
  EXPECT_THROW(conv2d(Tensor({1, 1, 2, 2}), Tensor({1, 1, 1, 1}), Tensor(), 0, 0), Error);
}

TEST(Conv2d, SumGradientMatchesReference) {
  const auto x = oracle::random_array({1, 2, 4, 4}, 1), k = oracle::random_array({3, 2, 3, 3}, 2);
  std::vector<Tensor> ts{oracle::to_tensor(x).set_requires_grad(true), oracle::to_tensor(k).set_requires_grad(true)};
  sum(conv2d(ts[0], ts[1], Tensor(), 1, 1)).backward();
  const oracle::Fn ref = [](const auto& v) { return oracle::conv2d(v[0], v[1], oracle::Array{}, 1, 1); };
  const oracle::Array out = ref({x, k});
  const auto numeric = oracle::numeric_gradient(ref, {x, k}, std::vector<double>(out.size(), 1.0));
  std::vector<std::vector<double>> analytic;
  for (auto& t : ts) analytic.emplace_back(t.grad().begin(), t.grad().end());
  EXPECT_LE(oracle::relative_error(analytic, numeric), 1e-3);
}

TEST(Ops, EveryOpMatchesDoubleReference) {
  for (std::uint64_t seed : {1, 2, 3})
    for (const auto& c : oracle::op_cases(seed)) {
      const auto r = oracle::check_op(c, seed);
      EXPECT_TRUE(r.shape_ok) << c.name;
      EXPECT_LE(r.forward_error, 1e-4) << c.name;
      EXPECT_LE(r.gradient_error, 1e-3) << c.name << " seed " << seed;
    }
}

TEST(Attention, SinglePositionIsValueProjection) {
  Rng rng(4);
  const Tensor x = Tensor::randn({2, 4, 1, 1}, rng);
  const Tensor wq = Tensor::randn({4, 4}, rng), wk = Tensor::randn({4, 4}, rng), wv = Tensor::randn({4, 4}, rng);
  Tensor eye({4, 4});
  for (int i = 0; i < 4; ++i) eye.data()[i * 5] = 1.0f;
  const Tensor out = self_attention(x, wq, wk, wv, eye);
  const Tensor expect = linear(Tensor({2, 4}, values(x)), wv, Tensor());
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out.data()[i], expect.data()[i], 1e-5);
}

TEST(Attention, IdenticalPositionsGiveIdenticalOutputs) {
  Rng rng(5);
  std::vector<float> v(3 * 6);
  const float col[3] = {0.3f, -1.2f, 0.8f};
  for (int c = 0; c < 3; ++c)
    for (int p = 0; p < 6; ++p) v[c * 6 + p] = col[c];
  const Tensor out = self_attention(Tensor({1, 3, 2, 3}, v), Tensor::randn({3, 3}, rng), Tensor::randn({3, 3}, rng),
                                    Tensor::randn({3, 3}, rng), Tensor::randn({3, 3}, rng));
  for (int c = 0; c < 3; ++c)
    for (int p = 1; p < 6; ++p) EXPECT_FLOAT_EQ(out.data()[c * 6 + p], out.data()[c * 6]);
}

TEST(Attention, PermutingPositionsPermutesOutput) {
  Rng rng(6);
  const Tensor x = Tensor::randn({1, 4, 2, 3}, rng);
  const Tensor wq = Tensor::randn({4, 4}, rng), wk = Tensor::randn({4, 4}, rng), wv = Tensor::randn({4, 4}, rng),
               wo = Tensor::randn({4, 4}, rng);
  const std::vector<int> perm{4, 0, 5, 2, 1, 3};
  std::vector<float> px(x.numel());
  for (int c = 0; c < 4; ++c)
    for (int p = 0; p < 6; ++p) px[c * 6 + p] = x.data()[c * 6 + perm[p]];
  const Tensor a = self_attention(x, wq, wk, wv, wo), b = self_attention(Tensor({1, 4, 2, 3}, px), wq, wk, wv, wo);
  for (int c = 0; c < 4; ++c)
    for (int p = 0; p < 6; ++p) EXPECT_NEAR(b.data()[c * 6 + p], a.data()[c * 6 + perm[p]], 1e-5);
}

TEST(Attention, HeadsMustDivideChannels) {
  const Tensor w({6, 6});
  EXPECT_THROW(self_attention(Tensor({1, 6, 2, 2}), w, w, w, w, 4), ConfigError);
}

TEST(GroupNorm, ConstantInputGivesZero) {
  const Tensor out = group_norm(Tensor({2, 4, 3, 3}, 7.0f), 2, Tensor({4}, 1.0f), Tensor({4}, 0.0f));
  for (float v : out.data()) EXPECT_EQ(v, 0.0f);
}

TEST(GroupNorm, StandardisesEachGroup) {
  Rng rng(7);
  const Tensor x = Tensor::randn({2, 6, 4, 4}, rng, 3.0f);
  const Tensor out = group_norm(x, 3, Tensor({6}, 1.0f), Tensor({6}, 0.0f));
  for (int s = 0; s < 2; ++s)
    for (int g = 0; g < 3; ++g) {
      double mu = 0, sq = 0;
      for (int i = 0; i < 32; ++i) mu += out.data()[(s * 6 + g * 2) * 16 + i];
      mu /= 32;
      for (int i = 0; i < 32; ++i) sq += std::pow(out.data()[(s * 6 + g * 2) * 16 + i] - mu, 2);
      EXPECT_NEAR(mu, 0.0, 1e-5);
      EXPECT_NEAR(sq / 32, 1.0, 1e-3);
    }
}

TEST(GroupNorm, TwoValuesStandardiseToPlusMinusOne) {
  const Tensor out = group_norm(Tensor({1, 1, 1, 2}, {1, 3}), 1, Tensor({1}, 1.0f), Tensor({1}, 0.0f), 1e-10f);
  EXPECT_NEAR(out.data()[0], -1.0, 1e-5);
  EXPECT_NEAR(out.data()[1], 1.0, 1e-5);
}

TEST(GroupNorm, GroupsMustDivideChannels) {
  EXPECT_THROW(group_norm(Tensor({1, 6, 2, 2}), 4, Tensor({6}), Tensor({6})), ConfigError);
}

TEST(TimeEmbedding, ZeroStep) { EXPECT_EQ(values(time_embedding(0, 4)), (std::vector<float>{0, 0, 1, 1})); }

TEST(TimeEmbedding, StepOne) {
  const Tensor e = time_embedding(1, 2);
  EXPECT_NEAR(e.data()[0], 0.8415, 1e-4);
  EXPECT_NEAR(e.data()[1], 0.5403, 1e-4);
}

TEST(TimeEmbedding, MatchesReferenceAndStaysBounded) {
  for (int t : {0, 1, 17, 500, 1000}) {
    const auto ref = oracle::time_embedding(t, 32);
    const Tensor e = time_embedding(t, 32);
    for (std::size_t i = 0; i < ref.size(); ++i) {
      EXPECT_NEAR(e.data()[i], ref[i], 1e-5);
      EXPECT_LE(std::fabs(e.data()[i]), 1.0f);
    }
  }
}

TEST(TimeEmbedding, DistinctStepsGiveDistinctVectors) {
  for (int dim : {2, 8, 32}) {
    std::set<std::vector<float>> seen;
    for (int t = 0; t <= 1000; ++t) seen.insert(values(time_embedding(t, dim)));
    EXPECT_EQ(seen.size(), 1001u) << "dim " << dim;
  }
}

TEST(TimeEmbedding, OddDimRejected) { EXPECT_THROW(time_embedding(3, 5), ConfigError); }

TEST(Backward, QuadraticGradientIsTwoX) {
  Tensor x({4}, {1.5f, -2.0f, 0.25f, 3.0f});
  x.set_requires_grad(true);
  sum(mul(x, x)).backward();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_FLOAT_EQ(x.grad()[i], 2 * x.data()[i]);
}

TEST(Backward, MseGradient) {
  Tensor a({3}, {1, 2, 3}), b({3}, {0.5f, 4, -1});
  a.set_requires_grad(true);
  mse_loss(a, b).backward();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a.grad()[i], 2 * (a.data()[i] - b.data()[i]) / 3, 1e-6);
}

TEST(Backward, AccumulatesAcrossCalls) {
  Tensor x({2}, {1, 2});
  x.set_requires_grad(true);
  sum(x).backward();
  sum(x).backward();
  EXPECT_FLOAT_EQ(x.grad()[0], 2.0f);
  x.zero_grad();
  sum(x).backward();
  EXPECT_FLOAT_EQ(x.grad()[0], 1.0f);
}

TEST(Backward, NonScalarIsUsageError) {
  Tensor x({2}, {1, 2});
  x.set_requires_grad(true);
  EXPECT_THROW(silu(x).backward(), UsageError);
}

TEST(Backward, CompositePipelineMatchesReference) {
  const auto x = oracle::random_array({2, 2, 4, 4}, 31), k = oracle::random_array({4, 2, 3, 3}, 32, 0.5),
             b = oracle::random_array({4}, 33), g = oracle::random_array({4}, 34), be = oracle::random_array({4}, 35);
  std::vector<Tensor> ts;
  for (const auto* a : {&x, &k, &b, &g, &be}) ts.push_back(oracle::to_tensor(*a).set_requires_grad(true));
  mean(silu(group_norm(conv2d(ts[0], ts[1], ts[2], 1, 1), 2, ts[3], ts[4]))).backward();
  const oracle::Fn ref = [](const auto& v) {
    return oracle::mean(oracle::silu(oracle::group_norm(oracle::conv2d(v[0], v[1], v[2], 1, 1), 2, v[3], v[4])));
  };
  const auto numeric = oracle::numeric_gradient(ref, {x, k, b, g, be}, {1.0});
  std::vector<std::vector<double>> analytic;
  for (auto& t : ts) analytic.emplace_back(t.grad().begin(), t.grad().end());
  EXPECT_LE(oracle::relative_error(analytic, numeric), 1e-3);
}

TEST(Forward, BitwiseDeterministic) {
  Rng rng(8);
  const Tensor x = Tensor::randn({2, 4, 4, 4}, rng), k = Tensor::randn({4, 4, 3, 3}, rng);
  const Tensor w = Tensor::randn({4, 4}, rng);
  auto run = [&] { return values(self_attention(silu(conv2d(x, k, Tensor(), 1, 1)), w, w, w, w)); };
  EXPECT_EQ(run(), run());
}

TEST(Adam, ZeroGradientLeavesParamsAndCountsStep) {
  Tensor p({3}, {1, 2, 3});
  p.set_requires_grad(true);
  p.zero_grad();
  AdamState s;
  std::vector<Tensor> ps{p};
  adam_step(ps, s);
  EXPECT_EQ(values(p), (std::vector<float>{1, 2, 3}));
  EXPECT_EQ(s.step_count, 1u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor p({1}, {0.0f});
  p.set_requires_grad(true);
  sum(scale(p, 0.5f)).backward();
  AdamState s;
  s.hyper = {1e-4, 0.9, 0.999, 1e-8};
  std::vector<Tensor> ps{p};
  adam_step(ps, s);
  EXPECT_NEAR(p.data()[0], -1e-4 * 0.5 / (0.5 + 1e-8), 1e-9);
  EXPECT_GE(s.second_moment[0][0], 0.0f);
}

TEST(Adam, ConstantGradientMovesMonotonically) {
  Tensor p({1}, {1.0f});
  p.set_requires_grad(true);
  AdamState s;
  s.hyper.learning_rate = 0.01;
  std::vector<Tensor> ps{p};
  float prev = 1.0f;
  for (int i = 0; i < 2; ++i) {
    p.zero_grad();
    sum(scale(p, -2.0f)).backward();
    adam_step(ps, s);
    EXPECT_GT(p.data()[0], prev);
    prev = p.data()[0];
  }
  EXPECT_EQ(s.step_count, 2u);
}

TEST(Adam, ShapeChangeRejected) {
  Tensor p({2}, 1.0f);
  p.set_requires_grad(true);
  AdamState s;
  std::vector<Tensor> ps{p};
  adam_step(ps, s);
  std::vector<Tensor> other{Tensor({3}, 1.0f)};
  EXPECT_THROW(adam_step(other, s), Error);
}
