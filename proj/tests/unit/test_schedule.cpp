#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "ulcerforge/error.hpp"
#include "ulcerforge/rng.hpp"
#include "ulcerforge/schedule.hpp"

using namespace ulcerforge;

TEST(Schedule, Endpoints) {
  const auto s = build_linear_schedule();
  EXPECT_EQ(s.steps(), 1000);
  EXPECT_EQ(s.beta(1), 1e-4f);
  EXPECT_EQ(s.beta(1000), 0.02f);
  EXPECT_FLOAT_EQ(s.alpha_bar(1), 0.9999f);
}

TEST(Schedule, AlphaBarMatchesDirectProduct) {
  const auto s = build_linear_schedule();
  double prod = 1.0;
  for (int t = 1; t <= 1000; ++t) {
    prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) / 999.0);
    EXPECT_NEAR(s.alpha_bar(t), prod, 1e-6 * prod + 1e-12);
  }
  EXPECT_GE(s.alpha_bar(1000), 3e-5);
  EXPECT_LE(s.alpha_bar(1000), 5e-5);
}

TEST(Schedule, Invariants) {
  for (auto cfg : {ScheduleConfig{}, ScheduleConfig{50, 1e-3, 0.05}, ScheduleConfig{1, 0.1, 0.1}}) {
    const auto s = build_linear_schedule(cfg);
    EXPECT_EQ(s.posterior_sigma(1), 0.0f);
    for (int t = 1; t <= s.steps(); ++t) {
      EXPECT_GT(s.beta(t), 0.0f);
      EXPECT_LT(s.beta(t), 1.0f);
      if (t > 1) {
        EXPECT_GE(s.beta(t), s.beta(t - 1));
        EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
      }
    }
    EXPECT_GT(s.alpha_bar(s.steps()), 0.0f);
  }
}

TEST(Schedule, PosteriorSigmaFormula) {
  const auto s = build_linear_schedule();
  std::vector<double> bar{1.0};
  for (int t = 1; t <= 1000; ++t) bar.push_back(bar.back() * (1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) / 999.0)));
  for (int t : {2, 10, 500, 1000}) {
    const double beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / 999.0;
    const double expect = std::sqrt(beta * (1.0 - bar[t - 1]) / (1.0 - bar[t]));
    EXPECT_NEAR(s.posterior_sigma(t), expect, 1e-6 * expect);
  }
}

TEST(Schedule, InvalidArguments) {
  EXPECT_THROW(build_linear_schedule(0, 1e-4, 0.02), ConfigError);
  EXPECT_THROW(build_linear_schedule(10, 0.0, 0.02), ConfigError);
  EXPECT_THROW(build_linear_schedule(10, 0.03, 0.02), ConfigError);
  EXPECT_THROW(build_linear_schedule(10, 1e-4, 1.0), ConfigError);
  const auto s = build_linear_schedule(10, 1e-4, 0.02);
  EXPECT_THROW(s.beta(0), IndexError);
  EXPECT_THROW(s.beta(11), IndexError);
}

TEST(ForwardDiffuse, ZeroNoiseAndZeroSignal) {
  const auto s = build_linear_schedule();
  const Tensor x0({3}, {0.5f, -1.0f, 0.25f}), eps({3}, {1.0f, 2.0f, -0.5f});
  const Tensor a = forward_diffuse(x0, 300, Tensor({3}), s);
  const Tensor b = forward_diffuse(Tensor({3}), 300, eps, s);
  for (int i = 0; i < 3; ++i) {
    EXPECT_FLOAT_EQ(a.data()[i], static_cast<float>(std::sqrt(static_cast<double>(s.alpha_bar(300))) * x0.data()[i]));
    EXPECT_FLOAT_EQ(b.data()[i],
                    static_cast<float>(std::sqrt(1.0 - static_cast<double>(s.alpha_bar(300))) * eps.data()[i]));
  }
}

TEST(ForwardDiffuse, HandValue) {
  const Tensor out = forward_diffuse(Tensor::scalar(1.0f), 0.25, Tensor::scalar(2.0f));
  EXPECT_NEAR(out.item(), 2.2321, 1e-4);
}

TEST(ForwardDiffuse, RangeAndShapeErrors) {
  const auto s = build_linear_schedule();
  EXPECT_THROW(forward_diffuse(Tensor({2}), 0, Tensor({2}), s), IndexError);
  EXPECT_THROW(forward_diffuse(Tensor({2}), 1001, Tensor({2}), s), IndexError);
  EXPECT_THROW(forward_diffuse(Tensor({2}), 5, Tensor({3}), s), DimensionError);
}

TEST(ForwardDiffuse, MarginalStatistics) {
  const auto s = build_linear_schedule();
  for (int t : {10, 500, 1000}) {
    Rng rng(11, "marginal", static_cast<std::uint64_t>(t));
    const Tensor eps = Tensor::randn({10000}, rng);
    const Tensor xt = forward_diffuse(Tensor({10000}, 0.7f), t, eps, s);
    double mu = 0, sq = 0;
    for (float v : xt.data()) mu += v;
    mu /= 10000;
    for (float v : xt.data()) sq += (v - mu) * (v - mu);
    const double sd = std::sqrt(sq / 9999);
    const double expect_mu = std::sqrt(static_cast<double>(s.alpha_bar(t))) * 0.7;
    const double expect_sd = std::sqrt(1.0 - s.alpha_bar(t));
    // 2% of the larger of the two scales keeps the mean check meaningful when the mean is near 0.
    EXPECT_NEAR(mu, expect_mu, 0.02 * std::max(std::fabs(expect_mu), expect_sd)) << "t=" << t;
    EXPECT_NEAR(sd, expect_sd, 0.02 * expect_sd) << "t=" << t;
  }
}

TEST(ForwardDiffuse, StepwiseCompositionMatchesClosedForm) {
  const auto s = build_linear_schedule();
  const int n = 10000, steps = 10;
  std::vector<double> x(n, 0.0);
  Rng rng(12, "composition");
  for (int t = 1; t <= steps; ++t)
    for (auto& v : x) v = std::sqrt(static_cast<double>(s.alpha(t))) * v + std::sqrt(static_cast<double>(s.beta(t))) * rng.normal();
  double sq = 0;
  for (double v : x) sq += v * v;
  EXPECT_NEAR(sq / n, 1.0 - s.alpha_bar(steps), 0.02 * (1.0 - s.alpha_bar(steps)));
}

TEST(ReverseStep, CollapsesWithoutNoiseAndPrediction) {
  const auto s = build_linear_schedule();
  const Tensor x({2}, {1.0f, -3.0f});
  const Tensor out = reverse_step(x, 200, Tensor({2}), Tensor({2}), s);
  for (int i = 0; i < 2; ++i)
    EXPECT_FLOAT_EQ(out.data()[i], static_cast<float>(x.data()[i] / std::sqrt(static_cast<double>(s.alpha(200)))));
}

TEST(ReverseStep, TerminalStepIgnoresNoise) {
  const auto s = build_linear_schedule();
  const Tensor x({2}, {0.4f, 0.1f}), e({2}, {0.2f, -0.3f});
  const Tensor a = reverse_step(x, 1, e, Tensor({2}), s), b = reverse_step(x, 1, e, Tensor({2}, 100.0f), s);
  for (int i = 0; i < 2; ++i) EXPECT_EQ(a.data()[i], b.data()[i]);
}

TEST(ReverseStep, HandValue) {
  StepCoefficients c;
  c.alpha = 0.99;
  c.alpha_bar = 0.5;
  c.beta = 0.01;
  c.sigma = 0.3;
  const Tensor out = reverse_step(Tensor::scalar(1.0f), c, Tensor::scalar(1.0f), Tensor::scalar(0.0f));
  // (1 - 0.01 / sqrt(0.5)) / sqrt(0.99)
  EXPECT_NEAR(out.item(), 0.990824, 1e-6);
}

TEST(ReverseStep, VarianceRecursion) {
  const auto s = build_linear_schedule();
  const int n = 10000;
  Rng rng(13, "reverse-variance");
  Tensor x = Tensor::randn({static_cast<std::size_t>(n)}, rng);
  const Tensor zero({static_cast<std::size_t>(n)});
  double var = 1.0;
  for (int t = 1000; t >= 1; --t) {
    x = reverse_step(x, t, zero, Tensor::randn({static_cast<std::size_t>(n)}, rng), s);
    var = var / s.alpha(t) + static_cast<double>(s.posterior_sigma(t)) * s.posterior_sigma(t);
    if (t == 900 || t == 500 || t == 100 || t == 1) {
      double sq = 0;
      for (float v : x.data()) sq += static_cast<double>(v) * v;
      EXPECT_NEAR(sq / n, var, 0.05 * var) << "t=" << t;
    }
  }
}
