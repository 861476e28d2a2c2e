#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>

#include "ulcerforge/dataset.hpp"
#include "ulcerforge/error.hpp"
#include "ulcerforge/train.hpp"

using namespace ulcerforge;
namespace fs = std::filesystem;

namespace {

UNetConfig tiny() {
  UNetConfig c;
  c.base_channels = 8;
  c.channel_multipliers = {1, 2};
  c.attention_levels = {1};
  c.res_blocks = 1;
  c.image_size = 8;
  return c;
}

TrainConfig train_config(int epochs, int batch = 32, double lr = 1e-3) {
  TrainConfig t;
  t.batch_size = batch;
  t.initial_lr = lr;
  t.epochs = epochs;
  t.seed = 5;
  return t;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("ulcerforge-train-" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(TrainStep, FreshModelLossNearOne) {
  const auto s = build_linear_schedule();
  const Tensor data = make_blob_dataset(32, 8, 1);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto params = init_denoiser(tiny(), seed);
    AdamState opt;
    auto streams = StepStreams::for_step(seed, 0);
    const double loss = train_step(params, data, s, streams, opt);
    EXPECT_GE(loss, 0.85);
    EXPECT_LE(loss, 1.15);
  }
}

TEST(TrainStep, RejectsOutOfRangeBatch) {
  const auto s = build_linear_schedule();
  auto params = init_denoiser(tiny(), 1);
  AdamState opt;
  auto streams = StepStreams::for_step(1, 0);
  EXPECT_THROW(train_step(params, Tensor({1, 1, 8, 8}, 2.0f), s, streams, opt), ConfigError);
}

TEST(TrainStep, NonFiniteLossAbortsWithDiagnostics) {
  const auto s = build_linear_schedule();
  auto params = init_denoiser(tiny(), 1);
  params.tensors.at("out.conv.bias").data()[0] = std::numeric_limits<float>::infinity();
  AdamState opt;
  auto streams = StepStreams::for_step(1, 0);
  try {
    train_step(params, Tensor({2, 1, 8, 8}), s, streams, opt);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("t = ["), std::string::npos) << e.what();
  }
}

TEST(TrainStep, OverfitsFixedBatch) {
  const auto s = build_linear_schedule();
  const Tensor batch = make_blob_dataset(4, 8, 2);
  auto params = init_denoiser(tiny(), 3);
  AdamState opt;
  opt.hyper.learning_rate = 2e-3;
  std::vector<double> losses;
  for (int step = 0; step < 500; ++step) {
    auto streams = StepStreams::for_step(3, step);
    losses.push_back(train_step(params, batch, s, streams, opt));
  }
  // Single-step losses are noisy in t; compare 25-step windows.
  const double first = median({losses.begin(), losses.begin() + 25});
  const double last = median({losses.end() - 25, losses.end()});
  EXPECT_LT(last, 0.25 * first) << first << " -> " << last;
}

TEST(Fit, SameSeedSameTrajectory) {
  const auto s = build_linear_schedule();
  const Tensor data = make_blob_dataset(16, 8, 4);
  const auto a = fit(data, tiny(), train_config(3, 8), s);
  const auto b = fit(data, tiny(), train_config(3, 8), s);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].loss, b.log[i].loss);
  for (const auto& [name, t] : a.params.tensors)
    EXPECT_TRUE(std::equal(t.data().begin(), t.data().end(), b.params.at(name).data().begin())) << name;
}

TEST(Fit, ZeroEpochsIsNoOp) {
  const auto s = build_linear_schedule();
  const Tensor data = make_blob_dataset(8, 8, 4);
  const auto r = fit(data, tiny(), train_config(0), s);
  EXPECT_TRUE(r.log.empty());
  const auto init = init_denoiser(tiny(), 5);
  for (const auto& [name, t] : init.tensors)
    EXPECT_TRUE(std::equal(t.data().begin(), t.data().end(), r.params.at(name).data().begin())) << name;
}

TEST(Fit, EmptyDatasetRejected) {
  const auto s = build_linear_schedule();
  EXPECT_THROW(fit(Tensor(), tiny(), train_config(1), s), ConfigError);
}

TEST(Fit, LogLineCountIsEpochsTimesBatches) {
  const auto s = build_linear_schedule();
  const Tensor data = make_blob_dataset(10, 8, 6);
  const auto dir = temp_dir("log");
  FitOptions opts;
  opts.out_dir = dir;
  const auto r = fit(data, tiny(), train_config(3, 4), s, opts);
  EXPECT_EQ(r.log.size(), 9u);
  std::ifstream in(dir / "loss.tsv");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    ++lines;
    EXPECT_EQ(std::count(line.begin(), line.end(), '\t'), 2) << line;
  }
  EXPECT_EQ(lines, 9u);
  EXPECT_TRUE(fs::exists(dir / "checkpoint.dfud"));
  fs::remove_all(dir);
}

TEST(Fit, LossDecreasesOnBlobs) {
  const auto s = build_linear_schedule();
  const Tensor data = make_blob_dataset(128, 8, 7);
  const auto r = fit(data, tiny(), train_config(50, 32, 2e-3), s);
  std::vector<double> losses;
  for (const auto& rec : r.log) {
    EXPECT_TRUE(std::isfinite(rec.loss));
    EXPECT_GE(rec.loss, 0.0);
    losses.push_back(rec.loss);
  }
  const std::size_t tenth = losses.size() / 10;
  EXPECT_LT(median({losses.end() - tenth, losses.end()}), median({losses.begin(), losses.begin() + tenth}));
}

TEST(LearningRate, CosineNeverIncreasesAndEndsAtFloor) {
  TrainConfig c = train_config(1, 32, 1e-4);
  double prev = 1.0;
  for (int step = 0; step < 1000; ++step) {
    const double lr = learning_rate_at(c, step, 1000);
    EXPECT_LE(lr, prev);
    EXPECT_GE(lr, 0.0);
    prev = lr;
  }
  EXPECT_DOUBLE_EQ(learning_rate_at(c, 0, 1000), 1e-4);
  EXPECT_NEAR(learning_rate_at(c, 999, 1000), 1e-5, 1e-9);
  c.lr_decay = "constant";
  EXPECT_DOUBLE_EQ(learning_rate_at(c, 500, 1000), 1e-4);
}

TEST(Sampler, SeededAndBounded) {
  const auto s = build_linear_schedule(100, 1e-4, 0.05);
  auto params = init_denoiser(tiny(), 8);
  for (auto& v : params.tensors.at("out.conv.weight").data()) v = 0.02f;
  Rng a(9, "sampler"), b(9, "sampler");
  const Tensor x = sample_batch(params, s, 3, a), y = sample_batch(params, s, 3, b);
  EXPECT_EQ(x.shape(), (Shape{3, 1, 8, 8}));
  EXPECT_TRUE(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
  for (float v : x.data()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Sampler, ZeroPredictorFollowsVarianceRecursion) {
  const auto s = build_linear_schedule();
  NoisePredictor zero = [](const Tensor& x, int) { return Tensor(x.shape()); };
  Rng rng(10, "sampler");
  const Tensor x = sample_batch(zero, {1, 2, 2}, s, 1000, rng, false);
  double var = 1.0;
  for (int t = s.steps(); t >= 1; --t)
    var = var / s.alpha(t) + static_cast<double>(s.posterior_sigma(t)) * s.posterior_sigma(t);
  for (int e = 0; e < 4; ++e) {
    double sq = 0;
    for (int i = 0; i < 1000; ++i) sq += std::pow(x.data()[i * 4 + e], 2);
    EXPECT_NEAR(sq / 1000, var, 0.05 * var) << "element " << e;
  }
}

TEST(Curation, TrainingSampleKept) {
  const Tensor data = make_blob_dataset(20, 8, 11);
  const auto stats = compute_curation_stats(data);
  const auto r = curate_samples(data, stats);
  EXPECT_EQ(r.kept.size(), 20u);
  EXPECT_TRUE(r.discarded.empty());
}

TEST(Curation, OffsetChannelDiscardedWithReason) {
  CurationStats stats{{0.0, -0.5, 0.0}, {0.2, 0.1, 0.2}};
  std::vector<float> v(2 * 3 * 4, 0.0f);
  for (int p = 0; p < 4; ++p) v[12 + 4 + p] = 1.0f;  // sample 1, channel 1
  for (int p = 0; p < 4; ++p) v[4 + p] = -0.5f;
  const auto r = curate_samples(Tensor({2, 3, 2, 2}, v), stats, 3.0);
  ASSERT_EQ(r.discarded.size(), 1u);
  EXPECT_EQ(r.discarded[0].index, 1u);
  EXPECT_NE(r.discarded[0].reason.find("channel 1"), std::string::npos) << r.discarded[0].reason;
  EXPECT_EQ(r.kept, std::vector<std::size_t>{0});
}

TEST(Curation, InfiniteThresholdKeepsAll) {
  CurationStats stats{{0.0}, {0.01}};
  const auto r = curate_samples(Tensor({3, 1, 2, 2}, 0.9f), stats, std::numeric_limits<double>::infinity());
  EXPECT_EQ(r.kept.size(), 3u);
}

TEST(Curation, PartitionsIndices) {
  const Tensor data = make_blob_dataset(30, 8, 12);
  const auto stats = compute_curation_stats(make_blob_dataset(30, 8, 13));
  const auto r = curate_samples(data, stats, 0.1);
  std::set<std::size_t> all(r.kept.begin(), r.kept.end());
  for (const auto& d : r.discarded) EXPECT_TRUE(all.insert(d.index).second);
  EXPECT_EQ(all.size(), 30u);
}

TEST(Curation, ZeroStdWarns) {
  const auto stats = compute_curation_stats(Tensor({4, 1, 2, 2}, 0.25f));
  EXPECT_EQ(stats.stddev[0], 0.0);
  const auto r = curate_samples(Tensor({2, 1, 2, 2}, {0.25f, 0.25f, 0.25f, 0.25f, 0, 0, 0, 0}), stats);
  EXPECT_FALSE(r.warnings.empty());
  EXPECT_EQ(r.kept, std::vector<std::size_t>{0});
}
