#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "ulcerforge/adam.hpp"
#include "ulcerforge/rng.hpp"
#include "ulcerforge/schedule.hpp"
#include "ulcerforge/unet.hpp"

namespace ulcerforge {

struct TrainConfig {
  int batch_size = 32;
  double initial_lr = 1e-4;
  std::string lr_decay = "cosine";  // "cosine" or "constant"
  double lr_final_fraction = 0.1;   // cosine floor as a fraction of initial_lr
  int epochs = 500;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // in steps; 0 writes only the final checkpoint

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Learning rate for a 0-based step out of `total_steps`. Cosine decays from
// initial_lr towards lr_final_fraction * initial_lr; never increases.
double learning_rate_at(const TrainConfig& config, std::int64_t step, std::int64_t total_steps);

// Per-purpose random streams for one optimizer step, derived from the root
// seed and the step index so that resumed runs draw identical numbers.
struct StepStreams {
  Rng t_draw;
  Rng eps_draw;
  static StepStreams for_step(std::uint64_t root_seed, std::int64_t step) {
    return {Rng(root_seed, "t-draw", static_cast<std::uint64_t>(step)),
            Rng(root_seed, "eps-draw", static_cast<std::uint64_t>(step))};
  }
};

struct StepRecord {
  std::int64_t step = 0;  // 1-based count of completed optimizer steps
  double t_mean = 0.0;
  double loss = 0.0;
  double lr = 0.0;
};

// One DDPM optimisation step: per-sample t ~ U{1..T}, eps ~ N(0, I),
// loss = mean((eps - eps_theta(x_t, t))^2), then one Adam update with
// opt.hyper.learning_rate. Returns the loss; fills `record` when given.
double train_step(DenoiserParams& params, const Tensor& batch, const NoiseSchedule& s,
                  StepStreams& rng, AdamState& opt, StepRecord* record = nullptr);

struct FitOptions {
  std::filesystem::path out_dir;  // empty: no files written
  bool resume = true;
  // Stop after this many total steps (for interrupted-run tests); -1 runs the budget.
  std::int64_t stop_after = -1;
  std::function<void(const StepRecord&)> on_step;
};

struct FitResult {
  DenoiserParams params;
  AdamState optimizer;
  std::vector<StepRecord> log;
  std::int64_t steps_done = 0;
  std::int64_t total_steps = 0;
};

std::int64_t steps_per_epoch(std::size_t dataset_size, int batch_size);

// Trains on dataset [N,C,H,W] in [-1,1]. With out_dir set, writes loss.tsv
// (step<TAB>loss<TAB>lr) and checkpoint.dfud, and resumes from an existing
// checkpoint when resume is true.
FitResult fit(const Tensor& dataset, const UNetConfig& model, const TrainConfig& config,
              const NoiseSchedule& s, const FitOptions& options = {});

using NoisePredictor = std::function<Tensor(const Tensor& x_t, int t)>;

// Ancestral sampling from x_T ~ N(0, I) through T reverse steps, fresh z per
// step and none at t = 1. Output clamped to [-1,1] unless clamp is false.
Tensor sample_batch(const NoisePredictor& predictor, const Shape& sample_shape,
                    const NoiseSchedule& s, std::size_t n, Rng& rng, bool clamp = true);
Tensor sample_batch(const DenoiserParams& params, const NoiseSchedule& s, std::size_t n, Rng& rng,
                    bool clamp = true);

struct CurationStats {
  std::vector<double> mean;    // per channel, model units
  std::vector<double> stddev;  // per channel, pooled over all pixels
};

CurationStats compute_curation_stats(const Tensor& dataset);

struct Discard {
  std::size_t index;
  std::string reason;
};

struct CurationResult {
  std::vector<std::size_t> kept;
  std::vector<Discard> discarded;
  std::vector<std::string> warnings;
};

// Discards a sample when any channel mean deviates from the training channel
// mean by more than k_sigma training standard deviations.
CurationResult curate_samples(const Tensor& samples, const CurationStats& stats,
                              double k_sigma = 3.0);

}  // namespace ulcerforge
