#include "ulcerforge/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "ulcerforge/checkpoint.hpp"
#include "ulcerforge/error.hpp"
#include "ulcerforge/ops.hpp"

namespace ulcerforge {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(initial_lr > 0.0)) throw ConfigError("train.initial_lr must be > 0");
  if (lr_decay != "cosine" && lr_decay != "constant")
    throw ConfigError("train.lr_decay must be \"cosine\" or \"constant\", got \"" + lr_decay + "\"");
  if (!(lr_final_fraction >= 0.0 && lr_final_fraction <= 1.0))
    throw ConfigError("train.lr_final_fraction must lie in [0,1]");
  if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"batch_size", c.batch_size},     {"initial_lr", c.initial_lr},
                     {"lr_decay", c.lr_decay},         {"lr_final_fraction", c.lr_final_fraction},
                     {"epochs", c.epochs},             {"seed", c.seed},
                     {"checkpoint_every", c.checkpoint_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "batch_size") c.batch_size = value.get<int>();
    else if (key == "initial_lr") c.initial_lr = value.get<double>();
    else if (key == "lr_decay") c.lr_decay = value.get<std::string>();
    else if (key == "lr_final_fraction") c.lr_final_fraction = value.get<double>();
    else if (key == "epochs") c.epochs = value.get<int>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "checkpoint_every") c.checkpoint_every = value.get<int>();
    else throw ConfigError("train: unknown key '" + key + "'");
  }
}

double learning_rate_at(const TrainConfig& config, std::int64_t step, std::int64_t total_steps) {
  if (config.lr_decay == "constant" || total_steps <= 1) return config.initial_lr;
  const double floor = config.initial_lr * config.lr_final_fraction;
  const double progress =
      std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return floor + 0.5 * (config.initial_lr - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

std::int64_t steps_per_epoch(std::size_t dataset_size, int batch_size) {
  const auto b = static_cast<std::size_t>(batch_size);
  return static_cast<std::int64_t>((dataset_size + b - 1) / b);
}

double train_step(DenoiserParams& params, const Tensor& batch, const NoiseSchedule& s,
                  StepStreams& rng, AdamState& opt, StepRecord* record) {
  if (!batch.defined() || batch.rank() != 4) throw DimensionError("train_step: batch must be [N,C,H,W]");
  for (float v : batch.data()) {
    if (!(v >= -1.0f && v <= 1.0f)) throw ConfigError("train_step: batch values must lie in [-1,1]");
  }
  const std::size_t n = batch.size(0);
  std::vector<int> t(n);
  for (auto& ti : t) ti = static_cast<int>(rng.t_draw.uniform_int(1, s.steps()));
  Tensor eps = Tensor::randn(batch.shape(), rng.eps_draw);
  Tensor x_t = forward_diffuse(batch, std::span<const int>(t), eps, s);

  params.zero_grad();
  Tensor pred = predict_noise(params, x_t, std::span<const int>(t));
  Tensor loss = mse_loss(pred, eps);
  const double value = loss.item();
  if (!std::isfinite(value)) {
    std::ostringstream os;
    os << "non-finite loss " << value << " at optimizer step " << opt.step_count + 1 << ", t = [";
    for (std::size_t i = 0; i < t.size(); ++i) os << (i ? "," : "") << t[i];
    os << "]";
    throw NumericError(os.str());
  }
  loss.backward();
  auto list = params.list();
  adam_step(list, opt);

  if (record) {
    record->step = static_cast<std::int64_t>(opt.step_count);
    record->t_mean = std::accumulate(t.begin(), t.end(), 0.0) / static_cast<double>(n);
    record->loss = value;
    record->lr = opt.hyper.learning_rate;
  }
  return value;
}

namespace {

std::string format_log_line(const StepRecord& r) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%lld\t%.9g\t%.9g\n", static_cast<long long>(r.step), r.loss, r.lr);
  return buf;
}

// Drops loss-log lines past the resumed step, keeping the file consistent
// with the checkpoint it resumes from.
void trim_loss_log(const std::filesystem::path& path, std::int64_t keep_through) {
  std::ifstream in(path);
  if (!in) return;
  std::string kept, line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (std::stoll(line.substr(0, line.find('\t'))) <= keep_through) kept += line + "\n";
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << kept;
}

Tensor gather_rows(const Tensor& data, std::span<const std::size_t> rows) {
  Shape shape = data.shape();
  const std::size_t per = data.numel() / shape[0];
  shape[0] = rows.size();
  std::vector<float> out(rows.size() * per);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(data.data().data() + rows[i] * per, per, out.data() + i * per);
  }
  return Tensor(std::move(shape), std::move(out));
}

}  // namespace

FitResult fit(const Tensor& dataset, const UNetConfig& model, const TrainConfig& config,
              const NoiseSchedule& s, const FitOptions& options) {
  config.validate();
  model.validate();
  if (!dataset.defined() || dataset.rank() != 4 || dataset.size(0) == 0) {
    throw ConfigError("fit: dataset is empty");
  }
  const std::size_t n = dataset.size(0);
  const std::int64_t spe = steps_per_epoch(n, config.batch_size);
  const std::int64_t total = spe * config.epochs;

  FitResult result;
  result.total_steps = total;
  std::int64_t start = 0;
  const bool write = !options.out_dir.empty();
  const auto ckpt_path = options.out_dir / "checkpoint.dfud";
  const auto log_path = options.out_dir / "loss.tsv";
  if (write) std::filesystem::create_directories(options.out_dir);

  if (write && options.resume && std::filesystem::exists(ckpt_path)) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    if (nlohmann::json(ckpt.params.config) != nlohmann::json(model) ||
        nlohmann::json(ckpt.schedule) != nlohmann::json(s.config())) {
      throw ConfigError("fit: checkpoint in " + options.out_dir.string() +
                        " was written for a different model or schedule");
    }
    if (!ckpt.optimizer) throw ConfigError("fit: checkpoint lacks optimizer state, cannot resume");
    result.params = std::move(ckpt.params);
    result.optimizer = std::move(*ckpt.optimizer);
    start = ckpt.step;
    trim_loss_log(log_path, start);
  } else {
    result.params = init_denoiser(model, config.seed);
    result.optimizer.hyper.learning_rate = config.initial_lr;
    if (write) std::ofstream(log_path, std::ios::trunc);
  }

  auto checkpoint = [&](std::int64_t step) {
    Checkpoint c;
    c.schedule = s.config();
    c.params = result.params;
    c.optimizer = result.optimizer;
    c.step = step;
    c.train = config;
    save_checkpoint(ckpt_path, c);
  };

  std::ofstream log_file;
  if (write) log_file.open(log_path, std::ios::app);

  std::vector<std::size_t> perm(n);
  std::int64_t perm_epoch = -1;
  const std::int64_t end = options.stop_after >= 0 ? std::min(total, options.stop_after) : total;
  for (std::int64_t step = start; step < end; ++step) {
    const std::int64_t epoch = step / spe;
    if (epoch != perm_epoch) {
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      Rng shuffle_rng(config.seed, "shuffle", static_cast<std::uint64_t>(epoch));
      std::shuffle(perm.begin(), perm.end(), shuffle_rng.engine());
      perm_epoch = epoch;
    }
    const auto first = static_cast<std::size_t>(step % spe) * static_cast<std::size_t>(config.batch_size);
    const auto last = std::min(n, first + static_cast<std::size_t>(config.batch_size));
    Tensor batch = gather_rows(dataset, std::span<const std::size_t>(perm).subspan(first, last - first));

    result.optimizer.hyper.learning_rate = learning_rate_at(config, step, total);
    StepStreams streams = StepStreams::for_step(config.seed, step);
    StepRecord record;
    try {
      train_step(result.params, batch, s, streams, result.optimizer, &record);
    } catch (const NumericError& e) {
      std::ostringstream os;
      os << e.what() << "; recent losses:";
      const std::size_t from = result.log.size() > 10 ? result.log.size() - 10 : 0;
      for (std::size_t i = from; i < result.log.size(); ++i) os << ' ' << result.log[i].loss;
      throw NumericError(os.str());
    }
    record.step = step + 1;
    result.log.push_back(record);
    if (write) {
      log_file << format_log_line(record);
      log_file.flush();
    }
    if (options.on_step) options.on_step(record);
    if (write && config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0) {
      checkpoint(step + 1);
    }
  }
  result.steps_done = std::max(start, end);
  if (write) checkpoint(result.steps_done);
  return result;
}

Tensor sample_batch(const NoisePredictor& predictor, const Shape& sample_shape,
                    const NoiseSchedule& s, std::size_t n, Rng& rng, bool clamp) {
  if (n < 1) throw ConfigError("sample_batch: n must be >= 1");
  Shape shape{n};
  shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
  Tensor x = Tensor::randn(shape, rng);
  for (int t = s.steps(); t >= 1; --t) {
    Tensor eps = predictor(x, t);
    Tensor z = t > 1 ? Tensor::randn(shape, rng) : Tensor();
    x = reverse_step(x, t, eps, z, s);
    for (float v : x.data()) {
      if (!std::isfinite(v)) {
        throw NumericError("sample_batch: non-finite value at reverse step t = " + std::to_string(t));
      }
    }
  }
  if (clamp) {
    for (auto& v : x.data()) v = std::clamp(v, -1.0f, 1.0f);
  }
  return x;
}

Tensor sample_batch(const DenoiserParams& params, const NoiseSchedule& s, std::size_t n, Rng& rng,
                    bool clamp) {
  const auto& c = params.config;
  const Shape shape{static_cast<std::size_t>(c.in_channels), static_cast<std::size_t>(c.image_size),
                    static_cast<std::size_t>(c.image_size)};
  NoisePredictor predictor = [&params](const Tensor& x, int t) {
    NoGradGuard guard;
    return predict_noise(params, x, t);
  };
  return sample_batch(predictor, shape, s, n, rng, clamp);
}

CurationStats compute_curation_stats(const Tensor& dataset) {
  if (!dataset.defined() || dataset.rank() != 4) throw DimensionError("curation: dataset must be [N,C,H,W]");
  const std::size_t n = dataset.size(0), c = dataset.size(1), hw = dataset.size(2) * dataset.size(3);
  CurationStats stats;
  stats.mean.assign(c, 0.0);
  stats.stddev.assign(c, 0.0);
  auto d = dataset.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < hw; ++p) {
        const double v = d[(i * c + ch) * hw + p];
        sum += v;
        sq += v * v;
      }
    const double count = static_cast<double>(n * hw);
    stats.mean[ch] = sum / count;
    stats.stddev[ch] = std::sqrt(std::max(0.0, sq / count - stats.mean[ch] * stats.mean[ch]));
  }
  return stats;
}

CurationResult curate_samples(const Tensor& samples, const CurationStats& stats, double k_sigma) {
  if (!samples.defined() || samples.rank() != 4) throw DimensionError("curation: samples must be [N,C,H,W]");
  const std::size_t n = samples.size(0), c = samples.size(1), hw = samples.size(2) * samples.size(3);
  if (stats.mean.size() != c || stats.stddev.size() != c) {
    throw DimensionError("curation: stats cover " + std::to_string(stats.mean.size()) +
                         " channels, samples have " + std::to_string(c));
  }
  CurationResult result;
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (stats.stddev[ch] == 0.0) {
      result.warnings.push_back("channel " + std::to_string(ch) +
                                " has zero training std; curation requires an exact mean match");
    }
  }
  auto d = samples.data();
  for (std::size_t i = 0; i < n; ++i) {
    std::string reason;
    for (std::size_t ch = 0; ch < c && reason.empty() && !std::isinf(k_sigma); ++ch) {
      double sum = 0.0;
      for (std::size_t p = 0; p < hw; ++p) sum += d[(i * c + ch) * hw + p];
      const double m = sum / static_cast<double>(hw);
      const double dev = std::abs(m - stats.mean[ch]);
      if (dev > k_sigma * stats.stddev[ch]) {
        char buf[160];
        std::snprintf(buf, sizeof buf,
                      "channel %zu mean %.4f deviates from training mean %.4f by %.4f (limit %.4f)",
                      ch, m, stats.mean[ch], dev, k_sigma * stats.stddev[ch]);
        reason = buf;
      }
    }
    if (reason.empty()) result.kept.push_back(i);
    else result.discarded.push_back({i, std::move(reason)});
  }
  return result;
}

}  // namespace ulcerforge
