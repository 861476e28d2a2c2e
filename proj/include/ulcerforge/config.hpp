#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <string_view>

#include "ulcerforge/schedule.hpp"
#include "ulcerforge/study.hpp"
#include "ulcerforge/train.hpp"
#include "ulcerforge/unet.hpp"

namespace ulcerforge {

struct SampleConfig {
  std::uint64_t seed = 0;
  int count = 64;
  int batch = 64;
  bool clamp = true;
  double k_sigma = 3.0;
};

void to_json(nlohmann::json& j, const SampleConfig& c);
void from_json(const nlohmann::json& j, SampleConfig& c);

struct MetricsConfig {
  std::string embedding = "flatten";  // flatten | random_conv | external
  int dim = 0;
  std::uint64_t seed = 0;
  std::string features;  // feature file for the external embedding
  int subset_size = 50;
  int subsets = 100;
};

void to_json(nlohmann::json& j, const MetricsConfig& c);
void from_json(const nlohmann::json& j, MetricsConfig& c);

struct RunConfig {
  ScheduleConfig schedule;
  UNetConfig model;
  TrainConfig train;
  SampleConfig sample;
  MetricsConfig metrics;
  StudySettings study;

  nlohmann::json to_json() const;
  // Strict: unknown sections or keys raise ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);

  // Sets a dotted path such as "train.batch_size". The value is parsed as
  // JSON when possible, otherwise taken as a string.
  void set(const std::string& path, const std::string& value);
  void validate() const;
};

std::string_view version();

// ULCERFORGE_SEED, when set, replaces the train, sample and metrics seeds.
std::optional<std::uint64_t> seed_from_env();
void apply_root_seed(RunConfig& config, std::uint64_t seed);

}  // namespace ulcerforge
