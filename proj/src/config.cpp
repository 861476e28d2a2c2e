#include "ulcerforge/config.hpp"

#include <cerrno>
#include <cstdlib>
#include <fstream>

#include "ulcerforge/error.hpp"

namespace ulcerforge {

void to_json(nlohmann::json& j, const SampleConfig& c) {
  j = {{"seed", c.seed}, {"count", c.count}, {"batch", c.batch}, {"clamp", c.clamp}, {"k_sigma", c.k_sigma}};
}

void from_json(const nlohmann::json& j, SampleConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "count") c.count = value.get<int>();
    else if (key == "batch") c.batch = value.get<int>();
    else if (key == "clamp") c.clamp = value.get<bool>();
    else if (key == "k_sigma") c.k_sigma = value.get<double>();
    else throw ConfigError("sample: unknown key '" + key + "'");
  }
}

void to_json(nlohmann::json& j, const MetricsConfig& c) {
  j = {{"embedding", c.embedding},     {"dim", c.dim},         {"seed", c.seed},
       {"features", c.features},       {"subset_size", c.subset_size}, {"subsets", c.subsets}};
}

void from_json(const nlohmann::json& j, MetricsConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "embedding") c.embedding = value.get<std::string>();
    else if (key == "dim") c.dim = value.get<int>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "features") c.features = value.get<std::string>();
    else if (key == "subset_size") c.subset_size = value.get<int>();
    else if (key == "subsets") c.subsets = value.get<int>();
    else throw ConfigError("metrics: unknown key '" + key + "'");
  }
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["schedule"] = schedule;
  j["model"] = model;
  j["train"] = train;
  j["sample"] = sample;
  j["metrics"] = metrics;
  j["study"] = study.to_json();
  return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig c;
  for (const auto& [key, value] : j.items()) {
    if (!value.is_object()) throw ConfigError(key + ": section must be an object");
    try {
      if (key == "schedule") value.get_to(c.schedule);
      else if (key == "model") value.get_to(c.model);
      else if (key == "train") value.get_to(c.train);
      else if (key == "sample") value.get_to(c.sample);
      else if (key == "metrics") value.get_to(c.metrics);
      else if (key == "study") c.study = StudySettings::from_json(value);
      else throw ConfigError("unknown config section '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(key + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void RunConfig::set(const std::string& path, const std::string& value) {
  const auto dot = path.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == path.size()) {
    throw UsageError("override must look like section.key, got '" + path + "'");
  }
  const auto section = path.substr(0, dot), key = path.substr(dot + 1);
  nlohmann::json j = to_json();
  if (!j.contains(section)) throw UsageError("unknown config section '" + section + "'");
  if (!j[section].contains(key)) throw UsageError("unknown config key '" + path + "'");
  nlohmann::json parsed = nlohmann::json::parse(value, nullptr, false);
  if (parsed.is_discarded() || (j[section][key].is_string() && !parsed.is_string())) parsed = value;
  j[section][key] = parsed;
  *this = from_json(j);
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (schedule.timesteps < 1) throw ConfigError("schedule.T must be >= 1");
  if (sample.count < 1) throw ConfigError("sample.count must be >= 1");
  if (sample.batch < 1) throw ConfigError("sample.batch must be >= 1");
  if (!(sample.k_sigma > 0)) throw ConfigError("sample.k_sigma must be positive");
  if (metrics.embedding != "flatten" && metrics.embedding != "random_conv" && metrics.embedding != "external") {
    throw ConfigError("metrics.embedding must be flatten, random_conv or external");
  }
  if (metrics.dim < 0) throw ConfigError("metrics.dim must be >= 0");
  if (metrics.embedding == "random_conv" && metrics.dim < 1) throw ConfigError("metrics.dim must be >= 1 for random_conv");
  if (metrics.subset_size < 2) throw ConfigError("metrics.subset_size must be >= 2");
  if (metrics.subsets < 1) throw ConfigError("metrics.subsets must be >= 1");
}

std::string_view version() { return ULCERFORGE_VERSION; }

std::optional<std::uint64_t> seed_from_env() {
  const char* v = std::getenv("ULCERFORGE_SEED");
  if (!v || !*v) return std::nullopt;
  char* end = nullptr;
  errno = 0;
  const unsigned long long seed = std::strtoull(v, &end, 10);
  if (errno != 0 || *end != '\0' || *v == '-') {
    throw ConfigError("ULCERFORGE_SEED must be a non-negative integer, got '" + std::string(v) + "'");
  }
  return seed;
}

void apply_root_seed(RunConfig& config, std::uint64_t seed) {
  config.train.seed = seed;
  config.sample.seed = seed;
  config.metrics.seed = seed;
}

}  // namespace ulcerforge
