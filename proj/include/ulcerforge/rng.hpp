#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace ulcerforge {

/// Derives an independent 64-bit seed for a labeled stream, e.g.
/// derive_seed(root, "eps-draw", step). The same (root, label, index)
/// always yields the same seed, so subsystems can be re-run in isolation.
std::uint64_t derive_seed(std::uint64_t root, std::string_view label,
                          std::uint64_t index = 0);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t root, std::string_view label, std::uint64_t index = 0)
      : engine_(derive_seed(root, label, index)) {}

  float normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  // Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }
  std::uint64_t next_u64() { return engine_(); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<float> normal_{0.0f, 1.0f};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace ulcerforge
