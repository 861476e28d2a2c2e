#pragma once

#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "ulcerforge/tensor.hpp"

namespace ulcerforge {

struct UNetConfig {
  int in_channels = 1;
  int base_channels = 16;
  std::vector<int> channel_multipliers{1, 2};
  std::vector<int> attention_levels{1};
  int time_embed_dim = 32;
  int groups_for_norm = 4;
  int res_blocks = 2;
  int attention_heads = 1;
  int image_size = 8;

  int levels() const { return static_cast<int>(channel_multipliers.size()); }
  int channels_at(int level) const { return base_channels * channel_multipliers.at(level); }
  bool has_attention(int level) const;

  // Throws ConfigError naming the first violated constraint.
  void validate() const;
};

void to_json(nlohmann::json& j, const UNetConfig& c);
void from_json(const nlohmann::json& j, UNetConfig& c);

enum class ParamInit { FanIn, Zero, One };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamInit init = ParamInit::FanIn;
  std::size_t fan_in = 1;
  float gain = 2.0f;  // variance numerator: std = sqrt(gain / fan_in)
};

// Names, shapes and init rules of every parameter, in construction order.
std::vector<ParamSpec> parameter_layout(const UNetConfig& config);

class DenoiserParams {
 public:
  UNetConfig config;
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& name) const;
  std::size_t parameter_count() const;
  // Handles in name order; they alias the stored tensors.
  std::vector<Tensor> list() const;
  void set_requires_grad(bool value);
  void zero_grad();
  DenoiserParams clone() const;
};

DenoiserParams init_denoiser(const UNetConfig& config, std::uint64_t seed);

// Noise prediction eps_theta(x_t, t). `t` holds one timestep per sample, or a
// single timestep shared by the batch.
Tensor predict_noise(const DenoiserParams& params, const Tensor& x_t, std::span<const int> t);
Tensor predict_noise(const DenoiserParams& params, const Tensor& x_t, int t);

}  // namespace ulcerforge
