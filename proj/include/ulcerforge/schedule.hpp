#pragma once

#include <nlohmann/json.hpp>
#include <span>
#include <vector>

#include "ulcerforge/tensor.hpp"

namespace ulcerforge {

struct ScheduleConfig {
  int timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

void to_json(nlohmann::json& j, const ScheduleConfig& c);
void from_json(const nlohmann::json& j, ScheduleConfig& c);

struct StepCoefficients {
  double beta = 0.0;
  double alpha = 1.0;
  double alpha_bar = 1.0;
  double sigma = 0.0;  // posterior std; 0 at the terminal step
};

// Linear DDPM variance schedule. Timesteps are 1-based: t = 1..T.
// Every array is computed in double and stored as float.
class NoiseSchedule {
 public:
  int steps() const { return static_cast<int>(beta_.size()); }
  const ScheduleConfig& config() const { return config_; }

  float beta(int t) const { return beta_[index(t)]; }
  float alpha(int t) const { return alpha_[index(t)]; }
  float alpha_bar(int t) const { return alpha_bar_[index(t)]; }
  // Posterior std: sigma_t^2 = beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t), sigma_1 = 0.
  float posterior_sigma(int t) const { return posterior_sigma_[index(t)]; }

  StepCoefficients at(int t) const;

  const std::vector<float>& betas() const { return beta_; }
  const std::vector<float>& alpha_bars() const { return alpha_bar_; }

  friend NoiseSchedule build_linear_schedule(int, double, double);

 private:
  std::size_t index(int t) const;

  ScheduleConfig config_;
  std::vector<float> beta_;
  std::vector<float> alpha_;
  std::vector<float> alpha_bar_;
  std::vector<float> posterior_sigma_;
};

NoiseSchedule build_linear_schedule(int timesteps = 1000, double beta_start = 1e-4,
                                    double beta_end = 0.02);
inline NoiseSchedule build_linear_schedule(const ScheduleConfig& c) {
  return build_linear_schedule(c.timesteps, c.beta_start, c.beta_end);
}

// Closed-form marginal for a given alpha_bar.
Tensor forward_diffuse(const Tensor& x0, double alpha_bar, const Tensor& eps);

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps. Same t for every element.
Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s);
// Per-sample timesteps along axis 0.
Tensor forward_diffuse(const Tensor& x0, std::span<const int> t, const Tensor& eps,
                       const NoiseSchedule& s);

// x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_pred) / sqrt(alpha_t) + sigma_t z.
// At t = 1 the noise term is dropped whatever z holds.
Tensor reverse_step(const Tensor& x_t, const StepCoefficients& c, const Tensor& eps_pred,
                    const Tensor& z);
Tensor reverse_step(const Tensor& x_t, int t, const Tensor& eps_pred, const Tensor& z,
                    const NoiseSchedule& s);

}  // namespace ulcerforge
