#include "ulcerforge/schedule.hpp"

#include <cmath>
#include <string>

#include "ulcerforge/error.hpp"

namespace ulcerforge {

void to_json(nlohmann::json& j, const ScheduleConfig& c) {
  j = nlohmann::json{{"T", c.timesteps}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}};
}

void from_json(const nlohmann::json& j, ScheduleConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "T") c.timesteps = value.get<int>();
    else if (key == "beta_start") c.beta_start = value.get<double>();
    else if (key == "beta_end") c.beta_end = value.get<double>();
    else throw ConfigError("schedule: unknown key '" + key + "'");
  }
}

std::size_t NoiseSchedule::index(int t) const {
  if (t < 1 || t > steps()) {
    throw IndexError("timestep " + std::to_string(t) + " outside 1.." + std::to_string(steps()));
  }
  return static_cast<std::size_t>(t - 1);
}

StepCoefficients NoiseSchedule::at(int t) const {
  const std::size_t i = index(t);
  return {beta_[i], alpha_[i], alpha_bar_[i], t == 1 ? 0.0 : static_cast<double>(posterior_sigma_[i])};
}

NoiseSchedule build_linear_schedule(int timesteps, double beta_start, double beta_end) {
  if (timesteps < 1) throw ConfigError("schedule: T must be >= 1, got " + std::to_string(timesteps));
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1, got " +
                      std::to_string(beta_start) + ", " + std::to_string(beta_end));
  }
  NoiseSchedule s;
  s.config_ = {timesteps, beta_start, beta_end};
  const auto n = static_cast<std::size_t>(timesteps);
  s.beta_.resize(n);
  s.alpha_.resize(n);
  s.alpha_bar_.resize(n);
  s.posterior_sigma_.resize(n);
  double alpha_bar_prev = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double frac = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
    const double beta = i + 1 == n && n > 1 ? beta_end : beta_start + (beta_end - beta_start) * frac;
    const double alpha = 1.0 - beta;
    const double alpha_bar = alpha_bar_prev * alpha;
    const double var = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar);
    s.beta_[i] = static_cast<float>(beta);
    s.alpha_[i] = static_cast<float>(alpha);
    s.alpha_bar_[i] = static_cast<float>(alpha_bar);
    s.posterior_sigma_[i] = static_cast<float>(std::sqrt(var));
    alpha_bar_prev = alpha_bar;
  }
  return s;
}

Tensor forward_diffuse(const Tensor& x0, std::span<const int> t, const Tensor& eps,
                       const NoiseSchedule& s) {
  if (x0.shape() != eps.shape()) {
    throw DimensionError("forward_diffuse: eps shape " + shape_str(eps.shape()) +
                         " differs from x0 shape " + shape_str(x0.shape()));
  }
  const std::size_t rows = t.size();
  if (rows == 0 || (rows > 1 && (x0.rank() == 0 || x0.size(0) != rows))) {
    throw DimensionError("forward_diffuse: " + std::to_string(rows) +
                         " timesteps do not match leading axis of " + shape_str(x0.shape()));
  }
  const std::size_t per = x0.numel() / rows;
  Tensor out(x0.shape());
  auto a = x0.data(), e = eps.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double ab = s.alpha_bar(t[r]);
    const double sig = std::sqrt(ab), noise = std::sqrt(1.0 - ab);
    for (std::size_t i = r * per; i < (r + 1) * per; ++i) {
      o[i] = static_cast<float>(sig * a[i] + noise * e[i]);
    }
  }
  return out;
}

Tensor forward_diffuse(const Tensor& x0, double alpha_bar, const Tensor& eps) {
  if (x0.shape() != eps.shape()) {
    throw DimensionError("forward_diffuse: eps shape " + shape_str(eps.shape()) +
                         " differs from x0 shape " + shape_str(x0.shape()));
  }
  const double sig = std::sqrt(alpha_bar), noise = std::sqrt(1.0 - alpha_bar);
  Tensor out(x0.shape());
  auto a = x0.data(), e = eps.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<float>(sig * a[i] + noise * e[i]);
  return out;
}

Tensor forward_diffuse(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
  const int ts[1] = {t};
  return forward_diffuse(x0, std::span<const int>(ts), eps, s);
}

Tensor reverse_step(const Tensor& x_t, const StepCoefficients& c, const Tensor& eps_pred,
                    const Tensor& z) {
  if (x_t.shape() != eps_pred.shape()) {
    throw DimensionError("reverse_step: eps_pred shape " + shape_str(eps_pred.shape()) +
                         " differs from x_t shape " + shape_str(x_t.shape()));
  }
  if (c.sigma != 0.0 && (!z.defined() || z.shape() != x_t.shape())) {
    throw DimensionError("reverse_step: z must match x_t shape " + shape_str(x_t.shape()));
  }
  const double coef = c.beta / std::sqrt(1.0 - c.alpha_bar);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(c.alpha);
  Tensor out(x_t.shape());
  auto x = x_t.data(), e = eps_pred.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    double v = inv_sqrt_alpha * (x[i] - coef * e[i]);
    if (c.sigma != 0.0) v += c.sigma * z.data()[i];
    o[i] = static_cast<float>(v);
  }
  return out;
}

Tensor reverse_step(const Tensor& x_t, int t, const Tensor& eps_pred, const Tensor& z,
                    const NoiseSchedule& s) {
  return reverse_step(x_t, s.at(t), eps_pred, z);
}

}  // namespace ulcerforge
