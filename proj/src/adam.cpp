#include "ulcerforge/adam.hpp"

#include <cmath>
#include <string>

#include "ulcerforge/error.hpp"

namespace ulcerforge {

void adam_step(std::span<Tensor> params, AdamState& state) {
  if (state.first_moment.empty() && state.second_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.numel(), 0.0f);
      state.second_moment.emplace_back(p.numel(), 0.0f);
    }
  }
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw DimensionError("adam_step: optimizer tracks " + std::to_string(state.first_moment.size()) +
                         " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].size() != params[i].numel() ||
        state.second_moment[i].size() != params[i].numel()) {
      throw DimensionError("adam_step: moment size mismatch for parameter " + std::to_string(i) +
                           " of shape " + shape_str(params[i].shape()));
    }
  }

  const auto& h = state.hyper;
  const double t = static_cast<double>(state.step_count + 1);
  const double correction1 = 1.0 - std::pow(h.beta1, t);
  const double correction2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.has_grad()) {
      // Zero gradient: moments still decay.
      for (std::size_t j = 0; j < p.numel(); ++j) {
        state.first_moment[i][j] = static_cast<float>(h.beta1 * state.first_moment[i][j]);
        state.second_moment[i][j] = static_cast<float>(h.beta2 * state.second_moment[i][j]);
      }
    }
    auto values = p.data();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      if (p.has_grad()) {
        const double g = p.grad()[j];
        m[j] = static_cast<float>(h.beta1 * m[j] + (1.0 - h.beta1) * g);
        v[j] = static_cast<float>(h.beta2 * v[j] + (1.0 - h.beta2) * g * g);
      }
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      values[j] = static_cast<float>(values[j] - h.learning_rate * m_hat / (std::sqrt(v_hat) + h.eps));
    }
  }
  ++state.step_count;
}

}  // namespace ulcerforge
