#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ulcerforge/tensor.hpp"

namespace ulcerforge {

struct AdamHyper {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamHyper hyper;
  std::vector<std::vector<float>> first_moment;
  std::vector<std::vector<float>> second_moment;
  std::uint64_t step_count = 0;
};

// Bias-corrected Adam update of `params` from their grad slots. A parameter
// without a grad slot is treated as having zero gradient. Moments are sized
// lazily on the first step; afterwards shapes must match.
void adam_step(std::span<Tensor> params, AdamState& state);

}  // namespace ulcerforge
