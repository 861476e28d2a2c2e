#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ulcerforge/rng.hpp"
#include "ulcerforge/tensor.hpp"
#include "ulcerforge/unet.hpp"

namespace ulcerforge {

using TensorFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradcheckEntry {
  std::string name;
  double rel_error = 0.0;  // ||analytic - numeric||_2 / ||numeric||_2
  std::size_t coordinates = 0;
};

// Compares reverse-mode gradients of L = sum(w * f(inputs)), w random, against
// central differences with step `h`. L is accumulated in double for the
// numeric side. When max_coords > 0 only that many random coordinates are
// perturbed.
GradcheckEntry gradcheck(const std::string& name, const TensorFn& f, std::vector<Tensor> inputs, Rng& rng,
                         double h = 1e-2, std::size_t max_coords = 0);

// One entry per differentiable op on small random inputs.
std::vector<GradcheckEntry> gradcheck_ops(std::uint64_t seed, double h = 1e-2);

// Checks sum(w * (eps_theta(x_t, t) - eps)) w.r.t. a random sample of
// denoiser parameter coordinates. The zero-initialised output conv gets
// random values so every parameter receives gradient. coords = 0 samples 1%
// of all parameter coordinates.
GradcheckEntry gradcheck_denoiser(const UNetConfig& config, std::uint64_t seed, std::size_t coords = 0,
                                  double h = 1e-2);

}  // namespace ulcerforge
