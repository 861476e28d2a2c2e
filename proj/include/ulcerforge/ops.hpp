#pragma once

#include <span>

#include "ulcerforge/tensor.hpp"

namespace ulcerforge {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);

Tensor silu(const Tensor& x);

// Scalar reductions; accumulate in double.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse_loss(const Tensor& prediction, const Tensor& target);

// x[N,I], weight[O,I], bias[O] (bias may be undefined) -> [N,O].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// input[N,C,H,W], kernel[O,C,kh,kw], bias[O] (may be undefined).
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride = 1, int padding = 0);

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma,
                  const Tensor& beta, float eps = 1e-5f);

// Dot-product self-attention over all H*W positions. Projections are [C,C]
// matrices applied per position; scores are scaled by 1/sqrt(C/heads).
Tensor self_attention(const Tensor& x, const Tensor& wq, const Tensor& wk,
                      const Tensor& wv, const Tensor& wo, int heads = 1);

// x[N,C,H,W] + v[N,C] broadcast over spatial positions.
Tensor add_channel_bias(const Tensor& x, const Tensor& v);

Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor upsample_nearest2x(const Tensor& x);

// Sinusoidal timestep embedding: sin(t / 10000^(2i/dim)) for i < dim/2,
// then the matching cos terms.
Tensor time_embedding(int t, int dim);
// Batched form, one row per timestep: [N, dim].
Tensor time_embedding(std::span<const int> t, int dim);

}  // namespace ulcerforge
