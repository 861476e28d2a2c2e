#include "ulcerforge/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ulcerforge/error.hpp"
#include "ulcerforge/ops.hpp"

namespace ulcerforge {

namespace {

double weighted_sum(const Tensor& out, const std::vector<float>& w) {
  double acc = 0.0;
  auto d = out.data();
  for (std::size_t i = 0; i < d.size(); ++i) acc += static_cast<double>(w[i]) * d[i];
  return acc;
}

double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    ref += numeric[i] * numeric[i];
  }
  return ref > 0.0 ? std::sqrt(diff / ref) : std::sqrt(diff);
}

}  // namespace

GradcheckEntry gradcheck(const std::string& name, const TensorFn& f, std::vector<Tensor> inputs, Rng& rng,
                         double h, std::size_t max_coords) {
  for (auto& t : inputs) t.set_requires_grad(true);
  Tensor out = f(inputs);
  std::vector<float> w(out.numel());
  for (auto& v : w) v = rng.normal();
  Tensor loss = sum(mul(out, Tensor(out.shape(), w)));
  loss.backward();

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (std::size_t k = 0; k < inputs[i].numel(); ++k) coords.emplace_back(i, k);
  if (max_coords > 0 && coords.size() > max_coords) {
    for (std::size_t i = 0; i < max_coords; ++i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(i),
                                                              static_cast<std::int64_t>(coords.size()) - 1));
      std::swap(coords[i], coords[j]);
    }
    coords.resize(max_coords);
  }

  NoGradGuard guard;
  std::vector<double> analytic, numeric;
  for (auto [i, k] : coords) {
    analytic.push_back(inputs[i].has_grad() ? inputs[i].grad()[k] : 0.0);
    float& x = inputs[i].data()[k];
    const float saved = x;
    x = static_cast<float>(saved + h);
    const double up = weighted_sum(f(inputs), w);
    const double hp = static_cast<double>(x) - saved;
    x = static_cast<float>(saved - h);
    const double down = weighted_sum(f(inputs), w);
    const double hm = saved - static_cast<double>(x);
    x = saved;
    numeric.push_back((up - down) / (hp + hm));
  }
  return {name, relative_error(analytic, numeric), coords.size()};
}

std::vector<GradcheckEntry> gradcheck_ops(std::uint64_t seed, double h) {
  Rng rng(seed, "gradcheck-ops");
  auto rnd = [&](Shape s, float std = 1.0f) { return Tensor::randn(std::move(s), rng, std); };
  std::vector<GradcheckEntry> out;
  auto check = [&](const std::string& name, const TensorFn& f, std::vector<Tensor> inputs) {
    out.push_back(gradcheck(name, f, std::move(inputs), rng, h));
  };

  check("add", [](const auto& v) { return add(v[0], v[1]); }, {rnd({2, 3}), rnd({2, 3})});
  check("sub", [](const auto& v) { return sub(v[0], v[1]); }, {rnd({2, 3}), rnd({2, 3})});
  check("mul", [](const auto& v) { return mul(v[0], v[1]); }, {rnd({2, 3}), rnd({2, 3})});
  check("scale", [](const auto& v) { return scale(v[0], -1.7f); }, {rnd({5})});
  check("silu", [](const auto& v) { return silu(v[0]); }, {rnd({2, 4}, 2.0f)});
  check("sum", [](const auto& v) { return sum(v[0]); }, {rnd({3, 2})});
  check("mean", [](const auto& v) { return mean(v[0]); }, {rnd({3, 2})});
  check("mse_loss", [](const auto& v) { return mse_loss(v[0], v[1]); }, {rnd({2, 3}), rnd({2, 3})});
  check("linear", [](const auto& v) { return linear(v[0], v[1], v[2]); }, {rnd({3, 4}), rnd({5, 4}), rnd({5})});
  check("conv2d", [](const auto& v) { return conv2d(v[0], v[1], v[2], 1, 1); },
        {rnd({2, 2, 4, 4}), rnd({3, 2, 3, 3}), rnd({3})});
  check("conv2d_stride2", [](const auto& v) { return conv2d(v[0], v[1], v[2], 2, 1); },
        {rnd({1, 2, 4, 4}), rnd({2, 2, 3, 3}), rnd({2})});
  check("group_norm", [](const auto& v) { return group_norm(v[0], 2, v[1], v[2]); },
        {rnd({2, 4, 2, 2}), rnd({4}), rnd({4})});
  check("self_attention", [](const auto& v) { return self_attention(v[0], v[1], v[2], v[3], v[4], 1); },
        {rnd({1, 4, 2, 2}), rnd({4, 4}, 0.5f), rnd({4, 4}, 0.5f), rnd({4, 4}, 0.5f), rnd({4, 4}, 0.5f)});
  check("self_attention_2heads", [](const auto& v) { return self_attention(v[0], v[1], v[2], v[3], v[4], 2); },
        {rnd({1, 4, 2, 2}), rnd({4, 4}, 0.5f), rnd({4, 4}, 0.5f), rnd({4, 4}, 0.5f), rnd({4, 4}, 0.5f)});
  check("add_channel_bias", [](const auto& v) { return add_channel_bias(v[0], v[1]); },
        {rnd({2, 3, 2, 2}), rnd({2, 3})});
  check("concat_channels", [](const auto& v) { return concat_channels(v[0], v[1]); },
        {rnd({2, 1, 2, 2}), rnd({2, 2, 2, 2})});
  check("upsample_nearest2x", [](const auto& v) { return upsample_nearest2x(v[0]); }, {rnd({1, 2, 2, 3})});
  return out;
}

GradcheckEntry gradcheck_denoiser(const UNetConfig& config, std::uint64_t seed, std::size_t coords, double h) {
  DenoiserParams params = init_denoiser(config, seed);
  Rng rng(seed, "gradcheck-denoiser");
  for (const char* name : {"out.conv.weight", "out.conv.bias"}) {
    auto it = params.tensors.find(name);
    if (it == params.tensors.end()) throw ConfigError(std::string("gradcheck: missing parameter ") + name);
    for (auto& v : it->second.data()) v = 0.1f * rng.normal();
  }
  const auto n = std::size_t{2};
  const auto c = static_cast<std::size_t>(config.in_channels);
  const auto s = static_cast<std::size_t>(config.image_size);
  const Tensor x = Tensor::randn({n, c, s, s}, rng);
  const Tensor eps = Tensor::randn({n, c, s, s}, rng);
  const std::vector<int> t{static_cast<int>(rng.uniform_int(1, 1000)), static_cast<int>(rng.uniform_int(1, 1000))};

  std::vector<std::string> names;
  std::vector<Tensor> inputs;
  for (auto& [name, tensor] : params.tensors) {
    names.push_back(name);
    inputs.push_back(tensor);
  }
  TensorFn f = [&](const std::vector<Tensor>& v) {
    DenoiserParams p;
    p.config = config;
    for (std::size_t i = 0; i < v.size(); ++i) p.tensors.emplace(names[i], v[i]);
    return sub(predict_noise(p, x, t), eps);
  };
  if (coords == 0) coords = std::max<std::size_t>(1, params.parameter_count() / 100);
  return gradcheck("denoiser", f, std::move(inputs), rng, h, coords);
}

}  // namespace ulcerforge
