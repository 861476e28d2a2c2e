#include "ulcerforge/unet.hpp"

#include <algorithm>
#include <cmath>

#include "ulcerforge/error.hpp"
#include "ulcerforge/ops.hpp"
#include "ulcerforge/rng.hpp"

namespace ulcerforge {

namespace {

using std::to_string;

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

struct LayoutBuilder {
  std::vector<ParamSpec> specs;

  void conv(const std::string& name, int cin, int cout, int k, bool zero = false) {
    const std::size_t fan_in = sz(cin * k * k);
    specs.push_back({name + ".weight", {sz(cout), sz(cin), sz(k), sz(k)},
                     zero ? ParamInit::Zero : ParamInit::FanIn, fan_in});
    specs.push_back({name + ".bias", {sz(cout)}, ParamInit::Zero, fan_in});
  }
  void linear(const std::string& name, int in, int out) {
    specs.push_back({name + ".weight", {sz(out), sz(in)}, ParamInit::FanIn, sz(in)});
    specs.push_back({name + ".bias", {sz(out)}, ParamInit::Zero, sz(in)});
  }
  void norm(const std::string& name, int c) {
    specs.push_back({name + ".gamma", {sz(c)}, ParamInit::One, 1});
    specs.push_back({name + ".beta", {sz(c)}, ParamInit::Zero, 1});
  }
  void res_block(const std::string& name, int cin, int cout, int temb) {
    norm(name + ".norm1", cin);
    conv(name + ".conv1", cin, cout, 3);
    linear(name + ".time", temb, cout);
    norm(name + ".norm2", cout);
    conv(name + ".conv2", cout, cout, 3);
    if (cin != cout) conv(name + ".skip", cin, cout, 1);
  }
  void attention(const std::string& name, int c) {
    norm(name + ".norm", c);
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      specs.push_back({name + "." + w, {sz(c), sz(c)}, ParamInit::FanIn, sz(c), 1.0f});
    }
  }
};

// Forward-pass helper bound to one parameter set.
struct Forward {
  const DenoiserParams& p;
  const UNetConfig& cfg;
  Tensor temb_act;  // silu(time MLP output), [N, D]

  const Tensor& w(const std::string& name) const { return p.at(name); }

  Tensor conv(const Tensor& x, const std::string& name, int stride = 1, int pad = 1) const {
    return conv2d(x, w(name + ".weight"), w(name + ".bias"), stride, pad);
  }
  Tensor norm(const Tensor& x, const std::string& name) const {
    return group_norm(x, cfg.groups_for_norm, w(name + ".gamma"), w(name + ".beta"));
  }
  Tensor res_block(const Tensor& x, const std::string& name) const {
    Tensor h = conv(silu(norm(x, name + ".norm1")), name + ".conv1");
    h = add_channel_bias(h, linear(temb_act, w(name + ".time.weight"), w(name + ".time.bias")));
    h = conv(silu(norm(h, name + ".norm2")), name + ".conv2");
    const bool project = p.tensors.count(name + ".skip.weight") > 0;
    return add(h, project ? conv(x, name + ".skip", 1, 0) : x);
  }
  Tensor attention(const Tensor& x, const std::string& name) const {
    Tensor h = norm(x, name + ".norm");
    h = self_attention(h, w(name + ".wq"), w(name + ".wk"), w(name + ".wv"), w(name + ".wo"),
                       cfg.attention_heads);
    return add(x, h);
  }
};

}  // namespace

bool UNetConfig::has_attention(int level) const {
  return std::find(attention_levels.begin(), attention_levels.end(), level) !=
         attention_levels.end();
}

void UNetConfig::validate() const {
  if (in_channels != 1 && in_channels != 3)
    throw ConfigError("model.in_channels must be 1 or 3, got " + to_string(in_channels));
  if (base_channels < 1) throw ConfigError("model.base_channels must be >= 1");
  if (channel_multipliers.empty()) throw ConfigError("model.channel_multipliers must not be empty");
  for (int m : channel_multipliers)
    if (m < 1) throw ConfigError("model.channel_multipliers entries must be >= 1");
  for (int l : attention_levels)
    if (l < 0 || l >= levels())
      throw ConfigError("model.attention_levels entry " + to_string(l) + " outside 0.." +
                        to_string(levels() - 1));
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
    throw ConfigError("model.time_embed_dim must be a positive even number");
  if (groups_for_norm < 1 || base_channels % groups_for_norm != 0)
    throw ConfigError("model.base_channels " + to_string(base_channels) +
                      " not divisible by model.groups_for_norm " + to_string(groups_for_norm));
  if (res_blocks < 1) throw ConfigError("model.res_blocks must be >= 1");
  if (attention_heads < 1) throw ConfigError("model.attention_heads must be >= 1");
  for (int l : attention_levels)
    if (channels_at(l) % attention_heads != 0)
      throw ConfigError("attention channels " + to_string(channels_at(l)) +
                        " not divisible by model.attention_heads " + to_string(attention_heads));
  const int factor = 1 << (levels() - 1);
  if (image_size < 1 || image_size % factor != 0)
    throw ConfigError("model.image_size " + to_string(image_size) + " not divisible by 2^(levels-1) = " +
                      to_string(factor));
}

void to_json(nlohmann::json& j, const UNetConfig& c) {
  j = nlohmann::json{{"in_channels", c.in_channels},
                     {"base_channels", c.base_channels},
                     {"channel_multipliers", c.channel_multipliers},
                     {"attention_levels", c.attention_levels},
                     {"time_embed_dim", c.time_embed_dim},
                     {"groups_for_norm", c.groups_for_norm},
                     {"res_blocks", c.res_blocks},
                     {"attention_heads", c.attention_heads},
                     {"image_size", c.image_size}};
}

void from_json(const nlohmann::json& j, UNetConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "in_channels") c.in_channels = value.get<int>();
    else if (key == "base_channels") c.base_channels = value.get<int>();
    else if (key == "channel_multipliers") c.channel_multipliers = value.get<std::vector<int>>();
    else if (key == "attention_levels") c.attention_levels = value.get<std::vector<int>>();
    else if (key == "time_embed_dim") c.time_embed_dim = value.get<int>();
    else if (key == "groups_for_norm") c.groups_for_norm = value.get<int>();
    else if (key == "res_blocks") c.res_blocks = value.get<int>();
    else if (key == "attention_heads") c.attention_heads = value.get<int>();
    else if (key == "image_size") c.image_size = value.get<int>();
    else throw ConfigError("model: unknown key '" + key + "'");
  }
}

std::vector<ParamSpec> parameter_layout(const UNetConfig& cfg) {
  cfg.validate();
  LayoutBuilder b;
  const int d = cfg.time_embed_dim;
  b.linear("time.linear1", d, d);
  b.linear("time.linear2", d, d);
  b.conv("conv_in", cfg.in_channels, cfg.base_channels, 3);

  int ch = cfg.base_channels;
  for (int l = 0; l < cfg.levels(); ++l) {
    const int out = cfg.channels_at(l);
    for (int r = 0; r < cfg.res_blocks; ++r) {
      const std::string name = "down." + to_string(l) + ".res." + to_string(r);
      b.res_block(name, ch, out, d);
      ch = out;
      if (cfg.has_attention(l)) b.attention("down." + to_string(l) + ".attn." + to_string(r), ch);
    }
    if (l + 1 < cfg.levels()) b.conv("down." + to_string(l) + ".downsample", ch, ch, 3);
  }
  for (int l = cfg.levels() - 1; l >= 0; --l) {
    const int out = cfg.channels_at(l);
    for (int r = 0; r < cfg.res_blocks; ++r) {
      const int cin = r == 0 ? ch + out : ch;
      b.res_block("up." + to_string(l) + ".res." + to_string(r), cin, out, d);
      ch = out;
      if (cfg.has_attention(l)) b.attention("up." + to_string(l) + ".attn." + to_string(r), ch);
    }
    if (l > 0) b.conv("up." + to_string(l) + ".upsample", ch, ch, 3);
  }
  b.norm("out.norm", ch);
  b.conv("out.conv", ch, cfg.in_channels, 3, /*zero=*/true);
  return b.specs;
}

const Tensor& DenoiserParams::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ConfigError("denoiser: missing parameter '" + name + "'");
  return it->second;
}

std::size_t DenoiserParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors) n += t.numel();
  return n;
}

std::vector<Tensor> DenoiserParams::list() const {
  std::vector<Tensor> out;
  out.reserve(tensors.size());
  for (const auto& [_, t] : tensors) out.push_back(t);
  return out;
}

void DenoiserParams::set_requires_grad(bool value) {
  for (auto& [_, t] : tensors) t.set_requires_grad(value);
}

void DenoiserParams::zero_grad() {
  for (auto& [_, t] : tensors) t.zero_grad();
}

DenoiserParams DenoiserParams::clone() const {
  DenoiserParams copy;
  copy.config = config;
  for (const auto& [name, t] : tensors) {
    Tensor c = t.detach();
    c.set_requires_grad(t.requires_grad());
    copy.tensors.emplace(name, std::move(c));
  }
  return copy;
}

DenoiserParams init_denoiser(const UNetConfig& config, std::uint64_t seed) {
  DenoiserParams params;
  params.config = config;
  Rng rng(seed, "init");
  for (const auto& spec : parameter_layout(config)) {
    Tensor t(spec.shape);
    switch (spec.init) {
      case ParamInit::Zero:
        break;
      case ParamInit::One:
        std::fill(t.data().begin(), t.data().end(), 1.0f);
        break;
      case ParamInit::FanIn: {
        const float stddev = std::sqrt(spec.gain / static_cast<float>(spec.fan_in));
        for (auto& v : t.data()) v = rng.normal() * stddev;
        break;
      }
    }
    t.set_requires_grad(true);
    params.tensors.emplace(spec.name, std::move(t));
  }
  return params;
}

Tensor predict_noise(const DenoiserParams& params, const Tensor& x_t, std::span<const int> t) {
  const UNetConfig& cfg = params.config;
  if (!x_t.defined() || x_t.rank() != 4) throw DimensionError("predict_noise: input must be [N,C,H,W]");
  const std::size_t n = x_t.size(0);
  if (x_t.size(1) != sz(cfg.in_channels)) {
    throw DimensionError("predict_noise: axis 1 (channels) is " + to_string(x_t.size(1)) +
                         ", model expects " + to_string(cfg.in_channels));
  }
  const std::size_t factor = std::size_t{1} << (cfg.levels() - 1);
  if (x_t.size(2) % factor != 0 || x_t.size(3) % factor != 0) {
    throw ConfigError("predict_noise: spatial size " + to_string(x_t.size(2)) + "x" +
                      to_string(x_t.size(3)) + " not divisible by " + to_string(factor));
  }
  std::vector<int> steps(t.begin(), t.end());
  if (steps.size() == 1 && n > 1) steps.assign(n, steps[0]);
  if (steps.size() != n) {
    throw DimensionError("predict_noise: " + to_string(t.size()) + " timesteps for batch of " +
                         to_string(n));
  }
  for (int s : steps)
    if (s < 0) throw IndexError("predict_noise: negative timestep " + to_string(s));

  Forward f{params, cfg, {}};
  Tensor temb = time_embedding(std::span<const int>(steps), cfg.time_embed_dim);
  temb = linear(temb, f.w("time.linear1.weight"), f.w("time.linear1.bias"));
  temb = linear(silu(temb), f.w("time.linear2.weight"), f.w("time.linear2.bias"));
  f.temb_act = silu(temb);

  Tensor h = f.conv(x_t, "conv_in");
  std::vector<Tensor> skips;
  for (int l = 0; l < cfg.levels(); ++l) {
    for (int r = 0; r < cfg.res_blocks; ++r) {
      h = f.res_block(h, "down." + to_string(l) + ".res." + to_string(r));
      if (cfg.has_attention(l)) h = f.attention(h, "down." + to_string(l) + ".attn." + to_string(r));
    }
    skips.push_back(h);
    if (l + 1 < cfg.levels()) h = f.conv(h, "down." + to_string(l) + ".downsample", 2, 1);
  }
  for (int l = cfg.levels() - 1; l >= 0; --l) {
    h = concat_channels(h, skips[sz(l)]);
    for (int r = 0; r < cfg.res_blocks; ++r) {
      h = f.res_block(h, "up." + to_string(l) + ".res." + to_string(r));
      if (cfg.has_attention(l)) h = f.attention(h, "up." + to_string(l) + ".attn." + to_string(r));
    }
    if (l > 0) h = f.conv(upsample_nearest2x(h), "up." + to_string(l) + ".upsample");
  }
  h = silu(f.norm(h, "out.norm"));
  return f.conv(h, "out.conv");
}

Tensor predict_noise(const DenoiserParams& params, const Tensor& x_t, int t) {
  const int ts[1] = {t};
  return predict_noise(params, x_t, std::span<const int>(ts));
}

}  // namespace ulcerforge
