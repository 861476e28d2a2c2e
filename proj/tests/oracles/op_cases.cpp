#include "op_cases.hpp"

#include <algorithm>
#include <cmath>

#include "ulcerforge/ops.hpp"

namespace oracle {

using ulcerforge::Tensor;

std::vector<OpCase> op_cases(std::uint64_t seed) {
  std::uint64_t next = seed * 64;
  auto r = [&](std::vector<std::size_t> s, double sd = 1.0) { return random_array(std::move(s), ++next, sd); };
  namespace u = ulcerforge;
  return {
      {"add", [](auto& v) { return u::add(v[0], v[1]); }, [](auto& v) { return add(v[0], v[1]); },
       {r({2, 3}), r({2, 3})}},
      {"sub", [](auto& v) { return u::sub(v[0], v[1]); }, [](auto& v) { return sub(v[0], v[1]); },
       {r({3, 2}), r({3, 2})}},
      {"mul", [](auto& v) { return u::mul(v[0], v[1]); }, [](auto& v) { return mul(v[0], v[1]); },
       {r({2, 3}), r({2, 3})}},
      {"scale", [](auto& v) { return u::scale(v[0], -1.75f); }, [](auto& v) { return scale(v[0], -1.75); },
       {r({5})}},
      {"silu", [](auto& v) { return u::silu(v[0]); }, [](auto& v) { return silu(v[0]); }, {r({7}, 2.0)}},
      {"sum", [](auto& v) { return u::sum(v[0]); }, [](auto& v) { return sum(v[0]); }, {r({2, 3, 2})}},
      {"mean", [](auto& v) { return u::mean(v[0]); }, [](auto& v) { return mean(v[0]); }, {r({4, 3})}},
      {"mse", [](auto& v) { return u::mse_loss(v[0], v[1]); }, [](auto& v) { return mse_loss(v[0], v[1]); },
       {r({2, 3}), r({2, 3})}},
      {"linear", [](auto& v) { return u::linear(v[0], v[1], v[2]); },
       [](auto& v) { return linear(v[0], v[1], v[2]); }, {r({3, 4}), r({5, 4}), r({5})}},
      {"conv_s1", [](auto& v) { return u::conv2d(v[0], v[1], v[2], 1, 1); },
       [](auto& v) { return conv2d(v[0], v[1], v[2], 1, 1); }, {r({1, 2, 4, 3}), r({2, 2, 3, 3}), r({2})}},
      {"conv_s2", [](auto& v) { return u::conv2d(v[0], v[1], v[2], 2, 1); },
       [](auto& v) { return conv2d(v[0], v[1], v[2], 2, 1); }, {r({2, 2, 5, 4}), r({3, 2, 3, 3}), r({3})}},
      {"conv_1x1", [](auto& v) { return u::conv2d(v[0], v[1], Tensor(), 1, 0); },
       [](auto& v) { return conv2d(v[0], v[1], Array{}, 1, 0); }, {r({1, 3, 2, 2}), r({2, 3, 1, 1})}},
      {"group_norm", [](auto& v) { return u::group_norm(v[0], 2, v[1], v[2]); },
       [](auto& v) { return group_norm(v[0], 2, v[1], v[2]); }, {r({2, 4, 3, 2}), r({4}), r({4})}},
      {"attention_2h", [](auto& v) { return u::self_attention(v[0], v[1], v[2], v[3], v[4], 2); },
       [](auto& v) { return self_attention(v[0], v[1], v[2], v[3], v[4], 2); },
       {r({2, 4, 2, 3}), r({4, 4}, 0.5), r({4, 4}, 0.5), r({4, 4}, 0.5), r({4, 4}, 0.5)}},
      {"channel_bias", [](auto& v) { return u::add_channel_bias(v[0], v[1]); },
       [](auto& v) { return add_channel_bias(v[0], v[1]); }, {r({2, 3, 2, 2}), r({2, 3})}},
      {"concat", [](auto& v) { return u::concat_channels(v[0], v[1]); },
       [](auto& v) { return concat_channels(v[0], v[1]); }, {r({2, 1, 2, 2}), r({2, 3, 2, 2})}},
      {"upsample", [](auto& v) { return u::upsample_nearest2x(v[0]); },
       [](auto& v) { return upsample_nearest2x(v[0]); }, {r({1, 2, 2, 3})}},
  };
}

OpCheck check_op(const OpCase& c, std::uint64_t seed) {
  OpCheck out;
  std::vector<Tensor> ts;
  for (const auto& a : c.inputs) ts.push_back(to_tensor(a).set_requires_grad(true));
  Tensor y = c.engine(ts);
  const Array expect = c.ref(c.inputs);
  if (y.shape() != expect.shape) {
    out.shape_ok = false;
    return out;
  }
  for (std::size_t i = 0; i < expect.size(); ++i)
    out.forward_error =
        std::max(out.forward_error, std::fabs(y.data()[i] - expect.v[i]) / (1.0 + std::fabs(expect.v[i])));
  const Array w = random_array(expect.shape, seed + 1000);
  ulcerforge::sum(ulcerforge::mul(y, to_tensor(w))).backward();
  std::vector<std::vector<double>> analytic;
  for (auto& t : ts) {
    std::vector<double> g(t.numel(), 0.0);
    if (t.has_grad()) g.assign(t.grad().begin(), t.grad().end());
    analytic.push_back(std::move(g));
  }
  out.gradient_error = relative_error(analytic, numeric_gradient(c.ref, c.inputs, w.v, 1e-3));
  return out;
}

}  // namespace oracle
