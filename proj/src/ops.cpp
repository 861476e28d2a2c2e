#include "ulcerforge/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <string>

#include "ulcerforge/error.hpp"

namespace ulcerforge {

namespace {

using NodePtr = std::shared_ptr<detail::Node>;
using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

// Wraps a forward result. The backward closure is recorded only when some
// input needs a gradient and recording is enabled.
Tensor make_result(Shape shape, std::vector<float> data,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(detail::Node&)> backward_fn) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  if (grad_enabled()) {
    for (const Tensor* t : inputs) {
      if (t->defined() && t->requires_grad()) needs = true;
    }
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) {
      node->parents.push_back(t->defined() ? t->node() : nullptr);
    }
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor::from_node(std::move(node));
}

detail::Node* grad_target(detail::Node& self, std::size_t i) {
  detail::Node* p = self.parents[i].get();
  if (!p || !p->requires_grad) return nullptr;
  p->ensure_grad();
  return p;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

void require_rank(const char* op, const char* name, const Tensor& t, std::size_t rank) {
  if (!t.defined()) throw DimensionError(std::string(op) + ": " + name + " is undefined");
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + name + " must have rank " +
                         std::to_string(rank) + ", got shape " + shape_str(t.shape()));
  }
}

void require_axis(const char* op, const char* name, const Tensor& t, std::size_t axis,
                  std::size_t expected) {
  if (t.size(axis) != expected) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " of " + name +
                         " is " + std::to_string(t.size(axis)) + ", expected " +
                         std::to_string(expected));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<float> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* p = grad_target(self, k)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<float> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    if (auto* p = grad_target(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
    if (auto* p = grad_target(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<float> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    const auto& x = self.parents[0]->data;
    const auto& y = self.parents[1]->data;
    if (auto* p = grad_target(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * y[i];
    }
    if (auto* p = grad_target(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * x[i];
    }
  });
}

Tensor scale(const Tensor& a, float factor) {
  std::vector<float> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return make_result(a.shape(), std::move(out), {&a}, [factor](detail::Node& self) {
    if (auto* p = grad_target(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * factor;
    }
  });
}

Tensor silu(const Tensor& x) {
  std::vector<float> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = in[i] / (1.0f + std::exp(-in[i]));
  }
  return make_result(x.shape(), std::move(out), {&x}, [](detail::Node& self) {
    auto* p = grad_target(self, 0);
    if (!p) return;
    const auto& in = p->data;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const float s = 1.0f / (1.0f + std::exp(-in[i]));
      p->grad[i] += self.grad[i] * s * (1.0f + in[i] * (1.0f - s));
    }
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return make_result({}, {static_cast<float>(acc)}, {&x}, [](detail::Node& self) {
    if (auto* p = grad_target(self, 0)) {
      const float g = self.grad[0];
      for (auto& v : p->grad) v += g;
    }
  });
}

Tensor mean(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  const double n = static_cast<double>(x.numel());
  return make_result({}, {static_cast<float>(acc / n)}, {&x}, [n](detail::Node& self) {
    if (auto* p = grad_target(self, 0)) {
      const float g = static_cast<float>(self.grad[0] / n);
      for (auto& v : p->grad) v += g;
    }
  });
}

Tensor mse_loss(const Tensor& prediction, const Tensor& target) {
  require_same_shape("mse_loss", prediction, target);
  auto a = prediction.data(), b = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  const double n = static_cast<double>(a.size());
  return make_result({}, {static_cast<float>(acc / n)}, {&prediction, &target},
                     [n](detail::Node& self) {
                       const auto& a = self.parents[0]->data;
                       const auto& b = self.parents[1]->data;
                       const double g = self.grad[0] * 2.0 / n;
                       if (auto* p = grad_target(self, 0)) {
                         for (std::size_t i = 0; i < a.size(); ++i) {
                           p->grad[i] += static_cast<float>(g * (static_cast<double>(a[i]) - b[i]));
                         }
                       }
                       if (auto* p = grad_target(self, 1)) {
                         for (std::size_t i = 0; i < a.size(); ++i) {
                           p->grad[i] -= static_cast<float>(g * (static_cast<double>(a[i]) - b[i]));
                         }
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank("linear", "input", x, 2);
  require_rank("linear", "weight", weight, 2);
  const std::size_t n = x.size(0), in = x.size(1), out_dim = weight.size(0);
  require_axis("linear", "weight", weight, 1, in);
  if (bias.defined()) {
    require_rank("linear", "bias", bias, 1);
    require_axis("linear", "bias", bias, 0, out_dim);
  }
  std::vector<float> out(n * out_dim);
  MapMat y(out.data(), n, out_dim);
  y.noalias() = ConstMapMat(x.data().data(), n, in) *
                ConstMapMat(weight.data().data(), out_dim, in).transpose();
  if (bias.defined()) {
    auto b = bias.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < out_dim; ++o) y(i, o) += b[o];
  }
  return make_result({n, out_dim}, std::move(out), {&x, &weight, &bias},
                     [n, in, out_dim](detail::Node& self) {
                       ConstMapMat g(self.grad.data(), n, out_dim);
                       if (auto* p = grad_target(self, 0)) {
                         MapMat(p->grad.data(), n, in).noalias() +=
                             g * ConstMapMat(self.parents[1]->data.data(), out_dim, in);
                       }
                       if (auto* p = grad_target(self, 1)) {
                         MapMat(p->grad.data(), out_dim, in).noalias() +=
                             g.transpose() * ConstMapMat(self.parents[0]->data.data(), n, in);
                       }
                       if (auto* p = grad_target(self, 2)) {
                         for (std::size_t o = 0; o < out_dim; ++o) {
                           double acc = 0.0;
                           for (std::size_t i = 0; i < n; ++i) acc += g(i, o);
                           p->grad[o] += static_cast<float>(acc);
                         }
                       }
                     });
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              int padding) {
  require_rank("conv2d", "input", input, 4);
  require_rank("conv2d", "kernel", kernel, 4);
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1, got " + std::to_string(stride));
  if (padding < 0) throw ConfigError("conv2d: padding must be >= 0");
  const std::size_t n = input.size(0), c = input.size(1), h = input.size(2), w = input.size(3);
  const std::size_t o = kernel.size(0), kh = kernel.size(2), kw = kernel.size(3);
  require_axis("conv2d", "kernel", kernel, 1, c);
  if (bias.defined()) {
    require_rank("conv2d", "bias", bias, 1);
    require_axis("conv2d", "bias", bias, 0, o);
  }
  const std::size_t pad = static_cast<std::size_t>(padding);
  const std::size_t st = static_cast<std::size_t>(stride);
  if (kh > h + 2 * pad) {
    throw DimensionError("conv2d: axis 2 (height) kernel extent " + std::to_string(kh) +
                         " exceeds padded input " + std::to_string(h + 2 * pad));
  }
  if (kw > w + 2 * pad) {
    throw DimensionError("conv2d: axis 3 (width) kernel extent " + std::to_string(kw) +
                         " exceeds padded input " + std::to_string(w + 2 * pad));
  }
  const std::size_t ho = (h + 2 * pad - kh) / st + 1;
  const std::size_t wo = (w + 2 * pad - kw) / st + 1;
  const std::size_t k = c * kh * kw;
  const std::size_t hw_out = ho * wo;
  const std::size_t cols_n = n * hw_out;

  // im2col over the whole batch: cols[k, sample*hw_out + pos].
  auto cols = std::make_shared<std::vector<float>>(k * cols_n, 0.0f);
  auto x = input.data();
  for (std::size_t ci = 0; ci < c; ++ci) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        float* row = cols->data() + ((ci * kh + ky) * kw + kx) * cols_n;
        for (std::size_t s = 0; s < n; ++s) {
          const float* plane = x.data() + (s * c + ci) * h * w;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * st + ky) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * st + kx) -
                                        static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              row[s * hw_out + oy * wo + ox] = plane[iy * w + ix];
            }
          }
        }
      }
    }
  }

  RowMat result = ConstMapMat(kernel.data().data(), o, k) * ConstMapMat(cols->data(), k, cols_n);
  std::vector<float> out(n * o * hw_out);
  auto b = bias.defined() ? bias.data() : std::span<const float>{};
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t oc = 0; oc < o; ++oc) {
      const float bo = b.empty() ? 0.0f : b[oc];
      float* dst = out.data() + (s * o + oc) * hw_out;
      const float* src = result.data() + oc * cols_n + s * hw_out;
      for (std::size_t p = 0; p < hw_out; ++p) dst[p] = src[p] + bo;
    }
  }

  return make_result(
      {n, o, ho, wo}, std::move(out), {&input, &kernel, &bias},
      [=](detail::Node& self) {
        RowMat g(o, cols_n);
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t oc = 0; oc < o; ++oc) {
            const float* src = self.grad.data() + (s * o + oc) * hw_out;
            for (std::size_t p = 0; p < hw_out; ++p) g(oc, s * hw_out + p) = src[p];
          }
        if (auto* p = grad_target(self, 1)) {
          MapMat(p->grad.data(), o, k).noalias() +=
              g * ConstMapMat(cols->data(), k, cols_n).transpose();
        }
        if (auto* p = grad_target(self, 2)) {
          for (std::size_t oc = 0; oc < o; ++oc) {
            double acc = 0.0;
            for (std::size_t q = 0; q < cols_n; ++q) acc += g(oc, q);
            p->grad[oc] += static_cast<float>(acc);
          }
        }
        if (auto* p = grad_target(self, 0)) {
          RowMat dcols =
              ConstMapMat(self.parents[1]->data.data(), o, k).transpose() * g;
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const float* row = dcols.data() + ((ci * kh + ky) * kw + kx) * cols_n;
                for (std::size_t s = 0; s < n; ++s) {
                  float* plane = p->grad.data() + (s * c + ci) * h * w;
                  for (std::size_t oy = 0; oy < ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * st + ky) -
                                              static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                      const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * st + kx) -
                                                static_cast<std::ptrdiff_t>(pad);
                      if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                      plane[iy * w + ix] += row[s * hw_out + oy * wo + ox];
                    }
                  }
                }
              }
        }
      });
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  float eps) {
  if (!x.defined() || x.rank() < 2) throw DimensionError("group_norm: input must have rank >= 2");
  const std::size_t n = x.size(0), c = x.size(1);
  if (groups < 1 || c % static_cast<std::size_t>(groups) != 0) {
    throw ConfigError("group_norm: channels " + std::to_string(c) +
                      " not divisible by groups " + std::to_string(groups));
  }
  if (!(eps > 0.0f)) throw ConfigError("group_norm: eps must be > 0");
  require_rank("group_norm", "gamma", gamma, 1);
  require_rank("group_norm", "beta", beta, 1);
  require_axis("group_norm", "gamma", gamma, 0, c);
  require_axis("group_norm", "beta", beta, 0, c);

  const std::size_t g = static_cast<std::size_t>(groups);
  const std::size_t spatial = x.numel() / (n * c);
  const std::size_t cpg = c / g;
  const std::size_t m = cpg * spatial;
  auto in = x.data();
  auto ga = gamma.data(), be = beta.data();
  auto xhat = std::make_shared<std::vector<float>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(n * g);
  std::vector<float> out(x.numel());
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t gi = 0; gi < g; ++gi) {
      const std::size_t base = (s * c + gi * cpg) * spatial;
      double mu = 0.0;
      for (std::size_t i = 0; i < m; ++i) mu += in[base + i];
      mu /= static_cast<double>(m);
      double var = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        const double d = in[base + i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(m);
      const double r = 1.0 / std::sqrt(var + eps);
      (*rstd)[s * g + gi] = r;
      for (std::size_t cc = 0; cc < cpg; ++cc) {
        const std::size_t ch = gi * cpg + cc;
        for (std::size_t p = 0; p < spatial; ++p) {
          const std::size_t idx = base + cc * spatial + p;
          const double xh = (in[idx] - mu) * r;
          (*xhat)[idx] = static_cast<float>(xh);
          out[idx] = static_cast<float>(ga[ch] * xh + be[ch]);
        }
      }
    }
  }
  return make_result(x.shape(), std::move(out), {&x, &gamma, &beta},
                     [=](detail::Node& self) {
                       const auto& gam = self.parents[1]->data;
                       if (auto* p = grad_target(self, 1)) {
                         for (std::size_t s = 0; s < n; ++s)
                           for (std::size_t ch = 0; ch < c; ++ch) {
                             double acc = 0.0;
                             const std::size_t base = (s * c + ch) * spatial;
                             for (std::size_t q = 0; q < spatial; ++q)
                               acc += static_cast<double>(self.grad[base + q]) * (*xhat)[base + q];
                             p->grad[ch] += static_cast<float>(acc);
                           }
                       }
                       if (auto* p = grad_target(self, 2)) {
                         for (std::size_t s = 0; s < n; ++s)
                           for (std::size_t ch = 0; ch < c; ++ch) {
                             double acc = 0.0;
                             const std::size_t base = (s * c + ch) * spatial;
                             for (std::size_t q = 0; q < spatial; ++q) acc += self.grad[base + q];
                             p->grad[ch] += static_cast<float>(acc);
                           }
                       }
                       if (auto* p = grad_target(self, 0)) {
                         std::vector<double> dxh(m);
                         for (std::size_t s = 0; s < n; ++s)
                           for (std::size_t gi = 0; gi < g; ++gi) {
                             const std::size_t base = (s * c + gi * cpg) * spatial;
                             double sum_d = 0.0, sum_dx = 0.0;
                             for (std::size_t i = 0; i < m; ++i) {
                               const std::size_t ch = gi * cpg + i / spatial;
                               dxh[i] = static_cast<double>(self.grad[base + i]) * gam[ch];
                               sum_d += dxh[i];
                               sum_dx += dxh[i] * (*xhat)[base + i];
                             }
                             const double r = (*rstd)[s * g + gi];
                             const double md = static_cast<double>(m);
                             for (std::size_t i = 0; i < m; ++i) {
                               p->grad[base + i] += static_cast<float>(
                                   r / md * (md * dxh[i] - sum_d - (*xhat)[base + i] * sum_dx));
                             }
                           }
                       }
                     });
}

namespace {

struct AttentionCache {
  // Per sample: projected q, k, v [C,L], attention weights per head [L,L],
  // and the attended values before the output projection [C,L].
  std::vector<RowMat> q, k, v, attn, mixed;
};

}  // namespace

Tensor self_attention(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv,
                      const Tensor& wo, int heads) {
  require_rank("self_attention", "input", x, 4);
  const std::size_t n = x.size(0), c = x.size(1), len = x.size(2) * x.size(3);
  if (heads < 1 || c % static_cast<std::size_t>(heads) != 0) {
    throw ConfigError("self_attention: channels " + std::to_string(c) +
                      " not divisible by heads " + std::to_string(heads));
  }
  for (const auto* wt : {&wq, &wk, &wv, &wo}) {
    require_rank("self_attention", "projection", *wt, 2);
    require_axis("self_attention", "projection", *wt, 0, c);
    require_axis("self_attention", "projection", *wt, 1, c);
  }
  const std::size_t nh = static_cast<std::size_t>(heads);
  const std::size_t dh = c / nh;
  const float inv_scale = 1.0f / std::sqrt(static_cast<float>(dh));

  auto cache = std::make_shared<AttentionCache>();
  cache->q.resize(n);
  cache->k.resize(n);
  cache->v.resize(n);
  cache->attn.resize(n * nh);
  cache->mixed.resize(n);
  ConstMapMat mq(wq.data().data(), c, c), mk(wk.data().data(), c, c),
      mv(wv.data().data(), c, c), mo(wo.data().data(), c, c);
  std::vector<float> out(x.numel());
  for (std::size_t s = 0; s < n; ++s) {
    ConstMapMat xs(x.data().data() + s * c * len, c, len);
    cache->q[s] = mq * xs;
    cache->k[s] = mk * xs;
    cache->v[s] = mv * xs;
    cache->mixed[s].resize(c, len);
    for (std::size_t hd = 0; hd < nh; ++hd) {
      const auto qh = cache->q[s].middleRows(hd * dh, dh);
      const auto kh = cache->k[s].middleRows(hd * dh, dh);
      RowMat scores = (qh.transpose() * kh) * inv_scale;  // [L query, L key]
      for (std::size_t i = 0; i < len; ++i) {
        const float mx = scores.row(i).maxCoeff();
        double z = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          scores(i, j) = std::exp(scores(i, j) - mx);
          z += scores(i, j);
        }
        const float inv = static_cast<float>(1.0 / z);
        scores.row(i) *= inv;
      }
      cache->mixed[s].middleRows(hd * dh, dh).noalias() =
          cache->v[s].middleRows(hd * dh, dh) * scores.transpose();
      cache->attn[s * nh + hd] = std::move(scores);
    }
    MapMat(out.data() + s * c * len, c, len).noalias() = mo * cache->mixed[s];
  }

  return make_result(
      x.shape(), std::move(out), {&x, &wq, &wk, &wv, &wo},
      [=](detail::Node& self) {
        ConstMapMat mq(self.parents[1]->data.data(), c, c), mk(self.parents[2]->data.data(), c, c),
            mv(self.parents[3]->data.data(), c, c), mo(self.parents[4]->data.data(), c, c);
        auto* px = grad_target(self, 0);
        auto* pq = grad_target(self, 1);
        auto* pk = grad_target(self, 2);
        auto* pv = grad_target(self, 3);
        auto* po = grad_target(self, 4);
        for (std::size_t s = 0; s < n; ++s) {
          ConstMapMat gout(self.grad.data() + s * c * len, c, len);
          ConstMapMat xs(self.parents[0]->data.data() + s * c * len, c, len);
          if (po) MapMat(po->grad.data(), c, c).noalias() += gout * cache->mixed[s].transpose();
          RowMat dmixed = mo.transpose() * gout;
          RowMat dq(c, len), dk(c, len), dv(c, len);
          for (std::size_t hd = 0; hd < nh; ++hd) {
            const RowMat& a = cache->attn[s * nh + hd];
            const auto dmh = dmixed.middleRows(hd * dh, dh);
            dv.middleRows(hd * dh, dh).noalias() = dmh * a;
            RowMat da = dmh.transpose() * cache->v[s].middleRows(hd * dh, dh);  // [L,L]
            for (std::size_t i = 0; i < len; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j < len; ++j) dot += static_cast<double>(da(i, j)) * a(i, j);
              for (std::size_t j = 0; j < len; ++j)
                da(i, j) = a(i, j) * (da(i, j) - static_cast<float>(dot));
            }
            da *= inv_scale;
            dq.middleRows(hd * dh, dh).noalias() = cache->k[s].middleRows(hd * dh, dh) * da.transpose();
            dk.middleRows(hd * dh, dh).noalias() = cache->q[s].middleRows(hd * dh, dh) * da;
          }
          if (pq) MapMat(pq->grad.data(), c, c).noalias() += dq * xs.transpose();
          if (pk) MapMat(pk->grad.data(), c, c).noalias() += dk * xs.transpose();
          if (pv) MapMat(pv->grad.data(), c, c).noalias() += dv * xs.transpose();
          if (px) {
            MapMat gx(px->grad.data() + s * c * len, c, len);
            gx.noalias() += mq.transpose() * dq;
            gx.noalias() += mk.transpose() * dk;
            gx.noalias() += mv.transpose() * dv;
          }
        }
      });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& v) {
  require_rank("add_channel_bias", "input", x, 4);
  require_rank("add_channel_bias", "bias", v, 2);
  const std::size_t n = x.size(0), c = x.size(1), spatial = x.size(2) * x.size(3);
  require_axis("add_channel_bias", "bias", v, 0, n);
  require_axis("add_channel_bias", "bias", v, 1, c);
  std::vector<float> out(x.numel());
  auto in = x.data(), b = v.data();
  for (std::size_t nc = 0; nc < n * c; ++nc)
    for (std::size_t p = 0; p < spatial; ++p) out[nc * spatial + p] = in[nc * spatial + p] + b[nc];
  return make_result(x.shape(), std::move(out), {&x, &v}, [n, c, spatial](detail::Node& self) {
    if (auto* p = grad_target(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
    if (auto* p = grad_target(self, 1)) {
      for (std::size_t nc = 0; nc < n * c; ++nc) {
        double acc = 0.0;
        for (std::size_t q = 0; q < spatial; ++q) acc += self.grad[nc * spatial + q];
        p->grad[nc] += static_cast<float>(acc);
      }
    }
  });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank("concat_channels", "first input", a, 4);
  require_rank("concat_channels", "second input", b, 4);
  for (std::size_t axis : {0u, 2u, 3u}) require_axis("concat_channels", "second input", b, axis, a.size(axis));
  const std::size_t n = a.size(0), ca = a.size(1), cb = b.size(1);
  const std::size_t spatial = a.size(2) * a.size(3);
  std::vector<float> out(n * (ca + cb) * spatial);
  auto da = a.data(), db = b.data();
  for (std::size_t s = 0; s < n; ++s) {
    std::copy_n(da.data() + s * ca * spatial, ca * spatial, out.data() + s * (ca + cb) * spatial);
    std::copy_n(db.data() + s * cb * spatial, cb * spatial,
                out.data() + (s * (ca + cb) + ca) * spatial);
  }
  return make_result({n, ca + cb, a.size(2), a.size(3)}, std::move(out), {&a, &b},
                     [n, ca, cb, spatial](detail::Node& self) {
                       const std::size_t stride = (ca + cb) * spatial;
                       if (auto* p = grad_target(self, 0)) {
                         for (std::size_t s = 0; s < n; ++s)
                           for (std::size_t i = 0; i < ca * spatial; ++i)
                             p->grad[s * ca * spatial + i] += self.grad[s * stride + i];
                       }
                       if (auto* p = grad_target(self, 1)) {
                         for (std::size_t s = 0; s < n; ++s)
                           for (std::size_t i = 0; i < cb * spatial; ++i)
                             p->grad[s * cb * spatial + i] += self.grad[s * stride + ca * spatial + i];
                       }
                     });
}

Tensor upsample_nearest2x(const Tensor& x) {
  require_rank("upsample_nearest2x", "input", x, 4);
  const std::size_t nc = x.size(0) * x.size(1), h = x.size(2), w = x.size(3);
  std::vector<float> out(nc * 4 * h * w);
  auto in = x.data();
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx)
        out[(p * 2 * h + y) * 2 * w + xx] = in[(p * h + y / 2) * w + xx / 2];
  return make_result({x.size(0), x.size(1), 2 * h, 2 * w}, std::move(out), {&x},
                     [nc, h, w](detail::Node& self) {
                       auto* p = grad_target(self, 0);
                       if (!p) return;
                       for (std::size_t q = 0; q < nc; ++q)
                         for (std::size_t y = 0; y < 2 * h; ++y)
                           for (std::size_t xx = 0; xx < 2 * w; ++xx)
                             p->grad[(q * h + y / 2) * w + xx / 2] +=
                                 self.grad[(q * 2 * h + y) * 2 * w + xx];
                     });
}

Tensor time_embedding(std::span<const int> t, int dim) {
  if (dim < 2 || dim % 2 != 0) {
    throw ConfigError("time_embedding: dim must be a positive even number, got " +
                      std::to_string(dim));
  }
  const std::size_t half = static_cast<std::size_t>(dim) / 2;
  std::vector<float> out(t.size() * static_cast<std::size_t>(dim));
  for (std::size_t r = 0; r < t.size(); ++r) {
    if (t[r] < 0) throw ConfigError("time_embedding: timestep must be >= 0");
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / dim);
      const double arg = t[r] * freq;
      out[r * dim + i] = static_cast<float>(std::sin(arg));
      out[r * dim + half + i] = static_cast<float>(std::cos(arg));
    }
  }
  return Tensor({t.size(), static_cast<std::size_t>(dim)}, std::move(out));
}

Tensor time_embedding(int t, int dim) {
  const int ts[1] = {t};
  Tensor batched = time_embedding(std::span<const int>(ts), dim);
  return Tensor({static_cast<std::size_t>(dim)},
                std::vector<float>(batched.data().begin(), batched.data().end()));
}

}  // namespace ulcerforge
