#pragma once

// Independent double-precision reference implementations used as test oracles.
// Plain loops, no shared code with the library beyond the Tensor type.

#include <Eigen/Dense>
#include <cstddef>
#include <functional>
#include <vector>

#include "ulcerforge/tensor.hpp"
#include "ulcerforge/unet.hpp"

namespace oracle {

struct Array {
  std::vector<std::size_t> shape;
  std::vector<double> v;

  std::size_t size() const { return v.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
};

Array from_tensor(const ulcerforge::Tensor& t);
ulcerforge::Tensor to_tensor(const Array& a);
// Random values rounded to float, so the float engine sees the same point.
Array random_array(std::vector<std::size_t> shape, std::uint64_t seed, double stddev = 1.0);

Array add(const Array& a, const Array& b);
Array sub(const Array& a, const Array& b);
Array mul(const Array& a, const Array& b);
Array scale(const Array& a, double f);
Array silu(const Array& x);
Array sum(const Array& x);
Array mean(const Array& x);
Array mse_loss(const Array& a, const Array& b);
Array linear(const Array& x, const Array& w, const Array& b);
Array conv2d(const Array& x, const Array& k, const Array& b, int stride, int pad);
Array group_norm(const Array& x, int groups, const Array& gamma, const Array& beta, double eps = 1e-5);
Array self_attention(const Array& x, const Array& wq, const Array& wk, const Array& wv, const Array& wo,
                     int heads);
Array add_channel_bias(const Array& x, const Array& v);
Array concat_channels(const Array& a, const Array& b);
Array upsample_nearest2x(const Array& x);
std::vector<double> time_embedding(int t, int dim);

using Fn = std::function<Array(const std::vector<Array>&)>;

// Central-difference gradient of sum(w * f(inputs)) in double, one vector per input.
std::vector<std::vector<double>> numeric_gradient(const Fn& f, std::vector<Array> inputs,
                                                  const std::vector<double>& w, double h = 1e-3);

// ||a - n|| / ||n|| over the concatenation of all inputs.
double relative_error(const std::vector<std::vector<double>>& analytic,
                      const std::vector<std::vector<double>>& numeric);

double cubic_kernel(const Eigen::VectorXd& u, const Eigen::VectorXd& v);
double mmd2_bruteforce(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

// Frechet distance via Eigen's self-adjoint solver.
double fid_eigen(const Eigen::VectorXd& mu_a, const Eigen::MatrixXd& cov_a, const Eigen::VectorXd& mu_b,
                 const Eigen::MatrixXd& cov_b);

// Two-tailed p from boost's Student t distribution.
double student_p_two_tailed(double t, double df);

// Parameter count from the architecture table, written out by hand.
std::size_t unet_parameter_count(const ulcerforge::UNetConfig& c);

}  // namespace oracle
