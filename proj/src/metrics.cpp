#include "ulcerforge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "ulcerforge/error.hpp"
#include "ulcerforge/ops.hpp"

namespace ulcerforge {

std::string EmbeddingSpec::describe() const {
  switch (kind) {
    case EmbeddingKind::Flatten:
      return "flatten";
    case EmbeddingKind::RandomConv:
      return "random_conv(seed=" + std::to_string(seed) + ", dim=" + std::to_string(dim) + ")";
    case EmbeddingKind::External:
      return "external(" + path.string() + ", dim=" + std::to_string(dim) + ")";
  }
  return "unknown";
}

FeatureTable read_feature_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read feature file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty feature file");
  const auto tab = line.find('\t');
  if (tab == std::string::npos || line.substr(0, tab) != "id") {
    throw ParseError(path.string() + ":1: header must be 'id<TAB>d'");
  }
  long d = 0;
  try {
    d = std::stol(line.substr(tab + 1));
  } catch (const std::exception&) {
    throw ParseError(path.string() + ":1: bad dimension");
  }
  if (d < 1) throw ParseError(path.string() + ":1: dimension must be positive");

  std::vector<std::string> ids;
  std::vector<double> values;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto where = path.string() + " line " + std::to_string(lineno) + ": ";
    const auto t = line.find('\t');
    if (t == std::string::npos) throw ParseError(where + "missing tab separator");
    ids.push_back(line.substr(0, t));
    const char* p = line.c_str() + t + 1;
    const char* end = line.c_str() + line.size();
    long count = 0;
    while (p < end) {
      char* next = nullptr;
      const double v = std::strtod(p, &next);
      if (next == p) throw ParseError(where + "malformed number");
      values.push_back(v);
      ++count;
      p = next;
      if (p < end) {
        if (*p != ',') throw ParseError(where + "expected ',' between values");
        ++p;
      }
    }
    if (count != d) {
      throw ParseError(where + "expected " + std::to_string(d) + " values, got " + std::to_string(count));
    }
  }
  FeatureTable table;
  table.ids = std::move(ids);
  table.rows.resize(static_cast<Eigen::Index>(table.ids.size()), d);
  for (std::size_t r = 0; r < table.ids.size(); ++r)
    for (long c = 0; c < d; ++c) table.rows(static_cast<Eigen::Index>(r), c) = values[r * d + c];
  return table;
}

void write_feature_file(const std::filesystem::path& path, const FeatureTable& table) {
  if (static_cast<std::size_t>(table.rows.rows()) != table.ids.size()) {
    throw DimensionError("feature file: " + std::to_string(table.ids.size()) + " ids for " +
                         std::to_string(table.rows.rows()) + " rows");
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write feature file " + path.string());
  out << "id\t" << table.rows.cols() << '\n';
  char buf[32];
  for (Eigen::Index r = 0; r < table.rows.rows(); ++r) {
    out << table.ids[static_cast<std::size_t>(r)] << '\t';
    for (Eigen::Index c = 0; c < table.rows.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", table.rows(r, c));
      out << (c ? "," : "") << buf;
    }
    out << '\n';
  }
}

Matrix embed(const Tensor& images, const EmbeddingSpec& spec, std::span<const std::string> ids) {
  if (spec.kind == EmbeddingKind::External) {
    FeatureTable table = read_feature_file(spec.path);
    if (spec.dim > 0 && table.rows.cols() != spec.dim) {
      throw DimensionError("embed: feature file has dimension " + std::to_string(table.rows.cols()) +
                           ", expected " + std::to_string(spec.dim));
    }
    if (ids.empty()) return table.rows;
    std::map<std::string, Eigen::Index> index;
    for (std::size_t i = 0; i < table.ids.size(); ++i) index.emplace(table.ids[i], static_cast<Eigen::Index>(i));
    std::vector<std::string> missing;
    Matrix out(static_cast<Eigen::Index>(ids.size()), table.rows.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto it = index.find(ids[i]);
      if (it == index.end()) missing.push_back(ids[i]);
      else out.row(static_cast<Eigen::Index>(i)) = table.rows.row(it->second);
    }
    if (!missing.empty()) {
      std::string list;
      for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
      throw IoError("embed: feature file " + spec.path.string() + " lacks ids: " + list);
    }
    return out;
  }

  if (!images.defined() || images.rank() != 4) throw DimensionError("embed: images must be [N,C,H,W]");
  const auto n = static_cast<Eigen::Index>(images.size(0));
  if (spec.kind == EmbeddingKind::Flatten) {
    const auto d = static_cast<Eigen::Index>(images.numel() / images.size(0));
    if (spec.dim > 0 && spec.dim != d) {
      throw DimensionError("embed: flatten dimension is " + std::to_string(d) + ", embedding expects " +
                           std::to_string(spec.dim));
    }
    Matrix out(n, d);
    auto data = images.data();
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < d; ++j) out(i, j) = data[static_cast<std::size_t>(i * d + j)];
    return out;
  }

  // Random convolutional features: dim 3x3 filters, SiLU, global average pool.
  if (spec.dim < 1) throw ConfigError("embed: random_conv needs dim >= 1");
  const std::size_t c = images.size(1);
  Rng rng(spec.seed, "random-conv-embedding");
  const auto dim = static_cast<std::size_t>(spec.dim);
  Tensor kernel = Tensor::randn({dim, c, 3, 3}, rng, 1.0f / std::sqrt(static_cast<float>(c * 9)));
  Tensor bias = Tensor::randn({dim}, rng, 0.1f);
  NoGradGuard guard;
  Tensor h = silu(conv2d(images, kernel, bias, 1, 1));
  const std::size_t hw = h.size(2) * h.size(3);
  Matrix out(n, spec.dim);
  auto hd = h.data();
  for (Eigen::Index i = 0; i < n; ++i)
    for (std::size_t k = 0; k < dim; ++k) {
      double acc = 0.0;
      for (std::size_t p = 0; p < hw; ++p) acc += hd[(static_cast<std::size_t>(i) * dim + k) * hw + p];
      out(i, static_cast<Eigen::Index>(k)) = acc / static_cast<double>(hw);
    }
  return out;
}

GaussianStats fit_gaussian(const Matrix& rows) {
  if (rows.rows() < 2) throw ConfigError("fit_gaussian: need at least 2 rows, got " + std::to_string(rows.rows()));
  GaussianStats s;
  s.n = static_cast<std::size_t>(rows.rows());
  s.mean = rows.colwise().mean().transpose();
  const Matrix centered = rows.rowwise() - s.mean.transpose();
  s.cov = (centered.transpose() * centered) / static_cast<double>(rows.rows() - 1);
  s.cov = 0.5 * (s.cov + s.cov.transpose()).eval();
  return s;
}

SymmetricEigen jacobi_eigen(const Matrix& input, double tol, int max_sweeps) {
  if (input.rows() != input.cols()) throw DimensionError("jacobi_eigen: matrix must be square");
  const Eigen::Index n = input.rows();
  Matrix a = 0.5 * (input + input.transpose());
  Matrix v = Matrix::Identity(n, n);
  const double norm = a.norm();
  auto off_norm = [&] {
    double s = 0.0;
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < n; ++i)
        if (i != j) s += a(i, j) * a(i, j);
    return std::sqrt(s);
  };
  for (int sweep = 0; sweep < max_sweeps && norm > 0.0; ++sweep) {
    if (off_norm() <= tol * norm) break;
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  return {a.diagonal(), v};
}

Matrix sqrt_psd(const Matrix& a) {
  const SymmetricEigen e = jacobi_eigen(a);
  const Vector roots = e.values.cwiseMax(0.0).cwiseSqrt();
  return e.vectors * roots.asDiagonal() * e.vectors.transpose();
}

double trace_sqrt_product(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DimensionError("trace_sqrt_product: shape mismatch");
  const Matrix ra = sqrt_psd(a);
  Matrix s = ra * b * ra;
  s = 0.5 * (s + s.transpose()).eval();
  const SymmetricEigen e = jacobi_eigen(s);
  const double scale = std::max(1.0, e.values.cwiseAbs().maxCoeff());
  double tr = 0.0;
  for (Eigen::Index i = 0; i < e.values.size(); ++i) {
    const double lambda = e.values(i);
    if (lambda < -1e-10 * scale) {
      throw NumericError("fid: matrix square root hit eigenvalue " + std::to_string(lambda) +
                         "; covariances are not positive semi-definite");
    }
    tr += std::sqrt(std::max(lambda, 0.0));
  }
  return tr;
}

double fid(const GaussianStats& a, const GaussianStats& b) {
  if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows()) {
    throw DimensionError("fid: dimension mismatch " + std::to_string(a.mean.size()) + " vs " +
                         std::to_string(b.mean.size()));
  }
  if (a.mean == b.mean && a.cov == b.cov) return 0.0;
  const double mean_term = (a.mean - b.mean).squaredNorm();
  const double value = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * trace_sqrt_product(a.cov, b.cov);
  if (value < 0.0 && value > -1e-8) return 0.0;
  return value;
}

double polynomial_kernel(const Eigen::Ref<const Vector>& u, const Eigen::Ref<const Vector>& v) {
  const double k = u.dot(v) / static_cast<double>(u.size()) + 1.0;
  return k * k * k;
}

namespace {

Matrix kernel_matrix(const Matrix& x, const Matrix& y) {
  Matrix k = (x * y.transpose()) / static_cast<double>(x.cols());
  k.array() += 1.0;
  return k.array().cube().matrix();
}

double off_diagonal_sum(const Matrix& k) { return k.sum() - k.trace(); }

}  // namespace

double mmd2_unbiased(const Matrix& x, const Matrix& y) {
  if (x.cols() != y.cols()) throw DimensionError("mmd: feature dimensions differ");
  const double m = static_cast<double>(x.rows()), n = static_cast<double>(y.rows());
  if (m < 2 || n < 2) throw ConfigError("mmd: each set needs at least 2 rows");
  const double kxx = off_diagonal_sum(kernel_matrix(x, x)) / (m * (m - 1));
  const double kyy = off_diagonal_sum(kernel_matrix(y, y)) / (n * (n - 1));
  const double kxy = kernel_matrix(x, y).sum() / (m * n);
  return kxx + kyy - 2.0 * kxy;
}

KidResult kid(const Matrix& x, const Matrix& y, int subset_size, int subsets, Rng& rng) {
  if (x.cols() != y.cols()) throw DimensionError("kid: feature dimensions differ");
  if (subset_size < 2) throw ConfigError("kid: subset_size must be >= 2");
  if (subsets < 1) throw ConfigError("kid: subsets must be >= 1");
  const Eigen::Index available = std::min(x.rows(), y.rows());
  if (subset_size > available) {
    throw ConfigError("kid: subset_size " + std::to_string(subset_size) + " exceeds available rows " +
                      std::to_string(available));
  }
  KidResult r;
  r.subsets = subsets;
  r.subset_size = subset_size;
  if (subsets == 1 && subset_size == available) {
    r.values.push_back(mmd2_unbiased(x, y));
  } else {
    auto draw = [&](const Matrix& m) {
      std::vector<Eigen::Index> idx(static_cast<std::size_t>(m.rows()));
      std::iota(idx.begin(), idx.end(), Eigen::Index{0});
      for (int i = 0; i < subset_size; ++i) {
        const auto j = rng.uniform_int(i, static_cast<std::int64_t>(idx.size()) - 1);
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
      }
      Matrix out(subset_size, m.cols());
      for (int i = 0; i < subset_size; ++i) out.row(i) = m.row(idx[static_cast<std::size_t>(i)]);
      return out;
    };
    for (int s = 0; s < subsets; ++s) {
      const Matrix xs = draw(x);
      const Matrix ys = draw(y);
      r.values.push_back(mmd2_unbiased(xs, ys));
    }
  }
  const double n = static_cast<double>(r.values.size());
  r.mean = std::accumulate(r.values.begin(), r.values.end(), 0.0) / n;
  double var = 0.0;
  for (double v : r.values) var += (v - r.mean) * (v - r.mean);
  r.stddev = std::sqrt(var / n);
  return r;
}

std::vector<double> normalize_scores(std::span<const double> values) {
  if (values.size() < 2) throw ConfigError("normalize_scores: need at least 2 values");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  if (*hi == *lo) throw ConfigError("normalize_scores: all values equal, normalization undefined");
  std::vector<double> out;
  out.reserve(values.size());
  const double range = *hi - *lo;
  for (double v : values) out.push_back(3.0 * (v - *lo) / range);
  return out;
}

nlohmann::json MetricReport::to_json() const {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json j{{"fid", opt(fid)},
                   {"kid_mean", opt(kid_mean)},
                   {"kid_std", opt(kid_std)},
                   {"embedding", embedding},
                   {"rows_a", rows_a},
                   {"rows_b", rows_b}};
  if (fid_03 || kid_03) j["normalized"] = {{"fid_03", opt(fid_03)}, {"kid_03", opt(kid_03)}};
  else j["normalized"] = nullptr;
  return j;
}

}  // namespace ulcerforge
