#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ulcerforge/rng.hpp"
#include "ulcerforge/tensor.hpp"

namespace ulcerforge {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class EmbeddingKind { Flatten, RandomConv, External };

struct EmbeddingSpec {
  EmbeddingKind kind = EmbeddingKind::Flatten;
  int dim = 0;  // flatten: 0 means C*H*W
  std::uint64_t seed = 0;
  std::filesystem::path path;

  static EmbeddingSpec flatten() { return {}; }
  static EmbeddingSpec random_conv(std::uint64_t seed, int dim) {
    return {EmbeddingKind::RandomConv, dim, seed, {}};
  }
  static EmbeddingSpec external(std::filesystem::path path, int dim) {
    return {EmbeddingKind::External, dim, 0, std::move(path)};
  }
  std::string describe() const;
};

// Feature file: header "id<TAB>d", then "image_id<TAB>v1,v2,...,vd" per row.
struct FeatureTable {
  std::vector<std::string> ids;
  Matrix rows;
};

FeatureTable read_feature_file(const std::filesystem::path& path);
void write_feature_file(const std::filesystem::path& path, const FeatureTable& table);

// N x dim embedding matrix. `ids` keys rows of an external feature file and
// is ignored for the computed embeddings.
Matrix embed(const Tensor& images, const EmbeddingSpec& spec, std::span<const std::string> ids = {});

struct GaussianStats {
  Vector mean;
  Matrix cov;  // unbiased (N-1), symmetrised
  std::size_t n = 0;
};

GaussianStats fit_gaussian(const Matrix& rows);

struct SymmetricEigen {
  Vector values;
  Matrix vectors;  // columns are eigenvectors
};

// Cyclic Jacobi eigensolver for real symmetric matrices. Sweeps until the
// off-diagonal Frobenius norm drops below tol * ||A||_F.
SymmetricEigen jacobi_eigen(const Matrix& a, double tol = 1e-12, int max_sweeps = 100);

// Principal square root of a symmetric positive semi-definite matrix;
// slightly negative eigenvalues from round-off are clamped to zero.
Matrix sqrt_psd(const Matrix& a);

// tr((A B)^{1/2}) for symmetric PSD A, B, via tr((A^{1/2} B A^{1/2})^{1/2}).
double trace_sqrt_product(const Matrix& a, const Matrix& b);

// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}).
double fid(const GaussianStats& a, const GaussianStats& b);

// Cubic polynomial kernel (u.v / d + 1)^3.
double polynomial_kernel(const Eigen::Ref<const Vector>& u, const Eigen::Ref<const Vector>& v);

// Unbiased MMD^2 estimate with the cubic polynomial kernel over full sets.
double mmd2_unbiased(const Matrix& x, const Matrix& y);

struct KidResult {
  double mean = 0.0;
  double stddev = 0.0;  // population std across subsets
  int subsets = 0;
  int subset_size = 0;
  std::vector<double> values;
};

// Subsets drawn without replacement within each draw. With subsets == 1 and
// subset_size == min(M, N), the estimate uses every row of both sets.
KidResult kid(const Matrix& x, const Matrix& y, int subset_size, int subsets, Rng& rng);

// Min-max map onto [0, 3].
std::vector<double> normalize_scores(std::span<const double> values);

struct MetricReport {
  std::optional<double> fid;
  std::optional<double> kid_mean;
  std::optional<double> kid_std;
  std::optional<double> fid_03;
  std::optional<double> kid_03;
  std::string embedding;
  std::size_t rows_a = 0;
  std::size_t rows_b = 0;

  nlohmann::json to_json() const;
};

}  // namespace ulcerforge
