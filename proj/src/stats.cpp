#include "ulcerforge/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ulcerforge/error.hpp"

namespace ulcerforge {

std::string to_string(TTestVariant v) { return v == TTestVariant::Student ? "student" : "welch"; }

TTestVariant parse_t_variant(const std::string& text) {
  if (text == "student") return TTestVariant::Student;
  if (text == "welch") return TTestVariant::Welch;
  throw ConfigError("t-test variant must be 'student' or 'welch', got '" + text + "'");
}

SampleSummary summarize(std::span<const double> values) {
  SampleSummary s;
  s.n = values.size();
  if (s.n == 0) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(s.n);
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.sd_population = std::sqrt(ss / static_cast<double>(s.n));
  s.sd = s.n > 1 ? std::sqrt(ss / static_cast<double>(s.n - 1)) : 0.0;
  return s;
}

namespace {

double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-15;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw NumericError("incomplete beta: continued fraction did not converge");
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw ConfigError("incomplete beta: a and b must be positive");
  if (!(x >= 0.0 && x <= 1.0)) throw ConfigError("incomplete beta: x must lie in [0,1]");
  if (x == 0.0 || x == 1.0) return x;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_tailed(double t, double df) {
  if (!(df > 0.0)) throw ConfigError("t distribution: df must be positive");
  if (std::isinf(t)) return 0.0;
  return regularized_incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
}

namespace {

TTestResult from_moments(double mean_a, double var_a, double na, double mean_b, double var_b, double nb,
                         TTestVariant variant) {
  if (na < 2 || nb < 2) throw ConfigError("t-test: each sample needs at least 2 values");
  if (var_a < 0 || var_b < 0) throw ConfigError("t-test: standard deviations must be non-negative");
  const double diff = mean_a - mean_b;
  TTestResult r;
  if (var_a == 0.0 && var_b == 0.0) {
    if (diff == 0.0) {
      r.df = variant == TTestVariant::Student ? na + nb - 2 : std::numeric_limits<double>::quiet_NaN();
      return r;  // t = 0, p = 1 by convention
    }
    throw NumericError("t-test: zero variance in both samples with different means; t is undefined");
  }
  double se = 0.0;
  if (variant == TTestVariant::Student) {
    const double pooled = ((na - 1) * var_a + (nb - 1) * var_b) / (na + nb - 2);
    se = std::sqrt(pooled * (1.0 / na + 1.0 / nb));
    r.df = na + nb - 2;
  } else {
    const double qa = var_a / na, qb = var_b / nb;
    se = std::sqrt(qa + qb);
    r.df = (qa + qb) * (qa + qb) / (qa * qa / (na - 1) + qb * qb / (nb - 1));
  }
  r.t = diff / se;
  r.p = student_t_two_tailed(r.t, r.df);
  return r;
}

}  // namespace

TTestResult t_test_samples(std::span<const double> a, std::span<const double> b, TTestVariant variant) {
  const SampleSummary sa = summarize(a), sb = summarize(b);
  if (sa.n < 2 || sb.n < 2) throw ConfigError("t-test: each sample needs at least 2 values");
  return from_moments(sa.mean, sa.sd * sa.sd, static_cast<double>(sa.n), sb.mean, sb.sd * sb.sd,
                      static_cast<double>(sb.n), variant);
}

TTestResult t_test_summary(double mean_a, double sd_a, std::size_t n_a, double mean_b, double sd_b,
                           std::size_t n_b, TTestVariant variant) {
  if (sd_a < 0 || sd_b < 0) throw ConfigError("t-test: standard deviations must be non-negative");
  return from_moments(mean_a, sd_a * sd_a, static_cast<double>(n_a), mean_b, sd_b * sd_b,
                      static_cast<double>(n_b), variant);
}

double pearson_r(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    throw DimensionError("pearson_r: series lengths differ (" + std::to_string(x.size()) + " vs " +
                         std::to_string(y.size()) + ")");
  }
  if (x.size() < 2) throw ConfigError("pearson_r: need at least 2 pairs");
  const SampleSummary sx = summarize(x), sy = summarize(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - sx.mean, dy = y[i] - sy.mean;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw NumericError("pearson_r: constant series, correlation undefined");
  const double r = sxy / std::sqrt(sxx * syy);
  return std::clamp(r, -1.0, 1.0);
}

}  // namespace ulcerforge
