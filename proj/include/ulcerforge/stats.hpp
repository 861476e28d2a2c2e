#pragma once

#include <cstddef>
#include <span>
#include <string>

namespace ulcerforge {

enum class TTestVariant { Student, Welch };

std::string to_string(TTestVariant v);
TTestVariant parse_t_variant(const std::string& text);

struct TTestResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;  // two-tailed
};

struct SampleSummary {
  double mean = 0.0;
  double sd = 0.0;             // sample (n - 1)
  double sd_population = 0.0;  // n
  std::size_t n = 0;
};

SampleSummary summarize(std::span<const double> values);

// I_x(a, b) by Lentz's continued fraction.
double regularized_incomplete_beta(double a, double b, double x);

// P(|T| >= |t|) for Student's t with df degrees of freedom.
double student_t_two_tailed(double t, double df);

TTestResult t_test_samples(std::span<const double> a, std::span<const double> b,
                           TTestVariant variant = TTestVariant::Student);

// sd_a and sd_b are sample standard deviations.
TTestResult t_test_summary(double mean_a, double sd_a, std::size_t n_a, double mean_b, double sd_b,
                           std::size_t n_b, TTestVariant variant = TTestVariant::Student);

double pearson_r(std::span<const double> x, std::span<const double> y);

}  // namespace ulcerforge
