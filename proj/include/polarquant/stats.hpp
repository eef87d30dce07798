#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace polarquant {

/// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double v);
  double value() const { return sum_ + compensation_; }

 private:
  double sum_ = 0.0;
  double compensation_ = 0.0;
};

double mean(std::span<const double> xs);
/// Unbiased sample variance (n - 1 denominator).
double variance(std::span<const double> xs);
double pearson_correlation(std::span<const double> xs, std::span<const double> ys);

/// sup |F_n(x) - F(x)| for the empirical CDF of `samples`.
double ks_statistic(std::span<const double> samples, const std::function<double(double)>& cdf);

/// Asymptotic one-sample KS critical value c(alpha) / sqrt(n).
double ks_critical_value(double alpha, std::size_t n);

struct ChiSquareResult {
  double statistic = 0.0;
  std::size_t dof = 0;
  double p_value = 0.0;
};

/// Pearson chi-square goodness of fit of level-l angle samples against the
/// analytic density using `bins` equal-width bins over the support. Bins
/// expecting fewer than five samples are pooled with their neighbours.
ChiSquareResult angle_chi_square(std::span<const double> samples, std::size_t level,
                                 std::size_t bins);

/// Upper tail probability of a chi-square variable with `dof` degrees of
/// freedom.
double chi_square_survival(double statistic, std::size_t dof);

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::size_t> counts;

  double bin_width() const { return (hi - lo) / static_cast<double>(counts.size()); }
};

/// Equal-width histogram on [lo, hi]; values outside are clamped into the
/// edge bins.
Histogram make_histogram(std::span<const double> xs, double lo, double hi, std::size_t bins);

}  // namespace polarquant
