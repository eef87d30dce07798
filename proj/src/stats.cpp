#include "polarquant/stats.hpp"

#include <algorithm>
#include <boost/math/special_functions/gamma.hpp>
#include <cmath>
#include <stdexcept>

#include "polarquant/distribution.hpp"

namespace polarquant {

void CompensatedSum::add(double v) {
  const double t = sum_ + v;
  if (std::abs(sum_) >= std::abs(v)) {
    compensation_ += (sum_ - t) + v;
  } else {
    compensation_ += (v - t) + sum_;
  }
  sum_ = t;
}

double mean(std::span<const double> xs) {
  if (xs.empty()) throw std::invalid_argument("mean: empty input");
  CompensatedSum s;
  for (double x : xs) s.add(x);
  return s.value() / static_cast<double>(xs.size());
}

double variance(std::span<const double> xs) {
  if (xs.size() < 2) throw std::invalid_argument("variance: need at least two values");
  const double mu = mean(xs);
  CompensatedSum s;
  for (double x : xs) s.add((x - mu) * (x - mu));
  return s.value() / static_cast<double>(xs.size() - 1);
}

double pearson_correlation(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) {
    throw std::invalid_argument("pearson_correlation: need two equal-length series");
  }
  const double mx = mean(xs);
  const double my = mean(ys);
  CompensatedSum sxy;
  CompensatedSum sxx;
  CompensatedSum syy;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    sxy.add(dx * dy);
    sxx.add(dx * dx);
    syy.add(dy * dy);
  }
  const double denom = std::sqrt(sxx.value() * syy.value());
  return denom > 0.0 ? sxy.value() / denom : 0.0;
}

double ks_statistic(std::span<const double> samples, const std::function<double(double)>& cdf) {
  if (samples.empty()) throw std::invalid_argument("ks_statistic: empty input");
  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  double d = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const double f = cdf(sorted[i]);
    d = std::max(d, std::max(static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n));
  }
  return d;
}

double ks_critical_value(double alpha, std::size_t n) {
  if (!(alpha > 0.0 && alpha < 1.0) || n == 0) {
    throw std::invalid_argument("ks_critical_value: need 0 < alpha < 1 and n > 0");
  }
  return std::sqrt(-0.5 * std::log(alpha / 2.0)) / std::sqrt(static_cast<double>(n));
}

double chi_square_survival(double statistic, std::size_t dof) {
  if (dof == 0) throw std::invalid_argument("chi_square_survival: dof must be positive");
  if (statistic <= 0.0) return 1.0;
  return boost::math::gamma_q(static_cast<double>(dof) / 2.0, statistic / 2.0);
}

ChiSquareResult angle_chi_square(std::span<const double> samples, std::size_t level,
                                 std::size_t bins) {
  if (samples.empty() || bins < 2) {
    throw std::invalid_argument("angle_chi_square: need samples and at least two bins");
  }
  const double end = angle_support_end(level);
  const Histogram hist = make_histogram(samples, 0.0, end, bins);
  const AngleCdfTable cdf(level);
  const double n = static_cast<double>(samples.size());
  // Adjacent bins are pooled until each group expects at least five
  // samples; the sparse tails would otherwise dominate the statistic.
  std::vector<double> group_expected;
  std::vector<double> group_observed;
  double prev = 0.0;
  double pending_expected = 0.0;
  double pending_observed = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    const double next = b + 1 == bins ? 1.0 : cdf(end * static_cast<double>(b + 1) /
                                                  static_cast<double>(bins));
    pending_expected += n * (next - prev);
    pending_observed += static_cast<double>(hist.counts[b]);
    prev = next;
    if (pending_expected >= 5.0) {
      group_expected.push_back(pending_expected);
      group_observed.push_back(pending_observed);
      pending_expected = 0.0;
      pending_observed = 0.0;
    }
  }
  if (pending_expected > 0.0 || pending_observed > 0.0) {
    if (group_expected.empty()) {
      group_expected.push_back(pending_expected);
      group_observed.push_back(pending_observed);
    } else {
      group_expected.back() += pending_expected;
      group_observed.back() += pending_observed;
    }
  }
  ChiSquareResult result;
  for (std::size_t g = 0; g < group_expected.size(); ++g) {
    const double diff = group_observed[g] - group_expected[g];
    result.statistic += diff * diff / group_expected[g];
  }
  result.dof = group_expected.size() > 1 ? group_expected.size() - 1 : 1;
  result.p_value = chi_square_survival(result.statistic, result.dof);
  return result;
}

Histogram make_histogram(std::span<const double> xs, double lo, double hi, std::size_t bins) {
  if (bins == 0 || !(hi > lo)) throw std::invalid_argument("make_histogram: bad range or bins");
  Histogram h{lo, hi, std::vector<std::size_t>(bins, 0)};
  const double scale = static_cast<double>(bins) / (hi - lo);
  for (double x : xs) {
    const double pos = (x - lo) * scale;
    std::size_t b = 0;
    if (pos >= static_cast<double>(bins)) {
      b = bins - 1;
    } else if (pos > 0.0) {
      b = static_cast<std::size_t>(pos);
    }
    ++h.counts[b];
  }
  return h;
}

}  // namespace polarquant
