#include "polarquant/distribution.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "polarquant/random.hpp"

namespace polarquant {
namespace {

constexpr double kPi = std::numbers::pi;
constexpr std::size_t kQuadraturePanels = 10000;

void check_level(std::size_t level, const char* op) {
  if (level == 0 || level > 62) {
    throw std::invalid_argument(std::string(op) + ": level " + std::to_string(level) +
                                " out of range");
  }
}

}  // namespace

std::size_t angle_half_dim(std::size_t level) {
  check_level(level, "angle_half_dim");
  return std::size_t{1} << (level - 1);
}

double angle_support_end(std::size_t level) {
  check_level(level, "angle_support_end");
  return level == 1 ? 2.0 * kPi : kPi / 2.0;
}

double angle_log_normalizer(std::size_t level) {
  check_level(level, "angle_log_normalizer");
  if (level == 1) return -std::log(2.0 * kPi);
  const double m = static_cast<double>(angle_half_dim(level));
  return std::lgamma(m) - (m - 2.0) * std::numbers::ln2 - 2.0 * std::lgamma(m / 2.0);
}

double angle_pdf(std::size_t level, double theta) {
  check_level(level, "angle_pdf");
  if (level == 1) {
    return (theta >= 0.0 && theta < 2.0 * kPi) ? 1.0 / (2.0 * kPi) : 0.0;
  }
  if (!(theta >= 0.0 && theta <= kPi / 2.0)) return 0.0;
  const double s = std::sin(2.0 * theta);
  if (s <= 0.0) return 0.0;
  const double m = static_cast<double>(angle_half_dim(level));
  return std::exp(angle_log_normalizer(level) + (m - 1.0) * std::log(s));
}

double radius_pdf(std::size_t d, double r) {
  if (d == 0) throw std::invalid_argument("radius_pdf: d must be positive");
  if (r < 0.0) return 0.0;
  const double half = static_cast<double>(d) / 2.0;
  if (r == 0.0) {
    // r^(d-1) vanishes unless d == 1.
    return d == 1 ? std::sqrt(2.0 / kPi) : 0.0;
  }
  const double log_density = std::numbers::ln2 - half * std::numbers::ln2 - std::lgamma(half) +
                             (static_cast<double>(d) - 1.0) * std::log(r) - r * r / 2.0;
  return std::exp(log_density);
}

double gaussian_abs_moment(double p) {
  if (p < 0.0) throw std::invalid_argument("gaussian_abs_moment: p must be >= 0");
  return std::exp(p / 2.0 * std::numbers::ln2 + std::lgamma((p + 1.0) / 2.0)) /
         std::sqrt(kPi);
}

std::pair<double, double> angle_mean_var(std::size_t level) {
  check_level(level, "angle_mean_var");
  if (level == 1) return {kPi, kPi * kPi / 3.0};
  const double mean = kPi / 4.0;
  const double var = simpson(
      [&](double t) { return (t - mean) * (t - mean) * angle_pdf(level, t); }, 0.0, kPi / 2.0,
      kQuadraturePanels);
  return {mean, var};
}

std::vector<double> sample_angles(std::size_t level, std::size_t n, std::uint64_t seed) {
  check_level(level, "sample_angles");
  if (n == 0) throw std::invalid_argument("sample_angles: n must be positive");
  Rng rng(seed);
  std::vector<double> out(n);
  if (level == 1) {
    for (auto& v : out) {
      const double a = rng.normal();
      const double b = rng.normal();
      double t = std::atan2(b, a);
      if (t < 0.0) t += 2.0 * kPi;
      if (t >= 2.0 * kPi) t = 0.0;
      v = t;
    }
    return out;
  }
  const std::size_t m = angle_half_dim(level);
  for (auto& v : out) {
    double sx = 0.0;
    double sy = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double z = rng.normal();
      sx += z * z;
    }
    for (std::size_t i = 0; i < m; ++i) {
      const double z = rng.normal();
      sy += z * z;
    }
    v = std::atan2(std::sqrt(sy), std::sqrt(sx));
  }
  return out;
}

double angle_cdf(std::size_t level, double theta) {
  check_level(level, "angle_cdf");
  const double end = angle_support_end(level);
  if (theta <= 0.0) return 0.0;
  if (theta >= end) return 1.0;
  if (level == 1) return theta / end;
  // Integrate the shorter side and use symmetry about pi/4 for precision.
  const double mid = kPi / 4.0;
  const auto pdf = [&](double t) { return angle_pdf(level, t); };
  if (theta <= mid) return simpson(pdf, 0.0, theta, 4096);
  return 1.0 - simpson(pdf, 0.0, end - theta, 4096);
}

double angle_inverse_cdf(std::size_t level, double p) {
  check_level(level, "angle_inverse_cdf");
  if (!(p >= 0.0 && p <= 1.0)) {
    throw std::invalid_argument("angle_inverse_cdf: p must lie in [0, 1]");
  }
  const double end = angle_support_end(level);
  if (level == 1) return p * end;
  if (p == 0.0) return 0.0;
  if (p == 1.0) return end;
  double lo = 0.0;
  double hi = end;
  for (int it = 0; it < 100 && hi - lo > 1e-15; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (angle_cdf(level, mid) < p) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

AngleCdfTable::AngleCdfTable(std::size_t level, std::size_t grid)
    : level_(level), end_(angle_support_end(level)) {
  if (grid < 2) throw std::invalid_argument("AngleCdfTable: grid too small");
  step_ = end_ / static_cast<double>(grid);
  cdf_.resize(grid + 1);
  pdf_.resize(grid + 1);
  for (std::size_t i = 0; i <= grid; ++i) {
    // Level 1 is evaluated at the open end as the same constant density.
    const double t = std::min(step_ * static_cast<double>(i), std::nextafter(end_, 0.0));
    pdf_[i] = angle_pdf(level, t);
  }
  cdf_[0] = 0.0;
  const auto pdf = [&](double t) { return angle_pdf(level, t); };
  for (std::size_t i = 1; i <= grid; ++i) {
    const double a = step_ * static_cast<double>(i - 1);
    const double b = std::min(step_ * static_cast<double>(i), end_);
    cdf_[i] = cdf_[i - 1] + (level == 1 ? (b - a) / end_ : simpson(pdf, a, b, 8));
  }
  const double total = cdf_.back();
  for (auto& c : cdf_) c /= total;
  for (auto& f : pdf_) f /= total;
}

double AngleCdfTable::operator()(double theta) const {
  if (theta <= 0.0) return 0.0;
  if (theta >= end_) return 1.0;
  const double pos = theta / step_;
  const auto i = std::min(static_cast<std::size_t>(pos), cdf_.size() - 2);
  const double t = pos - static_cast<double>(i);
  // Cubic Hermite on [i, i+1] with slopes pdf * step.
  const double h00 = (1.0 + 2.0 * t) * (1.0 - t) * (1.0 - t);
  const double h10 = t * (1.0 - t) * (1.0 - t);
  const double h01 = t * t * (3.0 - 2.0 * t);
  const double h11 = t * t * (t - 1.0);
  const double v = h00 * cdf_[i] + h10 * step_ * pdf_[i] + h01 * cdf_[i + 1] +
                   h11 * step_ * pdf_[i + 1];
  return std::clamp(v, 0.0, 1.0);
}

}  // namespace polarquant
