#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

namespace polarquant {

// Densities of the polar coordinates of a standard Gaussian vector.
//
// Level-l angles compare the norms of two independent 2^(l-1)-dimensional
// Gaussian halves. Level 1 is uniform on [0, 2pi); level l >= 2 has density
//
//   f_l(t) = Gamma(m) / (2^(m-2) Gamma(m/2)^2) * sin(2t)^(m-1),  m = 2^(l-1)
//
// on [0, pi/2]. Normalizers are evaluated in log space so large levels do not
// overflow.

/// Number of Gaussian coordinates on each side of a level-l angle.
std::size_t angle_half_dim(std::size_t level);

/// Support end: 2pi for level 1, pi/2 otherwise.
double angle_support_end(std::size_t level);

/// Density of a level-l angle. Returns 0 outside the support.
double angle_pdf(std::size_t level, double theta);

/// Log of the normalizing constant of f_l (level >= 2).
double angle_log_normalizer(std::size_t level);

/// Density of ||x||_2 for x ~ N(0, I_d) (chi distribution). 0 for r < 0.
double radius_pdf(std::size_t d, double r);

/// E|z|^p for z ~ N(0,1): 2^(p/2) Gamma((p+1)/2) / sqrt(pi).
double gaussian_abs_moment(double p);

/// Mean and variance of the level-l angle. Level 1 returns the uniform
/// values (pi, pi^2/3); level >= 2 returns pi/4 and a quadrature variance.
std::pair<double, double> angle_mean_var(std::size_t level);

/// n i.i.d. level-l angles, drawn as atan(||y||/||x||) from two independent
/// 2^(l-1)-dim Gaussian halves (level 1 uses atan2 on one Gaussian pair).
std::vector<double> sample_angles(std::size_t level, std::size_t n, std::uint64_t seed);

/// CDF of the level-l angle by composite Simpson quadrature.
double angle_cdf(std::size_t level, double theta);

/// Inverse CDF by bisection on angle_cdf. Throws std::invalid_argument
/// unless p is in [0, 1].
double angle_inverse_cdf(std::size_t level, double p);

/// Composite Simpson rule for f on [a, b] with `panels` (rounded up to even)
/// subintervals.
template <typename F>
double simpson(F&& f, double a, double b, std::size_t panels) {
  if (panels % 2 != 0) ++panels;
  if (panels == 0) panels = 2;
  const double h = (b - a) / static_cast<double>(panels);
  double odd = 0.0;
  double even = 0.0;
  for (std::size_t i = 1; i < panels; ++i) {
    const double v = f(a + h * static_cast<double>(i));
    if (i % 2 == 1) {
      odd += v;
    } else {
      even += v;
    }
  }
  return h / 3.0 * (f(a) + f(b) + 4.0 * odd + 2.0 * even);
}

/// Precomputed CDF on a fine grid with cubic Hermite interpolation (the pdf
/// supplies the derivatives). For bulk CDF evaluation in goodness-of-fit
/// tests.
class AngleCdfTable {
 public:
  explicit AngleCdfTable(std::size_t level, std::size_t grid = 1 << 14);

  std::size_t level() const { return level_; }
  double operator()(double theta) const;

 private:
  std::size_t level_;
  double end_;
  double step_;
  std::vector<double> cdf_;
  std::vector<double> pdf_;
};

}  // namespace polarquant
