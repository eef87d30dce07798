#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "polarquant/distribution.hpp"
#include "polarquant/polar.hpp"
#include "polarquant/precondition.hpp"
#include "polarquant/random.hpp"
#include "polarquant/stats.hpp"

using namespace polarquant;

namespace {

constexpr double kPi = std::numbers::pi;

// sin^2 of a level-l angle is Beta(m/2, m/2) with m = 2^(l-1), so the CDF
// at theta is the regularized incomplete beta I_x(m/2, m/2) at
// x = sin^2(theta). For m = 2 and m = 4 it has the polynomial forms below.
double beta_cdf_oracle(std::size_t level, double theta) {
  const double x = std::sin(theta) * std::sin(theta);
  if (level == 2) return x;                      // I_x(1, 1)
  if (level == 3) return x * x * (3.0 - 2.0 * x);  // I_x(2, 2)
  throw std::logic_error("no closed form for this level");
}

}  // namespace

TEST_CASE("angle_pdf closed-form values") {
  CHECK(angle_pdf(2, kPi / 4) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(angle_pdf(1, 1.0) == doctest::Approx(1.0 / (2 * kPi)).epsilon(1e-12));
  CHECK(angle_pdf(1, 1.0) == doctest::Approx(0.159155).epsilon(1e-5));
  // Level 3: Gamma(4) / (2^2 Gamma(2)^2) sin^3(2t) = 1.5 sin^3(2t).
  CHECK(angle_pdf(3, 0.3) == doctest::Approx(1.5 * std::pow(std::sin(0.6), 3)).epsilon(1e-12));
}

TEST_CASE("angle_pdf is zero outside the support") {
  CHECK(angle_pdf(2, -0.1) == 0.0);
  CHECK(angle_pdf(2, kPi / 2 + 0.1) == 0.0);
  CHECK(angle_pdf(1, 2 * kPi) == 0.0);
  CHECK(angle_pdf(1, -1e-9) == 0.0);
}

TEST_CASE("every level density integrates to one") {
  for (std::size_t l = 2; l <= 12; ++l) {
    const double total = simpson([&](double t) { return angle_pdf(l, t); }, 0.0, kPi / 2, 10000);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  }
  const double uniform = simpson([](double t) { return angle_pdf(1, t); }, 0.0,
                                 std::nextafter(2 * kPi, 0.0), 10000);
  CHECK(uniform == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("large levels do not overflow") {
  // Gamma(2^(l-1)) overflows a double near l = 9.
  CHECK(std::isfinite(angle_pdf(11, kPi / 4)));
  CHECK(angle_pdf(11, kPi / 4) > 10.0);
}

TEST_CASE("radius_pdf matches the chi distribution") {
  CHECK(radius_pdf(2, 1.0) == doctest::Approx(std::exp(-0.5)).epsilon(1e-12));
  CHECK(radius_pdf(2, 1.0) == doctest::Approx(0.60653).epsilon(1e-5));
  CHECK(radius_pdf(1, 0.0) == doctest::Approx(0.79788).epsilon(1e-5));
  CHECK(radius_pdf(4, 0.0) == 0.0);
  CHECK(radius_pdf(3, -1.0) == 0.0);
  for (std::size_t d : {1, 2, 16, 128}) {
    const double total = simpson([&](double r) { return radius_pdf(d, r); }, 0.0, 50.0, 100000);
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("radius_pdf matches the empirical norm distribution") {
  Rng rng(13);
  const std::size_t d = 16;
  std::vector<double> norms(50000);
  for (auto& n : norms) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double z = rng.normal();
      s += z * z;
    }
    n = std::sqrt(s);
  }
  const auto cdf = [&](double r) {
    return simpson([&](double t) { return radius_pdf(d, t); }, 0.0, r, 2000);
  };
  CHECK(ks_statistic(norms, cdf) <= ks_critical_value(0.01, norms.size()));
}

TEST_CASE("gaussian absolute moments") {
  CHECK(gaussian_abs_moment(0) == doctest::Approx(1.0));
  CHECK(gaussian_abs_moment(2) == doctest::Approx(1.0));
  CHECK(gaussian_abs_moment(4) == doctest::Approx(3.0));
  CHECK(gaussian_abs_moment(1) == doctest::Approx(std::sqrt(2.0 / kPi)));

  Rng rng(3);
  double s = 0.0;
  const int n = 1000000;
  for (int i = 0; i < n; ++i) {
    const double z = rng.normal();
    s += z * z * z * z;
  }
  CHECK(std::abs(s / n - gaussian_abs_moment(4)) <= 0.02 * 3.0);
}

TEST_CASE("angle mean and variance") {
  const auto [m2, v2] = angle_mean_var(2);
  CHECK(m2 == kPi / 4);
  // Integral of (t - pi/4)^2 sin(2t) over [0, pi/2] = pi^2/16 - 1/2.
  CHECK(v2 == doctest::Approx(kPi * kPi / 16 - 0.5).epsilon(1e-9));
  CHECK(v2 == doctest::Approx(0.11685).epsilon(1e-4));

  const auto [m1, v1] = angle_mean_var(1);
  CHECK(m1 == doctest::Approx(kPi));
  CHECK(v1 == doctest::Approx(kPi * kPi / 3));

  double previous = v2;
  for (std::size_t l = 3; l <= 7; ++l) {
    const double v = angle_mean_var(l).second;
    CHECK(v < previous);
    // Calibrated from the quadrature sweep: var * (m - 1) rises from 0.117
    // toward 1/4.
    CHECK(v * static_cast<double>(angle_half_dim(l) - 1) <= 0.25);
    previous = v;
  }
}

TEST_CASE("sample_angles") {
  SUBCASE("level 2 sample mean") {
    const auto s = sample_angles(2, 100000, 1);
    CHECK(std::abs(mean(s) - kPi / 4) <= 0.01);
  }
  SUBCASE("level 1 is uniform") {
    const auto s = sample_angles(1, 100000, 2);
    CHECK(ks_statistic(s, [](double t) { return t / (2 * kPi); }) <= 0.01);
  }
  SUBCASE("deterministic") { CHECK(sample_angles(3, 100, 5) == sample_angles(3, 100, 5)); }
  SUBCASE("level 3 matches the analytic CDF") {
    const auto s = sample_angles(3, 100000, 4);
    CHECK(ks_statistic(s, [](double t) { return beta_cdf_oracle(3, t); }) <=
          ks_critical_value(0.01, s.size()));
  }
  SUBCASE("n = 0 rejected") { CHECK_THROWS_AS(sample_angles(2, 0, 1), std::invalid_argument); }
}

TEST_CASE("angle_cdf against the incomplete beta oracle") {
  for (std::size_t l : {2, 3}) {
    for (double t = 0.05; t < kPi / 2; t += 0.1) {
      CHECK(angle_cdf(l, t) == doctest::Approx(beta_cdf_oracle(l, t)).epsilon(1e-10));
    }
  }
}

TEST_CASE("angle_cdf and inverse") {
  for (std::size_t l = 1; l <= 6; ++l) {
    CHECK(angle_cdf(l, angle_support_end(l)) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(angle_cdf(l, 0.0) == 0.0);
  }
  for (std::size_t l = 2; l <= 6; ++l) {
    CHECK(angle_inverse_cdf(l, 0.5) == doctest::Approx(kPi / 4).epsilon(1e-6));
  }
  CHECK(std::abs(angle_cdf(3, angle_inverse_cdf(3, 0.37)) - 0.37) <= 1e-8);
  CHECK_THROWS_AS(angle_inverse_cdf(3, 1.5), std::invalid_argument);
  CHECK_THROWS_AS(angle_inverse_cdf(3, -0.1), std::invalid_argument);

  double prev = 0.0;
  for (double t = 0.0; t <= kPi / 2; t += 0.01) {
    const double c = angle_cdf(4, t);
    CHECK(c >= prev);
    prev = c;
  }
}

TEST_CASE("interpolated CDF table agrees with direct quadrature") {
  for (std::size_t l = 1; l <= 5; ++l) {
    const AngleCdfTable table(l);
    const double end = angle_support_end(l);
    for (double f = 0.013; f < 1.0; f += 0.07) {
      CHECK(table(f * end) == doctest::Approx(angle_cdf(l, f * end)).epsilon(1e-9));
    }
  }
}

TEST_CASE("transformed Gaussian angles follow the level densities") {
  const auto x = generate_gaussian(100000, 64, 21);
  const auto y = apply(x, build_rotation(64, 22));
  const auto reps = to_polar_batch(y, 4);
  for (std::size_t l = 1; l <= 4; ++l) {
    std::vector<double> angles;
    angles.reserve(reps.size());
    for (const auto& r : reps) angles.push_back(r.angles[l - 1][0]);
    const auto chi = angle_chi_square(angles, l, 64);
    CHECK(chi.p_value > 0.01);
  }
}

TEST_CASE("chi-square test has power against the wrong level") {
  const auto s = sample_angles(3, 100000, 8);
  CHECK(angle_chi_square(s, 4, 64).p_value < 1e-6);
  CHECK(angle_chi_square(s, 3, 64).p_value > 0.01);
}
