#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "polarquant/polar.hpp"
#include "polarquant/random.hpp"

using namespace polarquant;

namespace {

constexpr double kPi = std::numbers::pi;

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double max_abs(std::span<const double> a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

std::vector<double> random_vector(std::size_t d, Rng& rng, double scale = 1.0) {
  std::vector<double> x(d);
  for (auto& v : x) v = scale * rng.normal();
  return x;
}

}  // namespace

TEST_CASE("single pair on the positive axis") {
  const std::vector<double> x{1.0, 0.0};
  const auto rep = to_polar(std::span<const double>(x), 1);
  REQUIRE(rep.radii.size() == 1);
  CHECK(rep.radii[0] == 1.0);
  CHECK(rep.angles[0][0] == 0.0);
}

TEST_CASE("all-ones vector has pi/4 angles at both levels") {
  const std::vector<double> x{1, 1, 1, 1};
  const auto rep = to_polar(std::span<const double>(x), 2);
  CHECK(rep.angles[0][0] == doctest::Approx(kPi / 4));
  CHECK(rep.angles[0][1] == doctest::Approx(kPi / 4));
  CHECK(rep.angles[1][0] == doctest::Approx(kPi / 4));
  CHECK(rep.radii[0] == doctest::Approx(2.0));
}

TEST_CASE("level-1 angle is quadrant aware") {
  const std::vector<double> x{-3.0, 4.0};
  const auto rep = to_polar(std::span<const double>(x), 1);
  CHECK(rep.radii[0] == doctest::Approx(5.0));
  CHECK(rep.angles[0][0] == doctest::Approx(kPi - std::atan(4.0 / 3.0)).epsilon(1e-12));
  CHECK(rep.angles[0][0] == doctest::Approx(2.2143).epsilon(1e-4));

  // Third and fourth quadrants land in [pi, 2pi).
  const std::vector<double> y{-1.0, -1.0, 1.0, -1.0};
  const auto r2 = to_polar(std::span<const double>(y), 1);
  CHECK(r2.angles[0][0] == doctest::Approx(5 * kPi / 4));
  CHECK(r2.angles[0][1] == doctest::Approx(7 * kPi / 4));
}

TEST_CASE("level-1 angle never reaches 2pi") {
  const std::vector<double> x{1.0, -1e-300, 1.0, -0.0};
  const auto rep = to_polar(std::span<const double>(x), 1);
  for (double a : rep.angles[0]) {
    CHECK(a >= 0.0);
    CHECK(a < 2 * kPi);
  }
}

TEST_CASE("zero pairs get angle 0") {
  const std::vector<double> x{0, 0, -0.0, -0.0, 0, 0, 0, 0};
  const auto rep = to_polar(std::span<const double>(x), 3);
  for (const auto& level : rep.angles) {
    for (double a : level) CHECK(a == 0.0);
  }
  CHECK(rep.radii[0] == 0.0);
}

TEST_CASE("from_polar inverts the documented examples") {
  const std::vector<double> x{3, 4, 0, -5};
  const auto back = from_polar(to_polar(std::span<const double>(x), 2));
  CHECK(max_abs_diff(back, x) <= 1e-5 * 5);

  PolarRep rep;
  rep.dim = 4;
  rep.levels = 2;
  rep.radii = {2.0};
  rep.angles = {{kPi / 4, kPi / 4}, {kPi / 4}};
  const auto ones = from_polar(rep);
  for (double v : ones) CHECK(v == doctest::Approx(1.0));

  rep.radii = {0.0};
  for (double v : from_polar(rep)) CHECK(v == 0.0);
}

TEST_CASE("shape validation") {
  const std::vector<double> six(6, 1.0);
  CHECK_THROWS_AS(to_polar(std::span<const double>(six), 1), std::invalid_argument);
  const std::vector<double> eight(8, 1.0);
  CHECK_THROWS_AS(to_polar(std::span<const double>(eight), 0), std::invalid_argument);
  CHECK_THROWS_AS(to_polar(std::span<const double>(eight), 4), std::invalid_argument);

  auto rep = to_polar(std::span<const double>(eight), 2);
  rep.angles[1].push_back(0.0);
  CHECK_THROWS_AS(from_polar(rep), std::invalid_argument);
}

TEST_CASE("property: round trip, norm conservation, angle ranges") {
  Rng rng(99);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t d = std::size_t{2} << rng.uniform_index(9);  // 2..1024
    const std::size_t levels = 1 + rng.uniform_index(log2_floor(d));
    const double scale = std::pow(10.0, static_cast<double>(rng.uniform_index(7)) - 3.0);
    const auto x = random_vector(d, rng, scale);
    const auto rep = to_polar(std::span<const double>(x), levels);
    const auto back = from_polar(rep);
    REQUIRE(max_abs_diff(back, x) <= 1e-5 * std::max(1.0, max_abs(x)));

    double sq = 0.0;
    for (double v : x) sq += v * v;
    double rsq = 0.0;
    for (double r : rep.radii) {
      CHECK(r >= 0.0);
      rsq += r * r;
    }
    CHECK(rsq == doctest::Approx(sq).epsilon(1e-10));
    for (std::size_t l = 1; l <= levels; ++l) {
      const double end = l == 1 ? 2 * kPi : kPi / 2;
      for (double a : rep.level_angles(l)) {
        CHECK(a >= 0.0);
        CHECK((l == 1 ? a < end : a <= end));
      }
    }
  }
}

TEST_CASE("property: scale equivariance") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = random_vector(32, rng);
    std::vector<double> scaled(x);
    for (auto& v : scaled) v *= 8.0;  // power of two keeps the scaling exact
    const auto a = to_polar(std::span<const double>(x), 5);
    const auto b = to_polar(std::span<const double>(scaled), 5);
    CHECK(a.angles == b.angles);
    for (std::size_t i = 0; i < a.radii.size(); ++i) CHECK(b.radii[i] == 8.0 * a.radii[i]);
  }
}

TEST_CASE("property: sign flips") {
  Rng rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_vector(16, rng);
    const auto a = to_polar(std::span<const double>(x), 4);
    x[1] = -x[1];  // reflect the first pair across the horizontal axis
    const auto b = to_polar(std::span<const double>(x), 4);
    CHECK(b.angles[0][0] == doctest::Approx(2 * kPi - a.angles[0][0]).epsilon(1e-12));
    for (std::size_t l = 2; l <= 4; ++l) CHECK(a.angles[l - 1] == b.angles[l - 1]);
  }
}

TEST_CASE("batch equals independent single calls") {
  const auto x = generate_gaussian(3, 16, 4);
  const auto reps = to_polar_batch(x, 3);
  REQUIRE(reps.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto single = to_polar(x.row(i), 3);
    CHECK(reps[i].radii == single.radii);
    CHECK(reps[i].angles == single.angles);
  }
  CHECK(to_polar_batch(EmbeddingMatrix(0, 16), 3).empty());
}

TEST_CASE("batch round trip on a 64 x 128 Gaussian matrix") {
  const auto x = generate_gaussian(64, 128, 12);
  const auto back = from_polar_batch(to_polar_batch(x, 7));
  double worst = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) {
      worst = std::max(worst, static_cast<double>(std::abs(back(i, j) - x(i, j))) /
                                  std::max(1.0f, std::abs(x(i, j))));
    }
  }
  CHECK(worst <= 1e-5);
}
