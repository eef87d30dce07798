#include "polarquant/polar.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "polarquant/parallel.hpp"

namespace polarquant {
namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double first_level_angle(double a, double b) {
  if (a == 0.0 && b == 0.0) return 0.0;
  double angle = std::atan2(b, a);
  if (angle < 0.0) angle += kTwoPi;
  // -tiny + 2pi rounds to 2pi, which is outside the half-open range.
  if (angle >= kTwoPi) angle = 0.0;
  return angle;
}

double upper_level_angle(double a, double b) {
  if (a == 0.0 && b == 0.0) return 0.0;
  return std::atan2(b, a);
}

template <typename T>
PolarRep to_polar_impl(std::span<const T> x, std::size_t levels) {
  check_polar_shape(x.size(), levels);
  PolarRep rep;
  rep.dim = x.size();
  rep.levels = levels;
  rep.angles.resize(levels);

  std::vector<double> current(x.begin(), x.end());
  for (double v : current) {
    if (!std::isfinite(v)) throw std::invalid_argument("to_polar: non-finite input");
  }
  for (std::size_t l = 1; l <= levels; ++l) {
    const std::size_t half = current.size() / 2;
    std::vector<double> next(half);
    auto& angles = rep.angles[l - 1];
    angles.resize(half);
    for (std::size_t j = 0; j < half; ++j) {
      const double a = current[2 * j];
      const double b = current[2 * j + 1];
      angles[j] = l == 1 ? first_level_angle(a, b) : upper_level_angle(a, b);
      next[j] = std::hypot(a, b);
    }
    current = std::move(next);
  }
  rep.radii = std::move(current);
  return rep;
}

}  // namespace

bool is_power_of_two(std::size_t d) { return d != 0 && (d & (d - 1)) == 0; }

std::size_t log2_floor(std::size_t d) {
  std::size_t l = 0;
  while (d > 1) {
    d >>= 1;
    ++l;
  }
  return l;
}

void check_polar_shape(std::size_t d, std::size_t levels) {
  if (!is_power_of_two(d) || d < 2) {
    throw std::invalid_argument("polar transform: dimension " + std::to_string(d) +
                                " is not a power of two >= 2");
  }
  const std::size_t max_levels = log2_floor(d);
  if (levels < 1 || levels > max_levels) {
    throw std::invalid_argument("polar transform: levels " + std::to_string(levels) +
                                " outside [1, " + std::to_string(max_levels) + "]");
  }
}

PolarRep to_polar(std::span<const double> x, std::size_t levels) {
  return to_polar_impl(x, levels);
}

PolarRep to_polar(std::span<const float> x, std::size_t levels) {
  return to_polar_impl(x, levels);
}

std::vector<double> from_polar(const PolarRep& rep) {
  check_polar_shape(rep.dim, rep.levels);
  if (rep.angles.size() != rep.levels || rep.radii.size() != (rep.dim >> rep.levels)) {
    throw std::invalid_argument("from_polar: radii/level count does not match dim and levels");
  }
  for (std::size_t l = 1; l <= rep.levels; ++l) {
    if (rep.angles[l - 1].size() != (rep.dim >> l)) {
      throw std::invalid_argument("from_polar: level " + std::to_string(l) + " has " +
                                  std::to_string(rep.angles[l - 1].size()) + " angles, expected " +
                                  std::to_string(rep.dim >> l));
    }
  }
  std::vector<double> current = rep.radii;
  for (std::size_t l = rep.levels; l >= 1; --l) {
    const auto& angles = rep.angles[l - 1];
    std::vector<double> expanded(angles.size() * 2);
    for (std::size_t j = 0; j < angles.size(); ++j) {
      expanded[2 * j] = current[j] * std::cos(angles[j]);
      expanded[2 * j + 1] = current[j] * std::sin(angles[j]);
    }
    current = std::move(expanded);
  }
  return current;
}

std::vector<PolarRep> to_polar_batch(const EmbeddingMatrix& x, std::size_t levels) {
  std::vector<PolarRep> reps(x.rows());
  if (x.rows() == 0) return reps;
  check_polar_shape(x.cols(), levels);
  parallel_for(x.rows(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) reps[i] = to_polar(x.row(i), levels);
  });
  return reps;
}

EmbeddingMatrix from_polar_batch(std::span<const PolarRep> reps) {
  if (reps.empty()) return EmbeddingMatrix();
  const std::size_t d = reps.front().dim;
  EmbeddingMatrix out(reps.size(), d);
  parallel_for(reps.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      if (reps[i].dim != d) throw std::invalid_argument("from_polar_batch: mixed dimensions");
      const auto row = from_polar(reps[i]);
      auto dst = out.row(i);
      for (std::size_t j = 0; j < d; ++j) dst[j] = static_cast<float>(row[j]);
    }
  });
  return out;
}

}  // namespace polarquant
