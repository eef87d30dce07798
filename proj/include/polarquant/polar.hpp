#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "polarquant/tensor_io.hpp"

namespace polarquant {

/// Recursive polar representation of a length-d vector after L levels.
///
/// Level 1 pairs adjacent coordinates (x[2j], x[2j+1]) and stores the pair's
/// angle in [0, 2pi) and norm. Each later level pairs adjacent radii from the
/// level below; those angles lie in [0, pi/2] since radii are nonnegative.
/// After L levels, d / 2^L radii remain.
struct PolarRep {
  std::size_t dim = 0;
  std::size_t levels = 0;
  std::vector<double> radii;                // length dim >> levels
  std::vector<std::vector<double>> angles;  // angles[l-1] has length dim >> l

  std::span<const double> level_angles(std::size_t level) const { return angles.at(level - 1); }
};

bool is_power_of_two(std::size_t d);
/// floor(log2(d)) for d >= 1.
std::size_t log2_floor(std::size_t d);

/// Throws std::invalid_argument unless d is a power of two >= 2 and
/// 1 <= levels <= log2(d).
void check_polar_shape(std::size_t d, std::size_t levels);

PolarRep to_polar(std::span<const double> x, std::size_t levels);
PolarRep to_polar(std::span<const float> x, std::size_t levels);

/// Inverse transform. Throws std::invalid_argument if level lengths do not
/// match dim and levels.
std::vector<double> from_polar(const PolarRep& rep);

std::vector<PolarRep> to_polar_batch(const EmbeddingMatrix& x, std::size_t levels);
/// Rows of the result are from_polar of each entry; all entries must share
/// one dimension.
EmbeddingMatrix from_polar_batch(std::span<const PolarRep> reps);

}  // namespace polarquant
