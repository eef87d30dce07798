#pragma once

#include <cstdint>

namespace polarquant {

// IEEE 754 binary16 conversions, round-to-nearest-even.
std::uint16_t float_to_half(float value);
float half_to_float(std::uint16_t bits);

/// Rounds through binary16 and back.
inline float round_to_half(float value) {
  return half_to_float(float_to_half(value));
}

}  // namespace polarquant
