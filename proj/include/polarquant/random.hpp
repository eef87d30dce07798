#pragma once

#include <cstdint>
#include <random>

namespace polarquant {

/// Seeded generator used for every random draw in the library.
///
/// Bits come from std::mt19937_64 (fully specified by the standard, so the
/// stream is identical across platforms). Normal deviates use the Marsaglia
/// polar method rather than std::normal_distribution, whose algorithm is
/// implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer on [0, n).
  std::uint64_t uniform_index(std::uint64_t n);

  /// Standard normal draw (Marsaglia polar method, spare value cached).
  double normal();

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// SplitMix64 finalizer; derives independent sub-seeds from (seed, stream).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace polarquant
