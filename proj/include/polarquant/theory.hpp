#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "polarquant/codebook.hpp"

namespace polarquant {

// Empirical checks of the error and distribution claims behind the
// quantizer, run at desk scale. Every report is deterministic in its seed.

struct TheoremTrialReport {
  std::size_t d = 0;
  double scale = 1.0;
  std::vector<std::size_t> codebook_sizes;  // per level, 1..log2(d)
  std::size_t trials = 0;
  /// Mean of ||x - x'||^2 / ||x||^2 with the radius stored exactly.
  double mean_rel_sq_error = 0.0;
  /// Index bits per coordinate, sum_l (d / 2^l) log2(k_l) / d.
  double bits_per_coord = 0.0;
};

struct Theorem1Options {
  std::size_t d = 64;
  std::size_t base_size = 4;
  std::size_t trials = 2000;
  std::uint64_t seed = 0;
  std::vector<double> scales = {1.0, 2.0, 4.0, 8.0};
  std::size_t max_codebook_size = 4096;
  bool identity_rotation = false;
};

/// Level-l codebook size for scale s: s * k0 * l for l >= 2 and s * k0 * 4
/// at level 1 (its support is four times wider), capped at
/// max_codebook_size.
std::vector<std::size_t> theorem1_sizes(std::size_t d, std::size_t base_size, double scale,
                                        std::size_t max_codebook_size);

/// Offline k-means codebooks of the given per-level sizes.
CodebookSet build_sized_codebooks(const std::vector<std::size_t>& sizes, std::uint64_t seed);

/// One report for fixed codebooks: fully recursed transform, exact radius.
TheoremTrialReport theorem1_trial(std::size_t d, const CodebookSet& codebooks, std::size_t trials,
                                  std::uint64_t seed, bool identity_rotation = false);

/// One report per scale in options.scales.
std::vector<TheoremTrialReport> check_theorem1(const Theorem1Options& options);

struct VarianceLevelReport {
  std::size_t level = 0;
  double empirical_var = 0.0;
  double quadrature_var = 0.0;
  /// empirical_var * (2^(l-1) - 1)
  double scaled_product = 0.0;
};

struct VarianceBoundReport {
  std::size_t samples = 0;
  std::vector<VarianceLevelReport> levels;
  double max_over_min_product = 0.0;
};

/// Levels must lie in 2..10.
VarianceBoundReport check_variance_bound(const std::vector<std::size_t>& levels,
                                         std::size_t samples, std::uint64_t seed);

struct CodebookSizeEntry {
  double epsilon = 0.0;
  std::size_t min_k = 0;
  double var_k = 0.0;
  /// min_k * sqrt(epsilon) / log(1 / sigma)
  double scaled_ratio = 0.0;
};

struct CodebookSizeReport {
  std::size_t level = 0;
  double var_1 = 0.0;
  double sigma = 0.0;
  std::vector<CodebookSizeEntry> entries;
  /// Best-of-restarts Var_k for every k evaluated by the search.
  std::vector<std::pair<std::size_t, double>> evaluated;
};

/// Smallest k with Var_k <= eps * Var_1 for each eps, found by doubling then
/// bisection. Var_k is the analytic expected error of the best of
/// `restarts` k-means codebooks fit to `samples` draws.
CodebookSizeReport check_codebook_size_lemma(std::size_t level,
                                             const std::vector<double>& epsilons,
                                             std::uint64_t seed, std::size_t samples = 100000,
                                             std::size_t restarts = 5);

/// Best-of-restarts expected error for k centroids on a fixed sample set.
double best_codebook_error(std::size_t level, const std::vector<double>& samples, std::size_t k,
                           std::uint64_t seed, std::size_t restarts);

struct SeparabilityReport {
  std::size_t d = 0;
  std::size_t samples = 0;
  double max_angle_corr = 0.0;
  double max_radius_angle_corr = 0.0;
  double max_ks = 0.0;
  double ks_critical = 0.0;
  /// Correlation after re-pairing two angle columns comonotonically; a
  /// working test must flag it.
  double control_corr = 0.0;
};

SeparabilityReport check_separability(std::size_t d, std::size_t samples, std::uint64_t seed);

std::string to_json(const std::vector<TheoremTrialReport>& reports);
std::string to_json(const VarianceBoundReport& report);
std::string to_json(const CodebookSizeReport& report);
std::string to_json(const SeparabilityReport& report);

}  // namespace polarquant
