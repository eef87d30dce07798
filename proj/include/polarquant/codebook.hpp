#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace polarquant {

/// Bits per level plus the width used to store each leftover radius.
struct BitWidthConfig {
  std::vector<std::uint32_t> per_level_bits;
  std::uint32_t radius_bits = 16;

  std::size_t levels() const { return per_level_bits.size(); }
  std::uint32_t bits(std::size_t level) const { return per_level_bits.at(level - 1); }
  std::uint32_t max_bits() const;

  /// 4 bits at level 1, 2 bits at levels 2-4, 16-bit radii.
  static BitWidthConfig standard();
  /// Same bit width at every one of `levels` levels.
  static BitWidthConfig uniform(std::size_t levels, std::uint32_t bits,
                                std::uint32_t radius_bits = 16);

  /// Throws std::invalid_argument unless L >= 1, every level has 1..24 bits,
  /// and radius_bits is 16 or 32.
  void validate() const;

  bool operator==(const BitWidthConfig&) const = default;
};

/// Sorted centroids for one level with midpoint boundaries between them.
class LevelCodebook {
 public:
  /// Throws std::invalid_argument if centroids are empty, not strictly
  /// increasing, or outside the level's angle support.
  static LevelCodebook from_centroids(std::size_t level, std::vector<double> centroids);

  std::size_t level() const { return level_; }
  std::size_t size() const { return centroids_.size(); }
  std::span<const double> centroids() const { return centroids_; }
  std::span<const double> boundaries() const { return boundaries_; }
  double centroid(std::size_t index) const { return centroids_.at(index); }

  /// Index of the nearest centroid; equidistant values go to the lower index.
  std::uint32_t nearest(double value) const;

  bool operator==(const LevelCodebook&) const = default;

 private:
  std::size_t level_ = 0;
  std::vector<double> centroids_;
  std::vector<double> boundaries_;
};

/// Nearest centroid by exhaustive scan with the same lower-index tie rule.
/// Reference for LevelCodebook::nearest.
std::uint32_t nearest_linear_scan(std::span<const double> centroids, double value);

struct CodebookMeta {
  std::string mode;  // "online", "offline" or "custom"
  std::uint64_t seed = 0;
  std::uint64_t samples = 0;

  bool operator==(const CodebookMeta&) const = default;
};

/// One codebook per level, ordered 1..L.
struct CodebookSet {
  std::vector<LevelCodebook> levels;
  CodebookMeta meta;

  std::size_t num_levels() const { return levels.size(); }
  const LevelCodebook& level(std::size_t l) const { return levels.at(l - 1); }

  /// Throws std::invalid_argument unless levels are numbered 1..L.
  void validate() const;
  /// Throws std::invalid_argument unless L matches and each level has at
  /// most 2^b_l centroids.
  void check_compatible(const BitWidthConfig& config) const;

  /// FNV-1a over level numbers and centroid bit patterns.
  std::uint64_t hash() const;

  bool operator==(const CodebookSet&) const = default;
};

struct KMeansResult {
  LevelCodebook codebook;
  /// Mean squared distance to the nearest centroid after each assignment
  /// step. Non-increasing.
  std::vector<double> cost_history;
  std::size_t iterations = 0;
};

/// 1-D k-means: k-means++ seeding followed by Lloyd iterations until the
/// assignment stops changing or `max_iters` assignment steps have run.
/// Throws std::invalid_argument if there are fewer than k distinct samples
/// or any sample is NaN.
KMeansResult kmeans_1d(std::span<const double> samples, std::size_t k, std::uint64_t seed,
                       std::size_t max_iters = 100, std::size_t level = 1);

/// Codebooks clustered from observed angles, k = 2^b_l per level.
CodebookSet build_online(const std::vector<std::vector<double>>& angles_per_level,
                         const BitWidthConfig& config, std::uint64_t seed);

/// Codebooks clustered from `samples_per_level` draws of the analytic angle
/// distribution at each level.
CodebookSet build_offline(const BitWidthConfig& config, std::size_t samples_per_level,
                          std::uint64_t seed);

/// Expected squared quantization error of `cb` under the level's angle
/// density, by per-interval Simpson quadrature.
double expected_quant_error(const LevelCodebook& cb);

std::string codebooks_to_json(const CodebookSet& cs);
/// Throws FormatError on malformed JSON, missing levels, or invalid
/// centroids.
CodebookSet codebooks_from_json(const std::string& text);

void save_codebooks(const CodebookSet& cs, const std::filesystem::path& path);
CodebookSet load_codebooks(const std::filesystem::path& path);

}  // namespace polarquant
