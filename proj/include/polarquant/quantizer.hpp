#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <vector>

#include "polarquant/codebook.hpp"
#include "polarquant/polar.hpp"
#include "polarquant/precondition.hpp"
#include "polarquant/tensor_io.hpp"

namespace polarquant {

enum class RadiusPrecision : std::uint32_t { kF16 = 0, kF32 = 1 };
enum class CodebookMode { kOnline, kOffline };

std::uint32_t radius_bits(RadiusPrecision p);

struct QuantizerConfig {
  BitWidthConfig bits = BitWidthConfig::standard();
  std::uint64_t rotation_seed = 0;
  RadiusPrecision radius_precision = RadiusPrecision::kF16;
  CodebookMode codebook_mode = CodebookMode::kOnline;

  /// Validates the bit widths and that bits.radius_bits matches
  /// radius_precision.
  void validate() const;
};

/// One encoded row: stored radii plus the level-major packed index stream.
struct QuantizedEmbedding {
  std::size_t dim = 0;
  std::shared_ptr<const BitWidthConfig> bit_config;
  RadiusPrecision radius_precision = RadiusPrecision::kF16;
  std::vector<float> radii;  // values exactly representable at radius_precision
  std::vector<std::uint8_t> packed_indices;

  std::size_t levels() const { return bit_config ? bit_config->levels() : 0; }
  bool operator==(const QuantizedEmbedding& other) const;
};

/// indices[l-1] holds the level-l centroid indices.
using LevelIndices = std::vector<std::vector<std::uint32_t>>;

/// Nearest-centroid index of every angle, level by level.
LevelIndices quant_indices(const PolarRep& rep, const CodebookSet& cs);

/// Number of bytes holding the packed indices of one d-dim row.
std::size_t packed_index_bytes(std::size_t d, const BitWidthConfig& config);
/// Exact bit count of one row's packed indices (before byte padding).
std::uint64_t packed_index_bits(std::size_t d, const BitWidthConfig& config);

/// Packs `width`-bit values (1..32) into one LSB-first bit stream with the
/// final byte zero-padded. Throws std::invalid_argument if a value does not
/// fit.
std::vector<std::uint8_t> pack_bits(std::span<const std::uint32_t> values, std::uint32_t width);
/// Inverse of pack_bits. Throws FormatError unless the buffer holds exactly
/// ceil(count * width / 8) bytes.
std::vector<std::uint32_t> unpack_bits(std::span<const std::uint8_t> buffer, std::size_t count,
                                       std::uint32_t width);
/// Levels are concatenated in order into one bit stream. Index j of a level
/// occupies b_l consecutive bits starting at the level's offset + j * b_l;
/// bits fill each byte from the least significant end and the final byte is
/// zero-padded. Throws std::invalid_argument on an out-of-range index or a
/// level length that is not d / 2^l.
std::vector<std::uint8_t> pack_indices(const LevelIndices& indices, std::size_t d,
                                       const BitWidthConfig& config);
LevelIndices unpack_indices(std::span<const std::uint8_t> buffer, std::size_t d,
                            const BitWidthConfig& config);

/// Rotate, transform to polar, quantize each level, pack.
QuantizedEmbedding encode(std::span<const float> x, const RotationMatrix& rotation,
                          const CodebookSet& cs, const QuantizerConfig& config);
QuantizedEmbedding encode(std::span<const double> x, const RotationMatrix& rotation,
                          const CodebookSet& cs, const QuantizerConfig& config);

/// Unpack, look up centroids, invert the polar transform, undo the rotation.
/// Throws FormatError if the buffer length does not match the config.
std::vector<double> decode(const QuantizedEmbedding& qe, const RotationMatrix& rotation,
                           const CodebookSet& cs);

/// Exact rational number of stored bits per coordinate.
struct BitsPerCoordinate {
  std::uint64_t numerator = 0;
  std::uint64_t denominator = 1;

  double value() const {
    return static_cast<double>(numerator) / static_cast<double>(denominator);
  }
  bool operator==(const BitsPerCoordinate&) const = default;
};

/// radius_bits / 2^L + sum_l b_l / 2^l, reduced. For L = log2(d) this is
/// (radius_bits + (d - 1) b) / d when every level uses b bits.
BitsPerCoordinate bits_per_coordinate(const BitWidthConfig& config);

/// A batch of rows sharing one configuration, as stored on disk.
struct QuantizedBatch {
  std::size_t dim = 0;
  QuantizerConfig config;
  std::uint64_t codebook_hash = 0;
  std::vector<QuantizedEmbedding> rows;
};

QuantizedBatch encode_batch(const EmbeddingMatrix& x, const RotationMatrix& rotation,
                            const CodebookSet& cs, const QuantizerConfig& config);
EmbeddingMatrix decode_batch(const QuantizedBatch& batch, const RotationMatrix& rotation,
                             const CodebookSet& cs);

/// Quantized file: fixed header then one (radii, packed indices) record per
/// row. Layout is documented in the README.
inline constexpr char kQuantizedMagic[4] = {'P', 'Q', 'Q', 'E'};
inline constexpr std::uint32_t kQuantizedVersion = 1;

std::size_t record_bytes(std::size_t d, const QuantizerConfig& config);
std::vector<std::uint8_t> serialize_batch(const QuantizedBatch& batch);
QuantizedBatch deserialize_batch(std::span<const std::uint8_t> bytes);
void save_quantized(const QuantizedBatch& batch, const std::filesystem::path& path);
QuantizedBatch load_quantized(const std::filesystem::path& path);

}  // namespace polarquant
