#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

#include "polarquant/codebook.hpp"
#include "polarquant/precondition.hpp"
#include "polarquant/quantizer.hpp"
#include "polarquant/tensor_io.hpp"

namespace polarquant {

/// What append() does with tokens produced after prefill.
enum class AppendMode {
  kFullPrecisionTail,  // keep (k, v) unquantized
  kQuantize,           // encode with the prefill codebooks
};

struct KVCacheOptions {
  QuantizerConfig quantizer;
  AppendMode append_mode = AppendMode::kFullPrecisionTail;
  /// Draws per level when building offline codebooks.
  std::size_t offline_samples = 100000;
  /// Skip preconditioning entirely (S = I).
  bool identity_rotation = false;
};

struct AttentionResult {
  std::vector<double> output;  // length d
  std::vector<double> scores;  // post-softmax, one per cached token
};

/// Stored bits broken down by section. All counts are exact and match the
/// serialized cache: header_bits + body_bits() == 8 * file size.
struct MemoryReport {
  std::size_t dim = 0;
  std::size_t quantized_tokens = 0;
  std::size_t tail_tokens = 0;
  std::uint64_t header_bits = 0;
  std::uint64_t key_payload_bits = 0;
  std::uint64_t value_payload_bits = 0;
  std::uint64_t key_codebook_bits = 0;
  std::uint64_t value_codebook_bits = 0;
  std::uint64_t tail_bits = 0;
  std::uint64_t rotation_bits = 0;
  /// Bits per coordinate implied by the bit-width config.
  BitsPerCoordinate nominal_bits_per_coordinate;

  std::uint64_t body_bits() const {
    return key_payload_bits + value_payload_bits + key_codebook_bits + value_codebook_bits +
           tail_bits + rotation_bits;
  }
  /// Stored payload bits per quantized coordinate (one side). 0 when empty.
  double payload_bits_per_coordinate() const;
  /// n * d * 16 over the stored payload of one side, codebooks excluded.
  double payload_compression_ratio() const;
  /// Both sides at 16 bits over everything in the body.
  double total_compression_ratio() const;

  std::string to_json() const;
};

/// Append-only quantized key/value store for one attention head.
///
/// append() takes an exclusive lock; attend() and the accessors take a
/// shared lock, so readers see a consistent prefix while a single writer
/// appends.
class QuantizedKVCache {
 public:
  /// Builds codebooks from the prompt (online) or from the analytic angle
  /// densities (offline), then encodes every row. Deterministic in `seed`.
  static QuantizedKVCache prefill(const EmbeddingMatrix& keys, const EmbeddingMatrix& values,
                                  const KVCacheOptions& options, std::uint64_t seed);

  /// Prefill with caller-supplied codebooks (e.g. loaded from disk).
  static QuantizedKVCache prefill_with_codebooks(const EmbeddingMatrix& keys,
                                                 const EmbeddingMatrix& values,
                                                 const KVCacheOptions& options,
                                                 CodebookSet key_codebooks,
                                                 CodebookSet value_codebooks);

  QuantizedKVCache(QuantizedKVCache&&) noexcept;
  QuantizedKVCache& operator=(QuantizedKVCache&&) noexcept;
  ~QuantizedKVCache();

  void append(std::span<const float> k, std::span<const float> v);

  /// softmax(K_hat q / sqrt(d)) V_hat over all cached tokens. Throws
  /// StateError when the cache is empty.
  AttentionResult attend(std::span<const float> q) const;

  std::size_t dim() const { return dim_; }
  std::size_t token_count() const;
  std::size_t quantized_count() const;
  std::size_t tail_count() const;

  const KVCacheOptions& options() const { return options_; }
  const CodebookSet& key_codebooks() const { return key_codebooks_; }
  const CodebookSet& value_codebooks() const { return value_codebooks_; }
  const RotationMatrix& rotation() const { return rotation_; }

  /// Reconstructed keys/values in token order (tail rows are exact).
  EmbeddingMatrix decoded_keys() const;
  EmbeddingMatrix decoded_values() const;

  MemoryReport memory_report() const;

  std::vector<std::uint8_t> serialize() const;
  static QuantizedKVCache deserialize(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& path) const;
  static QuantizedKVCache load(const std::filesystem::path& path);

 private:
  QuantizedKVCache(std::size_t dim, KVCacheOptions options, RotationMatrix rotation,
                   CodebookSet key_codebooks, CodebookSet value_codebooks);

  void push_quantized(QuantizedEmbedding key, QuantizedEmbedding value);

  std::size_t dim_;
  KVCacheOptions options_;
  RotationMatrix rotation_;
  CodebookSet key_codebooks_;
  CodebookSet value_codebooks_;
  std::shared_ptr<const BitWidthConfig> bits_;

  std::vector<QuantizedEmbedding> key_entries_;
  std::vector<QuantizedEmbedding> value_entries_;
  std::vector<float> tail_keys_;
  std::vector<float> tail_values_;

  // Dequantized copies of the quantized rows, kept in step with the entries.
  std::vector<float> decoded_keys_;
  std::vector<float> decoded_values_;

  std::unique_ptr<std::shared_mutex> mutex_;
};

/// Reference softmax(K q / sqrt(d))^T V in double precision.
AttentionResult attend_exact(const EmbeddingMatrix& keys, const EmbeddingMatrix& values,
                             std::span<const float> q);

/// Softmax attention over row-major key/value buffers (n rows of width d).
AttentionResult attend_rows(std::span<const float> keys, std::span<const float> values,
                            std::size_t d, std::span<const float> q);

/// ||a - b|| / ||b||; returns ||a|| when b is zero.
double relative_l2_error(std::span<const double> approx, std::span<const double> exact);

struct DecodeStep {
  std::size_t step = 0;
  std::size_t tokens = 0;
  double rel_error = 0.0;
};

struct DecodeTrace {
  std::vector<DecodeStep> steps;
  double mean_rel_error() const;
};

/// Prefills from the prompt, then for each row t of the stream appends
/// (keys[t], values[t]) and compares the cached attention for queries[t]
/// against exact attention over the full-precision history.
DecodeTrace simulate_decode(const EmbeddingMatrix& prompt_keys,
                            const EmbeddingMatrix& prompt_values,
                            const EmbeddingMatrix& stream_queries,
                            const EmbeddingMatrix& stream_keys,
                            const EmbeddingMatrix& stream_values, const KVCacheOptions& options,
                            std::uint64_t seed);

}  // namespace polarquant
