#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace polarquant {

/// Dense row-major n x d matrix of f32 activations. All values are finite.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;
  /// Zero-filled matrix.
  EmbeddingMatrix(std::size_t rows, std::size_t cols);
  /// Takes ownership of row-major data; throws std::invalid_argument if the
  /// length does not equal rows * cols or a value is not finite.
  EmbeddingMatrix(std::size_t rows, std::size_t cols, std::vector<float> data);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return rows_ == 0; }

  std::span<const float> row(std::size_t i) const {
    return {data_.data() + i * cols_, cols_};
  }
  std::span<float> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }

  float operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
  float& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }

  std::span<const float> data() const { return data_; }
  std::span<float> data() { return data_; }

  bool operator==(const EmbeddingMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

enum class DType : std::uint32_t { kF32 = 0, kF16 = 1 };

/// Fixed 4-byte tag opening every tensor file.
inline constexpr char kTensorMagic[4] = {'P', 'Q', 'T', 'N'};

struct TensorFileHeader {
  DType dtype = DType::kF32;
  std::vector<std::uint32_t> shape;  // rank == shape.size()
};

/// n x d i.i.d. standard normal entries; bit-identical for equal arguments.
EmbeddingMatrix generate_gaussian(std::size_t n, std::size_t d, std::uint64_t seed);

/// Heavy-tailed synthetic activations: Student-t entries (nu degrees of
/// freedom) with a handful of outlier channels scaled up. Stand-in for real
/// key embeddings, which show per-channel outliers.
EmbeddingMatrix generate_heavy_tailed(std::size_t n, std::size_t d, std::uint64_t seed,
                                      double nu = 3.0);

/// Writes `m` as a rank-2 tensor file. f16 payloads round each value.
void save_tensor(const EmbeddingMatrix& m, const std::filesystem::path& path,
                 DType dtype = DType::kF32);

/// Reads a rank-1 (treated as 1 x n) or rank-2 tensor file.
/// Throws FormatError on bad magic, unknown dtype, or truncated payload.
EmbeddingMatrix load_tensor(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_tensor(const EmbeddingMatrix& m, DType dtype = DType::kF32);
EmbeddingMatrix decode_tensor(std::span<const std::uint8_t> bytes);

}  // namespace polarquant
