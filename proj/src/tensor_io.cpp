#include "polarquant/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>

#include "polarquant/byte_io.hpp"
#include "polarquant/error.hpp"
#include "polarquant/half.hpp"
#include "polarquant/random.hpp"

namespace polarquant {

namespace detail {

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path + " for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path);
}

}  // namespace detail

EmbeddingMatrix::EmbeddingMatrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0f) {}

EmbeddingMatrix::EmbeddingMatrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw std::invalid_argument("EmbeddingMatrix: data length " + std::to_string(data_.size()) +
                                " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
  }
  for (float v : data_) {
    if (!std::isfinite(v)) throw std::invalid_argument("EmbeddingMatrix: non-finite value");
  }
}

EmbeddingMatrix generate_gaussian(std::size_t n, std::size_t d, std::uint64_t seed) {
  if (n == 0 || d == 0) {
    throw std::invalid_argument("generate_gaussian: dimensions must be positive");
  }
  Rng rng(seed);
  std::vector<float> data(n * d);
  for (auto& v : data) v = static_cast<float>(rng.normal());
  return EmbeddingMatrix(n, d, std::move(data));
}

EmbeddingMatrix generate_heavy_tailed(std::size_t n, std::size_t d, std::uint64_t seed,
                                      double nu) {
  if (n == 0 || d == 0) {
    throw std::invalid_argument("generate_heavy_tailed: dimensions must be positive");
  }
  if (!(nu > 0.0)) throw std::invalid_argument("generate_heavy_tailed: nu must be positive");
  Rng rng(seed);
  // Roughly one channel in sixteen carries a large constant scale.
  std::vector<double> channel_scale(d, 1.0);
  const std::size_t outliers = std::max<std::size_t>(1, d / 16);
  for (std::size_t i = 0; i < outliers; ++i) {
    channel_scale[rng.uniform_index(d)] = 10.0;
  }
  // Student-t with integer-rounded degrees of freedom via Z / sqrt(chi2 / nu).
  const auto dof = static_cast<std::size_t>(std::max(1.0, std::round(nu)));
  std::vector<float> data(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double chi2 = 0.0;
      for (std::size_t k = 0; k < dof; ++k) {
        const double z = rng.normal();
        chi2 += z * z;
      }
      const double t = rng.normal() / std::sqrt(chi2 / static_cast<double>(dof));
      data[i * d + j] = static_cast<float>(channel_scale[j] * t);
    }
  }
  return EmbeddingMatrix(n, d, std::move(data));
}

std::vector<std::uint8_t> encode_tensor(const EmbeddingMatrix& m, DType dtype) {
  if (dtype != DType::kF32 && dtype != DType::kF16) {
    throw std::invalid_argument("encode_tensor: unknown dtype");
  }
  for (float v : m.data()) {
    if (!std::isfinite(v)) throw std::invalid_argument("save_tensor: non-finite value");
  }
  std::vector<std::uint8_t> out(std::begin(kTensorMagic), std::end(kTensorMagic));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dtype));
  detail::put_le<std::uint32_t>(out, 2);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
  out.reserve(out.size() + m.data().size() * (dtype == DType::kF32 ? 4 : 2));
  for (float v : m.data()) {
    if (dtype == DType::kF32) {
      detail::put_le<float>(out, v);
    } else {
      detail::put_le<std::uint16_t>(out, float_to_half(v));
    }
  }
  return out;
}

EmbeddingMatrix decode_tensor(std::span<const std::uint8_t> bytes) {
  detail::ByteReader reader(bytes);
  const auto magic = reader.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), std::begin(kTensorMagic))) {
    throw FormatError("tensor file: bad magic");
  }
  const auto dtype_raw = reader.get<std::uint32_t>("dtype");
  if (dtype_raw > static_cast<std::uint32_t>(DType::kF16)) {
    throw FormatError("tensor file: unknown dtype " + std::to_string(dtype_raw));
  }
  const auto dtype = static_cast<DType>(dtype_raw);
  const auto rank = reader.get<std::uint32_t>("rank");
  if (rank < 1 || rank > 2) {
    throw FormatError("tensor file: unsupported rank " + std::to_string(rank));
  }
  std::vector<std::uint32_t> shape(rank);
  for (auto& s : shape) s = reader.get<std::uint32_t>("shape");
  const std::size_t rows = rank == 2 ? shape[0] : 1;
  const std::size_t cols = rank == 2 ? shape[1] : shape[0];
  const std::size_t count = rows * cols;
  const std::size_t width = dtype == DType::kF32 ? 4 : 2;
  if (reader.remaining() != count * width) {
    throw FormatError("tensor file: payload has " + std::to_string(reader.remaining()) +
                      " bytes, shape requires " + std::to_string(count * width));
  }
  std::vector<float> data(count);
  for (auto& v : data) {
    v = dtype == DType::kF32 ? reader.get<float>("payload")
                             : half_to_float(reader.get<std::uint16_t>("payload"));
  }
  try {
    return EmbeddingMatrix(rows, cols, std::move(data));
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("tensor file: ") + e.what());
  }
}

void save_tensor(const EmbeddingMatrix& m, const std::filesystem::path& path, DType dtype) {
  detail::write_file(path.string(), encode_tensor(m, dtype));
}

EmbeddingMatrix load_tensor(const std::filesystem::path& path) {
  return decode_tensor(detail::read_file(path.string()));
}

}  // namespace polarquant
