#include "polarquant/quantizer.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "polarquant/byte_io.hpp"
#include "polarquant/error.hpp"
#include "polarquant/half.hpp"
#include "polarquant/parallel.hpp"
#include "quantized_format.hpp"

namespace polarquant {
namespace {

std::size_t radius_count(std::size_t d, std::size_t levels) { return d >> levels; }

float store_radius(double r, RadiusPrecision precision) {
  const auto f = static_cast<float>(r);
  if (precision == RadiusPrecision::kF32) return f;
  const float h = round_to_half(f);
  if (std::isinf(h)) {
    throw std::invalid_argument("encode: radius " + std::to_string(r) +
                                " overflows f16; use f32 radii");
  }
  return h;
}

template <typename T>
QuantizedEmbedding encode_impl(std::span<const T> x, const RotationMatrix& rotation,
                               const CodebookSet& cs, const QuantizerConfig& config) {
  config.validate();
  const std::size_t d = x.size();
  const std::size_t levels = config.bits.levels();
  check_polar_shape(d, levels);
  cs.check_compatible(config.bits);
  if (rotation.dim() != d) {
    throw std::invalid_argument("encode: rotation dimension " + std::to_string(rotation.dim()) +
                                " != " + std::to_string(d));
  }
  std::vector<double> in(x.begin(), x.end());
  std::vector<double> rotated(d);
  rotation.rotate(in, rotated);
  const PolarRep rep = to_polar(std::span<const double>(rotated), levels);

  QuantizedEmbedding qe;
  qe.dim = d;
  qe.bit_config = std::make_shared<const BitWidthConfig>(config.bits);
  qe.radius_precision = config.radius_precision;
  qe.radii.reserve(rep.radii.size());
  for (double r : rep.radii) qe.radii.push_back(store_radius(r, config.radius_precision));
  qe.packed_indices = pack_indices(quant_indices(rep, cs), d, config.bits);
  return qe;
}

}  // namespace

std::uint32_t radius_bits(RadiusPrecision p) { return p == RadiusPrecision::kF16 ? 16 : 32; }

void QuantizerConfig::validate() const {
  bits.validate();
  if (radius_precision != RadiusPrecision::kF16 && radius_precision != RadiusPrecision::kF32) {
    throw std::invalid_argument("QuantizerConfig: unknown radius precision");
  }
  if (bits.radius_bits != radius_bits(radius_precision)) {
    throw std::invalid_argument("QuantizerConfig: radius_bits " +
                                std::to_string(bits.radius_bits) +
                                " disagrees with radius precision");
  }
}

bool QuantizedEmbedding::operator==(const QuantizedEmbedding& other) const {
  const bool same_bits = (bit_config == other.bit_config) ||
                         (bit_config && other.bit_config && *bit_config == *other.bit_config);
  return dim == other.dim && same_bits && radius_precision == other.radius_precision &&
         radii == other.radii && packed_indices == other.packed_indices;
}

LevelIndices quant_indices(const PolarRep& rep, const CodebookSet& cs) {
  if (cs.num_levels() != rep.levels || rep.angles.size() != rep.levels) {
    throw std::invalid_argument("quant_indices: representation has " +
                                std::to_string(rep.levels) + " levels, codebooks have " +
                                std::to_string(cs.num_levels()));
  }
  LevelIndices out(rep.levels);
  for (std::size_t l = 1; l <= rep.levels; ++l) {
    const auto& cb = cs.level(l);
    const auto angles = rep.level_angles(l);
    if (angles.size() != (rep.dim >> l)) {
      throw std::invalid_argument("quant_indices: level " + std::to_string(l) +
                                  " angle count mismatch");
    }
    auto& idx = out[l - 1];
    idx.resize(angles.size());
    for (std::size_t j = 0; j < angles.size(); ++j) idx[j] = cb.nearest(angles[j]);
  }
  return out;
}

std::uint64_t packed_index_bits(std::size_t d, const BitWidthConfig& config) {
  std::uint64_t bits = 0;
  for (std::size_t l = 1; l <= config.levels(); ++l) {
    bits += static_cast<std::uint64_t>(d >> l) * config.bits(l);
  }
  return bits;
}

std::size_t packed_index_bytes(std::size_t d, const BitWidthConfig& config) {
  return static_cast<std::size_t>((packed_index_bits(d, config) + 7) / 8);
}

namespace {

void check_width(std::uint32_t width) {
  if (width == 0 || width > 32) throw std::invalid_argument("bit width must be in 1..32");
}

void put_bits(std::vector<std::uint8_t>& out, std::uint64_t& bit, std::uint32_t value,
              std::uint32_t width) {
  if (width < 32 && value >= (std::uint64_t{1} << width)) {
    throw std::invalid_argument("index " + std::to_string(value) + " does not fit in " +
                                std::to_string(width) + " bits");
  }
  for (std::uint32_t b = 0; b < width; ++b, ++bit) {
    if ((value >> b) & 1u) out[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
  }
}

std::uint32_t get_bits(std::span<const std::uint8_t> buffer, std::uint64_t& bit,
                       std::uint32_t width) {
  std::uint32_t value = 0;
  for (std::uint32_t b = 0; b < width; ++b, ++bit) {
    value |= static_cast<std::uint32_t>((buffer[bit / 8] >> (bit % 8)) & 1u) << b;
  }
  return value;
}

}  // namespace

std::vector<std::uint8_t> pack_bits(std::span<const std::uint32_t> values, std::uint32_t width) {
  check_width(width);
  std::vector<std::uint8_t> out((values.size() * width + 7) / 8, 0);
  std::uint64_t bit = 0;
  for (std::uint32_t v : values) put_bits(out, bit, v, width);
  return out;
}

std::vector<std::uint32_t> unpack_bits(std::span<const std::uint8_t> buffer, std::size_t count,
                                       std::uint32_t width) {
  check_width(width);
  if (buffer.size() != (count * width + 7) / 8) {
    throw FormatError("unpack_bits: buffer has " + std::to_string(buffer.size()) +
                      " bytes, expected " + std::to_string((count * width + 7) / 8));
  }
  std::vector<std::uint32_t> out(count);
  std::uint64_t bit = 0;
  for (auto& v : out) v = get_bits(buffer, bit, width);
  return out;
}

std::vector<std::uint8_t> pack_indices(const LevelIndices& indices, std::size_t d,
                                       const BitWidthConfig& config) {
  config.validate();
  if (indices.size() != config.levels()) {
    throw std::invalid_argument("pack_indices: level count mismatch");
  }
  std::vector<std::uint8_t> out(packed_index_bytes(d, config), 0);
  std::uint64_t bit = 0;
  for (std::size_t l = 1; l <= config.levels(); ++l) {
    const auto& level = indices[l - 1];
    if (level.size() != (d >> l)) {
      throw std::invalid_argument("pack_indices: level " + std::to_string(l) + " has " +
                                  std::to_string(level.size()) + " indices, expected " +
                                  std::to_string(d >> l));
    }
    for (std::uint32_t value : level) put_bits(out, bit, value, config.bits(l));
  }
  return out;
}

LevelIndices unpack_indices(std::span<const std::uint8_t> buffer, std::size_t d,
                            const BitWidthConfig& config) {
  config.validate();
  if (buffer.size() != packed_index_bytes(d, config)) {
    throw FormatError("unpack_indices: buffer has " + std::to_string(buffer.size()) +
                      " bytes, expected " + std::to_string(packed_index_bytes(d, config)));
  }
  LevelIndices out(config.levels());
  std::uint64_t bit = 0;
  for (std::size_t l = 1; l <= config.levels(); ++l) {
    out[l - 1].resize(d >> l);
    for (auto& value : out[l - 1]) value = get_bits(buffer, bit, config.bits(l));
  }
  return out;
}

QuantizedEmbedding encode(std::span<const float> x, const RotationMatrix& rotation,
                          const CodebookSet& cs, const QuantizerConfig& config) {
  return encode_impl(x, rotation, cs, config);
}

QuantizedEmbedding encode(std::span<const double> x, const RotationMatrix& rotation,
                          const CodebookSet& cs, const QuantizerConfig& config) {
  return encode_impl(x, rotation, cs, config);
}

std::vector<double> decode(const QuantizedEmbedding& qe, const RotationMatrix& rotation,
                           const CodebookSet& cs) {
  if (!qe.bit_config) throw std::invalid_argument("decode: embedding has no bit config");
  const BitWidthConfig& bits = *qe.bit_config;
  const std::size_t levels = bits.levels();
  check_polar_shape(qe.dim, levels);
  if (qe.radii.size() != radius_count(qe.dim, levels)) {
    throw FormatError("decode: " + std::to_string(qe.radii.size()) + " radii, expected " +
                      std::to_string(radius_count(qe.dim, levels)));
  }
  if (rotation.dim() != qe.dim) throw std::invalid_argument("decode: rotation dimension mismatch");
  cs.check_compatible(bits);
  const LevelIndices indices = unpack_indices(qe.packed_indices, qe.dim, bits);

  PolarRep rep;
  rep.dim = qe.dim;
  rep.levels = levels;
  rep.radii.assign(qe.radii.begin(), qe.radii.end());
  rep.angles.resize(levels);
  for (std::size_t l = 1; l <= levels; ++l) {
    const auto& cb = cs.level(l);
    auto& angles = rep.angles[l - 1];
    angles.reserve(indices[l - 1].size());
    for (auto idx : indices[l - 1]) {
      if (idx >= cb.size()) {
        throw FormatError("decode: level " + std::to_string(l) + " index " + std::to_string(idx) +
                          " beyond codebook size " + std::to_string(cb.size()));
      }
      angles.push_back(cb.centroid(idx));
    }
  }
  const std::vector<double> rotated = from_polar(rep);
  std::vector<double> out(qe.dim);
  rotation.unrotate(rotated, out);
  return out;
}

BitsPerCoordinate bits_per_coordinate(const BitWidthConfig& config) {
  config.validate();
  const std::size_t levels = config.levels();
  const std::uint64_t denominator = std::uint64_t{1} << levels;
  // radius_bits / 2^L + sum_l b_l * 2^(L-l) / 2^L
  std::uint64_t numerator = config.radius_bits;
  for (std::size_t l = 1; l <= levels; ++l) {
    numerator += static_cast<std::uint64_t>(config.bits(l)) << (levels - l);
  }
  const std::uint64_t g = std::gcd(numerator, denominator);
  return {numerator / g, denominator / g};
}

QuantizedBatch encode_batch(const EmbeddingMatrix& x, const RotationMatrix& rotation,
                            const CodebookSet& cs, const QuantizerConfig& config) {
  config.validate();
  QuantizedBatch batch;
  batch.dim = x.cols();
  batch.config = config;
  batch.codebook_hash = cs.hash();
  batch.rows.resize(x.rows());
  const auto shared_bits = std::make_shared<const BitWidthConfig>(config.bits);
  parallel_for(x.rows(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      batch.rows[i] = encode(x.row(i), rotation, cs, config);
      batch.rows[i].bit_config = shared_bits;
    }
  });
  return batch;
}

EmbeddingMatrix decode_batch(const QuantizedBatch& batch, const RotationMatrix& rotation,
                             const CodebookSet& cs) {
  if (batch.codebook_hash != cs.hash()) {
    throw std::invalid_argument("decode_batch: codebook hash does not match the batch");
  }
  if (batch.config.rotation_seed != rotation.seed() && !rotation.is_identity()) {
    throw std::invalid_argument("decode_batch: rotation seed does not match the batch");
  }
  EmbeddingMatrix out(batch.rows.size(), batch.dim);
  parallel_for(batch.rows.size(), [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto row = decode(batch.rows[i], rotation, cs);
      auto dst = out.row(i);
      for (std::size_t j = 0; j < batch.dim; ++j) dst[j] = static_cast<float>(row[j]);
    }
  });
  return out;
}

std::size_t record_bytes(std::size_t d, const QuantizerConfig& config) {
  return radius_count(d, config.bits.levels()) * (radius_bits(config.radius_precision) / 8) +
         packed_index_bytes(d, config.bits);
}

namespace detail {

void write_config_header(std::vector<std::uint8_t>& out, std::size_t d,
                         const QuantizerConfig& config) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(config.bits.levels()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(config.radius_precision));
  for (auto b : config.bits.per_level_bits) put_le<std::uint32_t>(out, b);
  put_le<std::uint64_t>(out, config.rotation_seed);
}

std::size_t read_config_header(ByteReader& in, QuantizerConfig& config) {
  const std::size_t d = in.get<std::uint32_t>("dimension");
  const std::size_t levels = in.get<std::uint32_t>("level count");
  const auto precision = in.get<std::uint32_t>("radius precision");
  if (precision > 1) throw FormatError("unknown radius precision " + std::to_string(precision));
  if (levels == 0 || levels > 32) throw FormatError("bad level count " + std::to_string(levels));
  config.radius_precision = static_cast<RadiusPrecision>(precision);
  config.bits.per_level_bits.resize(levels);
  for (auto& b : config.bits.per_level_bits) b = in.get<std::uint32_t>("bit width");
  config.bits.radius_bits = radius_bits(config.radius_precision);
  config.rotation_seed = in.get<std::uint64_t>("rotation seed");
  try {
    config.validate();
    check_polar_shape(d, levels);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("quantized header: ") + e.what());
  }
  return d;
}

void write_record(std::vector<std::uint8_t>& out, const QuantizedEmbedding& qe) {
  for (float r : qe.radii) {
    if (qe.radius_precision == RadiusPrecision::kF16) {
      put_le<std::uint16_t>(out, float_to_half(r));
    } else {
      put_le<float>(out, r);
    }
  }
  out.insert(out.end(), qe.packed_indices.begin(), qe.packed_indices.end());
}

QuantizedEmbedding read_record(ByteReader& in, std::size_t d,
                               const std::shared_ptr<const BitWidthConfig>& bits,
                               RadiusPrecision precision) {
  QuantizedEmbedding qe;
  qe.dim = d;
  qe.bit_config = bits;
  qe.radius_precision = precision;
  qe.radii.resize(radius_count(d, bits->levels()));
  for (auto& r : qe.radii) {
    r = precision == RadiusPrecision::kF16 ? half_to_float(in.get<std::uint16_t>("radius"))
                                           : in.get<float>("radius");
  }
  const auto packed = in.take(packed_index_bytes(d, *bits), "packed indices");
  qe.packed_indices.assign(packed.begin(), packed.end());
  return qe;
}

}  // namespace detail

std::vector<std::uint8_t> serialize_batch(const QuantizedBatch& batch) {
  std::vector<std::uint8_t> out(std::begin(kQuantizedMagic), std::end(kQuantizedMagic));
  detail::put_le<std::uint32_t>(out, kQuantizedVersion);
  detail::write_config_header(out, batch.dim, batch.config);
  detail::put_le<std::uint64_t>(out, batch.rows.size());
  detail::put_le<std::uint64_t>(out, batch.codebook_hash);
  out.reserve(out.size() + batch.rows.size() * record_bytes(batch.dim, batch.config));
  for (const auto& row : batch.rows) {
    if (row.dim != batch.dim || row.radius_precision != batch.config.radius_precision) {
      throw std::invalid_argument("serialize_batch: row does not match batch config");
    }
    detail::write_record(out, row);
  }
  return out;
}

QuantizedBatch deserialize_batch(std::span<const std::uint8_t> bytes) {
  detail::ByteReader in(bytes);
  const auto magic = in.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), std::begin(kQuantizedMagic))) {
    throw FormatError("quantized file: bad magic");
  }
  const auto version = in.get<std::uint32_t>("version");
  if (version != kQuantizedVersion) {
    throw FormatError("quantized file: unsupported version " + std::to_string(version));
  }
  QuantizedBatch batch;
  batch.dim = detail::read_config_header(in, batch.config);
  const auto n = in.get<std::uint64_t>("row count");
  batch.codebook_hash = in.get<std::uint64_t>("codebook hash");
  const std::size_t per_row = record_bytes(batch.dim, batch.config);
  if (in.remaining() != n * per_row) {
    throw FormatError("quantized file: payload has " + std::to_string(in.remaining()) +
                      " bytes, header requires " + std::to_string(n * per_row));
  }
  const auto bits = std::make_shared<const BitWidthConfig>(batch.config.bits);
  batch.rows.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    batch.rows.push_back(detail::read_record(in, batch.dim, bits, batch.config.radius_precision));
  }
  return batch;
}

void save_quantized(const QuantizedBatch& batch, const std::filesystem::path& path) {
  detail::write_file(path.string(), serialize_batch(batch));
}

QuantizedBatch load_quantized(const std::filesystem::path& path) {
  return deserialize_batch(detail::read_file(path.string()));
}

}  // namespace polarquant
