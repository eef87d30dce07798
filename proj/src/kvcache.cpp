#include "polarquant/kvcache.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <mutex>
#include <stdexcept>
#include <string>

#include "polarquant/byte_io.hpp"
#include "polarquant/error.hpp"
#include "polarquant/parallel.hpp"
#include "polarquant/polar.hpp"
#include "polarquant/random.hpp"
#include "polarquant/stats.hpp"
#include "quantized_format.hpp"

namespace polarquant {
namespace {

constexpr char kCacheMagic[4] = {'P', 'Q', 'K', 'V'};
constexpr std::uint32_t kCacheVersion = 1;
constexpr double kBaselineBits = 16.0;

std::vector<std::vector<double>> rotated_angles(const EmbeddingMatrix& x,
                                                const RotationMatrix& rotation,
                                                std::size_t levels) {
  const EmbeddingMatrix rotated = apply(x, rotation);
  std::vector<std::vector<double>> per_level(levels);
  for (std::size_t i = 0; i < rotated.rows(); ++i) {
    const PolarRep rep = to_polar(rotated.row(i), levels);
    for (std::size_t l = 0; l < levels; ++l) {
      per_level[l].insert(per_level[l].end(), rep.angles[l].begin(), rep.angles[l].end());
    }
  }
  return per_level;
}

void append_decoded(std::vector<float>& dst, const std::vector<double>& row) {
  for (double v : row) dst.push_back(static_cast<float>(v));
}

void check_kv_shapes(const EmbeddingMatrix& keys, const EmbeddingMatrix& values) {
  if (keys.rows() != values.rows() || keys.cols() != values.cols()) {
    throw std::invalid_argument("prefill: keys are " + std::to_string(keys.rows()) + "x" +
                                std::to_string(keys.cols()) + ", values are " +
                                std::to_string(values.rows()) + "x" +
                                std::to_string(values.cols()));
  }
  if (keys.cols() == 0) throw std::invalid_argument("prefill: zero-width embeddings");
}

RotationMatrix make_rotation(std::size_t d, const KVCacheOptions& options) {
  return options.identity_rotation ? RotationMatrix::identity(d)
                                   : build_rotation(d, options.quantizer.rotation_seed);
}

std::uint64_t codebook_bits(const CodebookSet& cs) {
  std::uint64_t count = 0;
  for (const auto& cb : cs.levels) count += cb.size();
  return 64 * count;
}

}  // namespace

double MemoryReport::payload_bits_per_coordinate() const {
  if (quantized_tokens == 0) return 0.0;
  return static_cast<double>(key_payload_bits) /
         (static_cast<double>(quantized_tokens) * static_cast<double>(dim));
}

double MemoryReport::payload_compression_ratio() const {
  if (key_payload_bits == 0) return 0.0;
  return kBaselineBits * static_cast<double>(quantized_tokens) * static_cast<double>(dim) /
         static_cast<double>(key_payload_bits);
}

double MemoryReport::total_compression_ratio() const {
  if (body_bits() == 0) return 0.0;
  return 2.0 * kBaselineBits * static_cast<double>(quantized_tokens + tail_tokens) *
         static_cast<double>(dim) / static_cast<double>(body_bits());
}

std::string MemoryReport::to_json() const {
  nlohmann::json j = {
      {"dim", dim},
      {"quantized_tokens", quantized_tokens},
      {"tail_tokens", tail_tokens},
      {"header_bits", header_bits},
      {"key_payload_bits", key_payload_bits},
      {"value_payload_bits", value_payload_bits},
      {"key_codebook_bits", key_codebook_bits},
      {"value_codebook_bits", value_codebook_bits},
      {"tail_bits", tail_bits},
      {"rotation_bits", rotation_bits},
      {"body_bits", body_bits()},
      {"nominal_bits_per_coordinate",
       {{"numerator", nominal_bits_per_coordinate.numerator},
        {"denominator", nominal_bits_per_coordinate.denominator},
        {"value", nominal_bits_per_coordinate.value()}}},
      {"payload_bits_per_coordinate", payload_bits_per_coordinate()},
      {"payload_compression_ratio", payload_compression_ratio()},
      {"total_compression_ratio", total_compression_ratio()},
  };
  return j.dump(2);
}

QuantizedKVCache::QuantizedKVCache(std::size_t dim, KVCacheOptions options,
                                   RotationMatrix rotation, CodebookSet key_codebooks,
                                   CodebookSet value_codebooks)
    : dim_(dim),
      options_(std::move(options)),
      rotation_(std::move(rotation)),
      key_codebooks_(std::move(key_codebooks)),
      value_codebooks_(std::move(value_codebooks)),
      bits_(std::make_shared<const BitWidthConfig>(options_.quantizer.bits)),
      mutex_(std::make_unique<std::shared_mutex>()) {
  options_.quantizer.validate();
  check_polar_shape(dim_, options_.quantizer.bits.levels());
  key_codebooks_.check_compatible(options_.quantizer.bits);
  value_codebooks_.check_compatible(options_.quantizer.bits);
}

QuantizedKVCache::QuantizedKVCache(QuantizedKVCache&&) noexcept = default;
QuantizedKVCache& QuantizedKVCache::operator=(QuantizedKVCache&&) noexcept = default;
QuantizedKVCache::~QuantizedKVCache() = default;

QuantizedKVCache QuantizedKVCache::prefill(const EmbeddingMatrix& keys,
                                           const EmbeddingMatrix& values,
                                           const KVCacheOptions& options, std::uint64_t seed) {
  check_kv_shapes(keys, values);
  options.quantizer.validate();
  const std::size_t d = keys.cols();
  const auto& bits = options.quantizer.bits;
  check_polar_shape(d, bits.levels());
  if (options.quantizer.codebook_mode == CodebookMode::kOffline) {
    // One precomputed book shared by keys and values.
    CodebookSet shared = build_offline(bits, options.offline_samples, seed);
    return prefill_with_codebooks(keys, values, options, shared, shared);
  }
  if (keys.rows() == 0) throw std::invalid_argument("prefill: online codebooks need a prompt");
  const RotationMatrix rotation = make_rotation(d, options);
  CodebookSet key_books =
      build_online(rotated_angles(keys, rotation, bits.levels()), bits, derive_seed(seed, 0));
  CodebookSet value_books =
      build_online(rotated_angles(values, rotation, bits.levels()), bits, derive_seed(seed, 1));
  return prefill_with_codebooks(keys, values, options, std::move(key_books),
                                std::move(value_books));
}

QuantizedKVCache QuantizedKVCache::prefill_with_codebooks(const EmbeddingMatrix& keys,
                                                          const EmbeddingMatrix& values,
                                                          const KVCacheOptions& options,
                                                          CodebookSet key_codebooks,
                                                          CodebookSet value_codebooks) {
  check_kv_shapes(keys, values);
  const std::size_t d = keys.cols();
  QuantizedKVCache cache(d, options, make_rotation(d, options), std::move(key_codebooks),
                         std::move(value_codebooks));
  const QuantizedBatch kq =
      encode_batch(keys, cache.rotation_, cache.key_codebooks_, options.quantizer);
  const QuantizedBatch vq =
      encode_batch(values, cache.rotation_, cache.value_codebooks_, options.quantizer);
  const EmbeddingMatrix kd = decode_batch(kq, cache.rotation_, cache.key_codebooks_);
  const EmbeddingMatrix vd = decode_batch(vq, cache.rotation_, cache.value_codebooks_);
  cache.key_entries_ = kq.rows;
  cache.value_entries_ = vq.rows;
  for (auto& e : cache.key_entries_) e.bit_config = cache.bits_;
  for (auto& e : cache.value_entries_) e.bit_config = cache.bits_;
  cache.decoded_keys_.assign(kd.data().begin(), kd.data().end());
  cache.decoded_values_.assign(vd.data().begin(), vd.data().end());
  return cache;
}

void QuantizedKVCache::push_quantized(QuantizedEmbedding key, QuantizedEmbedding value) {
  key.bit_config = bits_;
  value.bit_config = bits_;
  append_decoded(decoded_keys_, decode(key, rotation_, key_codebooks_));
  append_decoded(decoded_values_, decode(value, rotation_, value_codebooks_));
  key_entries_.push_back(std::move(key));
  value_entries_.push_back(std::move(value));
}

void QuantizedKVCache::append(std::span<const float> k, std::span<const float> v) {
  if (k.size() != dim_ || v.size() != dim_) {
    throw std::invalid_argument("append: expected vectors of length " + std::to_string(dim_));
  }
  for (std::size_t i = 0; i < dim_; ++i) {
    if (!std::isfinite(k[i]) || !std::isfinite(v[i])) {
      throw std::invalid_argument("append: non-finite value");
    }
  }
  if (options_.append_mode == AppendMode::kQuantize) {
    // Encode outside the lock; only the push mutates shared state.
    QuantizedEmbedding kq = encode(k, rotation_, key_codebooks_, options_.quantizer);
    QuantizedEmbedding vq = encode(v, rotation_, value_codebooks_, options_.quantizer);
    std::unique_lock lock(*mutex_);
    if (!tail_keys_.empty()) {
      throw StateError("append: cannot quantize behind a full-precision tail");
    }
    push_quantized(std::move(kq), std::move(vq));
    return;
  }
  std::unique_lock lock(*mutex_);
  tail_keys_.insert(tail_keys_.end(), k.begin(), k.end());
  tail_values_.insert(tail_values_.end(), v.begin(), v.end());
}

std::size_t QuantizedKVCache::token_count() const {
  std::shared_lock lock(*mutex_);
  return key_entries_.size() + tail_keys_.size() / dim_;
}

std::size_t QuantizedKVCache::quantized_count() const {
  std::shared_lock lock(*mutex_);
  return key_entries_.size();
}

std::size_t QuantizedKVCache::tail_count() const {
  std::shared_lock lock(*mutex_);
  return tail_keys_.size() / dim_;
}

AttentionResult QuantizedKVCache::attend(std::span<const float> q) const {
  if (q.size() != dim_) {
    throw std::invalid_argument("attend: query length " + std::to_string(q.size()) +
                                " != " + std::to_string(dim_));
  }
  std::shared_lock lock(*mutex_);
  if (key_entries_.empty() && tail_keys_.empty()) {
    throw StateError("attend: cache is empty");
  }
  if (tail_keys_.empty()) return attend_rows(decoded_keys_, decoded_values_, dim_, q);
  std::vector<float> keys(decoded_keys_);
  std::vector<float> values(decoded_values_);
  keys.insert(keys.end(), tail_keys_.begin(), tail_keys_.end());
  values.insert(values.end(), tail_values_.begin(), tail_values_.end());
  return attend_rows(keys, values, dim_, q);
}

EmbeddingMatrix QuantizedKVCache::decoded_keys() const {
  std::shared_lock lock(*mutex_);
  std::vector<float> data(decoded_keys_);
  data.insert(data.end(), tail_keys_.begin(), tail_keys_.end());
  const std::size_t rows = data.size() / dim_;
  return EmbeddingMatrix(rows, dim_, std::move(data));
}

EmbeddingMatrix QuantizedKVCache::decoded_values() const {
  std::shared_lock lock(*mutex_);
  std::vector<float> data(decoded_values_);
  data.insert(data.end(), tail_values_.begin(), tail_values_.end());
  const std::size_t rows = data.size() / dim_;
  return EmbeddingMatrix(rows, dim_, std::move(data));
}

MemoryReport QuantizedKVCache::memory_report() const {
  std::shared_lock lock(*mutex_);
  const auto& config = options_.quantizer;
  const std::size_t levels = config.bits.levels();
  MemoryReport r;
  r.dim = dim_;
  r.quantized_tokens = key_entries_.size();
  r.tail_tokens = tail_keys_.size() / dim_;
  // magic, version, d, L, precision, bits[L], mode flags (3), counts (2 x u64),
  // codebook sizes (2L).
  r.header_bits = 8 * (4 + 4 + 4 + 4 + 4 + 4 * levels + 12 + 16 + 8 * levels);
  const std::uint64_t per_row = 8 * record_bytes(dim_, config);
  r.key_payload_bits = per_row * r.quantized_tokens;
  r.value_payload_bits = per_row * r.quantized_tokens;
  r.key_codebook_bits = codebook_bits(key_codebooks_);
  r.value_codebook_bits = codebook_bits(value_codebooks_);
  r.tail_bits = static_cast<std::uint64_t>(2) * 32 * dim_ * r.tail_tokens;
  r.rotation_bits = 64;
  r.nominal_bits_per_coordinate = bits_per_coordinate(config.bits);
  return r;
}

std::vector<std::uint8_t> QuantizedKVCache::serialize() const {
  std::shared_lock lock(*mutex_);
  const auto& config = options_.quantizer;
  std::vector<std::uint8_t> out(std::begin(kCacheMagic), std::end(kCacheMagic));
  detail::put_le<std::uint32_t>(out, kCacheVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(dim_));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(config.bits.levels()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(config.radius_precision));
  for (auto b : config.bits.per_level_bits) detail::put_le<std::uint32_t>(out, b);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(options_.append_mode));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(config.codebook_mode));
  detail::put_le<std::uint32_t>(out, options_.identity_rotation ? 1u : 0u);
  detail::put_le<std::uint64_t>(out, key_entries_.size());
  detail::put_le<std::uint64_t>(out, tail_keys_.size() / dim_);
  for (const auto& cb : key_codebooks_.levels) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cb.size()));
  }
  for (const auto& cb : value_codebooks_.levels) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(cb.size()));
  }
  // Body.
  detail::put_le<std::uint64_t>(out, config.rotation_seed);
  for (const auto* cs : {&key_codebooks_, &value_codebooks_}) {
    for (const auto& cb : cs->levels) {
      for (double c : cb.centroids()) detail::put_le<double>(out, c);
    }
  }
  for (const auto& e : key_entries_) detail::write_record(out, e);
  for (const auto& e : value_entries_) detail::write_record(out, e);
  const std::size_t tail = tail_keys_.size() / dim_;
  for (std::size_t t = 0; t < tail; ++t) {
    for (std::size_t j = 0; j < dim_; ++j) detail::put_le<float>(out, tail_keys_[t * dim_ + j]);
    for (std::size_t j = 0; j < dim_; ++j) detail::put_le<float>(out, tail_values_[t * dim_ + j]);
  }
  return out;
}

QuantizedKVCache QuantizedKVCache::deserialize(std::span<const std::uint8_t> bytes) {
  detail::ByteReader in(bytes);
  const auto magic = in.take(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), std::begin(kCacheMagic))) {
    throw FormatError("cache file: bad magic");
  }
  if (const auto version = in.get<std::uint32_t>("version"); version != kCacheVersion) {
    throw FormatError("cache file: unsupported version " + std::to_string(version));
  }
  KVCacheOptions options;
  const std::size_t d = in.get<std::uint32_t>("dimension");
  const std::size_t levels = in.get<std::uint32_t>("level count");
  if (levels == 0 || levels > 32) throw FormatError("cache file: bad level count");
  const auto precision = in.get<std::uint32_t>("radius precision");
  if (precision > 1) throw FormatError("cache file: unknown radius precision");
  options.quantizer.radius_precision = static_cast<RadiusPrecision>(precision);
  options.quantizer.bits.per_level_bits.resize(levels);
  for (auto& b : options.quantizer.bits.per_level_bits) b = in.get<std::uint32_t>("bit width");
  options.quantizer.bits.radius_bits = radius_bits(options.quantizer.radius_precision);
  const auto append_mode = in.get<std::uint32_t>("append mode");
  const auto codebook_mode = in.get<std::uint32_t>("codebook mode");
  const auto identity = in.get<std::uint32_t>("rotation flag");
  if (append_mode > 1 || codebook_mode > 1 || identity > 1) {
    throw FormatError("cache file: bad mode flags");
  }
  options.append_mode = static_cast<AppendMode>(append_mode);
  options.quantizer.codebook_mode = static_cast<CodebookMode>(codebook_mode);
  options.identity_rotation = identity == 1;
  const auto quantized = in.get<std::uint64_t>("token count");
  const auto tail = in.get<std::uint64_t>("tail count");
  std::vector<std::uint32_t> key_sizes(levels);
  std::vector<std::uint32_t> value_sizes(levels);
  for (auto& s : key_sizes) s = in.get<std::uint32_t>("codebook size");
  for (auto& s : value_sizes) s = in.get<std::uint32_t>("codebook size");
  options.quantizer.rotation_seed = in.get<std::uint64_t>("rotation seed");
  try {
    options.quantizer.validate();
    check_polar_shape(d, levels);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("cache file: ") + e.what());
  }

  const auto read_books = [&](const std::vector<std::uint32_t>& sizes) {
    CodebookSet cs;
    cs.meta.mode = codebook_mode == 0 ? "online" : "offline";
    for (std::size_t l = 1; l <= levels; ++l) {
      if (sizes[l - 1] == 0 || sizes[l - 1] > (1u << 24)) {
        throw FormatError("cache file: bad codebook size");
      }
      std::vector<double> centroids(sizes[l - 1]);
      for (auto& c : centroids) c = in.get<double>("centroid");
      try {
        cs.levels.push_back(LevelCodebook::from_centroids(l, std::move(centroids)));
      } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("cache file: ") + e.what());
      }
    }
    return cs;
  };
  CodebookSet key_books = read_books(key_sizes);
  CodebookSet value_books = read_books(value_sizes);

  const std::size_t per_row = record_bytes(d, options.quantizer);
  if (in.remaining() != 2 * quantized * per_row + tail * 2 * d * sizeof(float)) {
    throw FormatError("cache file: payload length does not match header counts");
  }
  QuantizedKVCache cache(d, options, make_rotation(d, options), std::move(key_books),
                         std::move(value_books));
  std::vector<QuantizedEmbedding> keys;
  std::vector<QuantizedEmbedding> values;
  keys.reserve(quantized);
  values.reserve(quantized);
  for (std::uint64_t i = 0; i < quantized; ++i) {
    keys.push_back(detail::read_record(in, d, cache.bits_, options.quantizer.radius_precision));
  }
  for (std::uint64_t i = 0; i < quantized; ++i) {
    values.push_back(detail::read_record(in, d, cache.bits_, options.quantizer.radius_precision));
  }
  for (std::uint64_t i = 0; i < quantized; ++i) {
    cache.push_quantized(std::move(keys[i]), std::move(values[i]));
  }
  for (std::uint64_t t = 0; t < tail; ++t) {
    for (std::size_t j = 0; j < d; ++j) cache.tail_keys_.push_back(in.get<float>("tail key"));
    for (std::size_t j = 0; j < d; ++j) cache.tail_values_.push_back(in.get<float>("tail value"));
  }
  return cache;
}

void QuantizedKVCache::save(const std::filesystem::path& path) const {
  detail::write_file(path.string(), serialize());
}

QuantizedKVCache QuantizedKVCache::load(const std::filesystem::path& path) {
  return deserialize(detail::read_file(path.string()));
}

AttentionResult attend_rows(std::span<const float> keys, std::span<const float> values,
                            std::size_t d, std::span<const float> q) {
  if (d == 0 || q.size() != d || keys.size() % d != 0 || keys.size() != values.size()) {
    throw std::invalid_argument("attend: shape mismatch");
  }
  const std::size_t n = keys.size() / d;
  if (n == 0) throw StateError("attend: no tokens");
  AttentionResult result;
  result.scores.resize(n);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  parallel_for(n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        acc += static_cast<double>(keys[i * d + j]) * static_cast<double>(q[j]);
      }
      result.scores[i] = acc * scale;
    }
  });
  const double max_logit = *std::max_element(result.scores.begin(), result.scores.end());
  CompensatedSum total;
  for (auto& s : result.scores) {
    s = std::exp(s - max_logit);
    total.add(s);
  }
  const double z = total.value();
  for (auto& s : result.scores) s /= z;
  result.output.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double p = result.scores[i];
    for (std::size_t j = 0; j < d; ++j) result.output[j] += p * values[i * d + j];
  }
  return result;
}

AttentionResult attend_exact(const EmbeddingMatrix& keys, const EmbeddingMatrix& values,
                             std::span<const float> q) {
  if (keys.rows() != values.rows() || keys.cols() != values.cols() || keys.cols() != q.size()) {
    throw std::invalid_argument("attend_exact: shape mismatch");
  }
  return attend_rows(keys.data(), values.data(), keys.cols(), q);
}

double relative_l2_error(std::span<const double> approx, std::span<const double> exact) {
  if (approx.size() != exact.size()) {
    throw std::invalid_argument("relative_l2_error: length mismatch");
  }
  double diff = 0.0;
  double base = 0.0;
  for (std::size_t i = 0; i < approx.size(); ++i) {
    diff += (approx[i] - exact[i]) * (approx[i] - exact[i]);
    base += exact[i] * exact[i];
  }
  return base > 0.0 ? std::sqrt(diff / base) : std::sqrt(diff);
}

double DecodeTrace::mean_rel_error() const {
  if (steps.empty()) return 0.0;
  CompensatedSum s;
  for (const auto& step : steps) s.add(step.rel_error);
  return s.value() / static_cast<double>(steps.size());
}

DecodeTrace simulate_decode(const EmbeddingMatrix& prompt_keys,
                            const EmbeddingMatrix& prompt_values,
                            const EmbeddingMatrix& stream_queries,
                            const EmbeddingMatrix& stream_keys,
                            const EmbeddingMatrix& stream_values, const KVCacheOptions& options,
                            std::uint64_t seed) {
  const std::size_t d = prompt_keys.cols();
  if (stream_queries.rows() != stream_keys.rows() ||
      stream_keys.rows() != stream_values.rows() ||
      (stream_queries.rows() > 0 &&
       (stream_queries.cols() != d || stream_keys.cols() != d || stream_values.cols() != d))) {
    throw std::invalid_argument("simulate_decode: stream shapes do not match the prompt");
  }
  QuantizedKVCache cache = QuantizedKVCache::prefill(prompt_keys, prompt_values, options, seed);
  std::vector<float> exact_keys(prompt_keys.data().begin(), prompt_keys.data().end());
  std::vector<float> exact_values(prompt_values.data().begin(), prompt_values.data().end());
  DecodeTrace trace;
  for (std::size_t t = 0; t < stream_queries.rows(); ++t) {
    cache.append(stream_keys.row(t), stream_values.row(t));
    exact_keys.insert(exact_keys.end(), stream_keys.row(t).begin(), stream_keys.row(t).end());
    exact_values.insert(exact_values.end(), stream_values.row(t).begin(),
                        stream_values.row(t).end());
    const AttentionResult approx = cache.attend(stream_queries.row(t));
    const AttentionResult exact = attend_rows(exact_keys, exact_values, d, stream_queries.row(t));
    trace.steps.push_back({t, cache.token_count(), relative_l2_error(approx.output, exact.output)});
  }
  return trace;
}

}  // namespace polarquant
