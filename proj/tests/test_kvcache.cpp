#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <thread>

#include "polarquant/error.hpp"
#include "polarquant/kvcache.hpp"
#include "polarquant/random.hpp"

using namespace polarquant;

namespace {

double score_sum(const AttentionResult& r) {
  return std::accumulate(r.scores.begin(), r.scores.end(), 0.0);
}

std::vector<double> to_double(std::span<const float> x) { return {x.begin(), x.end()}; }

double row_rel_error(std::span<const float> a, std::span<const float> b) {
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += static_cast<double>(b[i]) * b[i];
  }
  return std::sqrt(num / den);
}

// Rows whose polar angles sit exactly on codebook centroids, so quantization
// only rounds the f32 storage.
EmbeddingMatrix rows_on_centroids(std::size_t n, std::size_t d, const CodebookSet& cs, Rng& rng) {
  EmbeddingMatrix m(n, d);
  const std::size_t levels = cs.num_levels();
  for (std::size_t i = 0; i < n; ++i) {
    PolarRep rep;
    rep.dim = d;
    rep.levels = levels;
    rep.radii.resize(d >> levels);
    for (auto& r : rep.radii) r = 0.5 + 2.0 * rng.uniform();
    rep.angles.resize(levels);
    for (std::size_t l = 1; l <= levels; ++l) {
      rep.angles[l - 1].resize(d >> l);
      for (auto& a : rep.angles[l - 1]) a = cs.level(l).centroid(rng.uniform_index(cs.level(l).size()));
    }
    const auto y = from_polar(rep);
    for (std::size_t j = 0; j < d; ++j) m(i, j) = static_cast<float>(y[j]);
  }
  return m;
}

KVCacheOptions offline_options(std::size_t samples = 20000) {
  KVCacheOptions o;
  o.quantizer.codebook_mode = CodebookMode::kOffline;
  o.offline_samples = samples;
  return o;
}

}  // namespace

TEST_CASE("prefill count contract") {
  const auto k = generate_gaussian(64, 32, 1);
  const auto v = generate_gaussian(64, 32, 2);
  const auto cache = QuantizedKVCache::prefill(k, v, KVCacheOptions{}, 3);
  CHECK(cache.token_count() == 64);
  CHECK(cache.quantized_count() == 64);
  CHECK(cache.tail_count() == 0);
  CHECK(cache.decoded_keys().rows() == 64);
  CHECK(cache.decoded_values().rows() == 64);
  CHECK(cache.dim() == 32);
}

TEST_CASE("prefill validates shapes") {
  const auto k = generate_gaussian(8, 32, 1);
  CHECK_THROWS_AS(QuantizedKVCache::prefill(k, generate_gaussian(7, 32, 2), KVCacheOptions{}, 3),
                  std::invalid_argument);
  CHECK_THROWS_AS(QuantizedKVCache::prefill(k, generate_gaussian(8, 16, 2), KVCacheOptions{}, 3),
                  std::invalid_argument);
  CHECK_THROWS(QuantizedKVCache::prefill(generate_gaussian(8, 24, 1), generate_gaussian(8, 24, 2),
                                         KVCacheOptions{}, 3));
}

TEST_CASE("online and offline codebooks differ but are both valid") {
  const auto k = generate_gaussian(256, 32, 1);
  const auto v = generate_gaussian(256, 32, 2);
  const auto online = QuantizedKVCache::prefill(k, v, KVCacheOptions{}, 3);
  const auto offline = QuantizedKVCache::prefill(k, v, offline_options(), 3);
  CHECK_NOTHROW(online.key_codebooks().validate());
  CHECK_NOTHROW(offline.key_codebooks().validate());
  CHECK_NOTHROW(online.key_codebooks().check_compatible(BitWidthConfig::standard()));
  CHECK_NOTHROW(offline.key_codebooks().check_compatible(BitWidthConfig::standard()));
  CHECK_FALSE(online.key_codebooks() == offline.key_codebooks());
  CHECK(offline.key_codebooks() == offline.value_codebooks());
}

TEST_CASE("prefill is deterministic down to the bytes") {
  const auto k = generate_gaussian(64, 32, 1);
  const auto v = generate_gaussian(64, 32, 2);
  const auto a = QuantizedKVCache::prefill(k, v, KVCacheOptions{}, 7).serialize();
  const auto b = QuantizedKVCache::prefill(k, v, KVCacheOptions{}, 7).serialize();
  CHECK(a == b);
  CHECK(a != QuantizedKVCache::prefill(k, v, KVCacheOptions{}, 8).serialize());
}

TEST_CASE("append into the full-precision tail") {
  const auto k = generate_gaussian(16, 32, 1);
  const auto v = generate_gaussian(16, 32, 2);
  auto cache = QuantizedKVCache::prefill(k, v, KVCacheOptions{}, 3);
  const auto extra = generate_gaussian(2, 32, 4);
  cache.append(extra.row(0), extra.row(1));
  CHECK(cache.token_count() == 17);
  CHECK(cache.tail_count() == 1);

  const auto keys = cache.decoded_keys();
  const auto values = cache.decoded_values();
  for (std::size_t j = 0; j < 32; ++j) {
    CHECK(keys(16, j) == extra(0, j));
    CHECK(values(16, j) == extra(1, j));
  }

  const auto q = generate_gaussian(1, 32, 5);
  CHECK(cache.attend(q.row(0)).scores.size() == 17);

  const std::vector<float> short_vec(16, 0.0f);
  CHECK_THROWS_AS(cache.append(short_vec, extra.row(1)), std::invalid_argument);
}

TEST_CASE("quantize-on-append stays within the prefill error envelope") {
  const auto k = generate_gaussian(512, 64, 1);
  const auto v = generate_gaussian(512, 64, 2);
  KVCacheOptions opts;
  opts.append_mode = AppendMode::kQuantize;
  auto cache = QuantizedKVCache::prefill(k, v, opts, 3);
  const auto extra = generate_gaussian(200, 64, 4);
  for (std::size_t i = 0; i < extra.rows(); ++i) cache.append(extra.row(i), extra.row(i));
  CHECK(cache.quantized_count() == 712);
  CHECK(cache.tail_count() == 0);

  const auto keys = cache.decoded_keys();
  double prefill_err = 0.0;
  for (std::size_t i = 0; i < 512; ++i) prefill_err += row_rel_error(keys.row(i), k.row(i));
  prefill_err /= 512;
  double append_err = 0.0;
  for (std::size_t i = 0; i < 200; ++i) append_err += row_rel_error(keys.row(512 + i), extra.row(i));
  append_err /= 200;
  CHECK(append_err == doctest::Approx(prefill_err).epsilon(0.1));
}

TEST_CASE("quantize-on-append refuses to reorder a tail") {
  const auto k = generate_gaussian(16, 32, 1);
  auto cache = QuantizedKVCache::prefill(k, k, KVCacheOptions{}, 3);
  cache.append(k.row(0), k.row(1));
  auto bytes = cache.serialize();
  // Flip the stored append mode to quantize.
  const std::size_t mode_offset = 4 + 4 + 3 * 4 + 4 * 4;
  bytes[mode_offset] = 1;
  auto reloaded = QuantizedKVCache::deserialize(bytes);
  CHECK_THROWS_AS(reloaded.append(k.row(2), k.row(3)), StateError);
}

TEST_CASE("attend edge cases") {
  SUBCASE("single token") {
    const auto k = generate_gaussian(1, 32, 1);
    const auto v = generate_gaussian(1, 32, 2);
    const auto cache = QuantizedKVCache::prefill(k, v, offline_options(5000), 3);
    const auto q = generate_gaussian(1, 32, 4);
    const auto r = cache.attend(q.row(0));
    REQUIRE(r.scores.size() == 1);
    CHECK(r.scores[0] == 1.0);
    const auto dv = cache.decoded_values();
    for (std::size_t j = 0; j < 32; ++j) CHECK(r.output[j] == doctest::Approx(dv(0, j)));
  }

  SUBCASE("zero query gives uniform scores and the mean value") {
    const auto k = generate_gaussian(40, 32, 1);
    const auto v = generate_gaussian(40, 32, 2);
    const auto cache = QuantizedKVCache::prefill(k, v, KVCacheOptions{}, 3);
    const std::vector<float> q(32, 0.0f);
    const auto r = cache.attend(q);
    for (double s : r.scores) CHECK(s == doctest::Approx(1.0 / 40).epsilon(1e-12));
    const auto dv = cache.decoded_values();
    for (std::size_t j = 0; j < 32; ++j) {
      double m = 0.0;
      for (std::size_t i = 0; i < 40; ++i) m += dv(i, j);
      CHECK(r.output[j] == doctest::Approx(m / 40).epsilon(1e-9));
    }
  }

  SUBCASE("empty cache") {
    const EmbeddingMatrix empty(0, 32);
    const auto cache = QuantizedKVCache::prefill(empty, empty, offline_options(5000), 3);
    CHECK(cache.token_count() == 0);
    const std::vector<float> q(32, 1.0f);
    CHECK_THROWS_AS(cache.attend(q), StateError);
    const auto report = cache.memory_report();
    CHECK(report.key_payload_bits == 0);
    CHECK(report.value_payload_bits == 0);
    CHECK(report.payload_bits_per_coordinate() == 0.0);
  }

  SUBCASE("query length") {
    const auto k = generate_gaussian(4, 32, 1);
    const auto cache = QuantizedKVCache::prefill(k, k, offline_options(5000), 3);
    const std::vector<float> q(16, 1.0f);
    CHECK_THROWS_AS(cache.attend(q), std::invalid_argument);
  }
}

TEST_CASE("attend_exact") {
  SUBCASE("identical keys give uniform scores") {
    EmbeddingMatrix k(10, 8);
    for (std::size_t i = 0; i < 10; ++i) {
      for (std::size_t j = 0; j < 8; ++j) k(i, j) = static_cast<float>(j) * 0.3f;
    }
    const auto v = generate_gaussian(10, 8, 1);
    const std::vector<float> q{1, 2, 3, 4, 5, 6, 7, 8};
    for (double s : attend_exact(k, v, q).scores) CHECK(s == doctest::Approx(0.1).epsilon(1e-12));
  }

  SUBCASE("a dominant logit concentrates the scores") {
    const auto k = generate_gaussian(20, 16, 2);
    const auto v = generate_gaussian(20, 16, 3);
    std::vector<float> q(k.row(7).begin(), k.row(7).end());
    for (auto& x : q) x *= 40.0f;
    const auto r = attend_exact(k, v, q);
    std::vector<double> logits(20);
    for (std::size_t i = 0; i < 20; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 16; ++j) s += static_cast<double>(k(i, j)) * q[j];
      logits[i] = s / 4.0;
    }
    std::vector<double> sorted = logits;
    std::sort(sorted.rbegin(), sorted.rend());
    REQUIRE(sorted[0] - sorted[1] > 10.0);
    REQUIRE(logits[7] == sorted[0]);
    CHECK(r.scores[7] > 0.99);
  }

  SUBCASE("scores are a distribution for random inputs") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto k = generate_gaussian(50, 16, seed);
      const auto v = generate_gaussian(50, 16, seed + 100);
      auto q = generate_gaussian(1, 16, seed + 200);
      for (auto& x : q.row(0)) x *= 10.0f;
      const auto r = attend_exact(k, v, q.row(0));
      CHECK(std::abs(score_sum(r) - 1.0) <= 1e-6);
      for (double s : r.scores) CHECK(s >= 0.0);
    }
  }

  SUBCASE("shift invariance of the logits") {
    // All keys share coordinate 0, so moving q along it adds one constant to
    // every logit.
    auto k = generate_gaussian(30, 16, 4);
    for (std::size_t i = 0; i < 30; ++i) k(i, 0) = 1.0f;
    const auto v = generate_gaussian(30, 16, 5);
    auto q = generate_gaussian(1, 16, 6);
    const auto base = attend_exact(k, v, q.row(0));
    q(0, 0) += 500.0f;
    const auto shifted = attend_exact(k, v, q.row(0));
    for (std::size_t i = 0; i < 30; ++i) CHECK(shifted.scores[i] == doctest::Approx(base.scores[i]).epsilon(1e-9));
  }

  SUBCASE("shape mismatch") {
    const auto k = generate_gaussian(5, 8, 1);
    const std::vector<float> q(8, 1.0f);
    CHECK_THROWS_AS(attend_exact(k, generate_gaussian(4, 8, 2), q), std::invalid_argument);
  }
}

TEST_CASE("lossless quantization reproduces exact attention") {
  Rng rng(31);
  const auto bits = BitWidthConfig::uniform(4, 3, 32);
  const auto books = build_offline(bits, 20000, 32);
  const auto k = rows_on_centroids(100, 64, books, rng);
  const auto v = rows_on_centroids(100, 64, books, rng);
  KVCacheOptions opts;
  opts.quantizer.bits = bits;
  opts.quantizer.radius_precision = RadiusPrecision::kF32;
  opts.quantizer.codebook_mode = CodebookMode::kOffline;
  opts.identity_rotation = true;
  const auto cache = QuantizedKVCache::prefill_with_codebooks(k, v, opts, books, books);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto q = generate_gaussian(1, 64, 40 + s);
    const auto approx = cache.attend(q.row(0));
    const auto exact = attend_exact(k, v, q.row(0));
    CHECK(relative_l2_error(approx.output, exact.output) <= 1e-4);
  }
}

TEST_CASE("attention error shrinks with more bits") {
  const auto k = generate_gaussian(256, 64, 1);
  const auto v = generate_gaussian(256, 64, 2);
  const auto queries = generate_gaussian(20, 64, 3);
  double previous = std::numeric_limits<double>::infinity();
  for (std::uint32_t b : {1u, 2u, 3u, 4u, 5u}) {
    auto opts = offline_options();
    opts.quantizer.bits = BitWidthConfig::uniform(4, b);
    const auto cache = QuantizedKVCache::prefill(k, v, opts, 4);
    double err = 0.0;
    for (std::size_t i = 0; i < queries.rows(); ++i) {
      err += relative_l2_error(cache.attend(queries.row(i)).output,
                               attend_exact(k, v, queries.row(i)).output);
    }
    CHECK(err <= previous * 1.02);
    previous = err;
  }
}

TEST_CASE("memory report") {
  const auto k = generate_gaussian(64, 128, 1);
  const auto v = generate_gaussian(64, 128, 2);
  auto cache = QuantizedKVCache::prefill(k, v, KVCacheOptions{}, 3);
  auto report = cache.memory_report();
  CHECK(report.nominal_bits_per_coordinate.value() == 3.875);
  CHECK(report.payload_bits_per_coordinate() == 3.875);
  CHECK(report.payload_compression_ratio() == doctest::Approx(16.0 / 3.875));
  CHECK(report.payload_compression_ratio() == doctest::Approx(4.129).epsilon(1e-3));
  CHECK(report.key_payload_bits == 64 * 62 * 8);
  CHECK(report.tail_bits == 0);
  CHECK(report.rotation_bits == 64);
  CHECK(report.key_codebook_bits == 64 * (16 + 4 + 4 + 4));
  CHECK(report.header_bits + report.body_bits() == 8 * cache.serialize().size());

  cache.append(k.row(0), v.row(0));
  report = cache.memory_report();
  CHECK(report.tail_bits == 2 * 32 * 128);
  CHECK(report.header_bits + report.body_bits() == 8 * cache.serialize().size());
  CHECK(report.to_json().find("\"payload_bits_per_coordinate\"") != std::string::npos);
}

TEST_CASE("serialization round trip") {
  const auto k = generate_gaussian(32, 32, 1);
  const auto v = generate_gaussian(32, 32, 2);
  auto cache = QuantizedKVCache::prefill(k, v, KVCacheOptions{}, 3);
  cache.append(k.row(0), v.row(1));
  const auto path = std::filesystem::temp_directory_path() / "pq_test_kvcache.pqkv";
  cache.save(path);
  const auto back = QuantizedKVCache::load(path);
  std::filesystem::remove(path);
  CHECK(back.serialize() == cache.serialize());
  CHECK(back.decoded_keys() == cache.decoded_keys());
  CHECK(back.decoded_values() == cache.decoded_values());
  const auto q = generate_gaussian(1, 32, 9);
  CHECK(back.attend(q.row(0)).output == cache.attend(q.row(0)).output);

  auto bytes = cache.serialize();
  bytes[0] = 'Z';
  CHECK_THROWS_AS(QuantizedKVCache::deserialize(bytes), FormatError);
  bytes = cache.serialize();
  bytes.resize(bytes.size() - 3);
  CHECK_THROWS_AS(QuantizedKVCache::deserialize(bytes), FormatError);
}

TEST_CASE("simulate_decode") {
  const auto pk = generate_gaussian(128, 32, 1);
  const auto pv = generate_gaussian(128, 32, 2);
  const auto sq = generate_gaussian(12, 32, 3);
  const auto sk = generate_gaussian(12, 32, 4);
  const auto sv = generate_gaussian(12, 32, 5);
  const auto trace = simulate_decode(pk, pv, sq, sk, sv, KVCacheOptions{}, 6);
  REQUIRE(trace.steps.size() == 12);
  for (std::size_t t = 0; t < 12; ++t) {
    CHECK(trace.steps[t].step == t);
    CHECK(trace.steps[t].tokens == 129 + t);
    CHECK(trace.steps[t].rel_error >= 0.0);
  }
  CHECK(trace.mean_rel_error() > 0.0);
  CHECK_THROWS_AS(simulate_decode(pk, pv, sq, sk, generate_gaussian(11, 32, 5), KVCacheOptions{}, 6),
                  std::invalid_argument);
}

TEST_CASE("concurrent readers see a consistent prefix") {
  const auto k = generate_gaussian(64, 32, 1);
  const auto v = generate_gaussian(64, 32, 2);
  auto cache = QuantizedKVCache::prefill(k, v, KVCacheOptions{}, 3);
  const auto extra = generate_gaussian(200, 32, 4);
  const auto q = generate_gaussian(1, 32, 5);
  std::atomic<bool> done{false};
  std::atomic<int> bad{0};
  std::vector<std::thread> readers;
  for (int t = 0; t < 3; ++t) {
    readers.emplace_back([&] {
      std::size_t last = 0;
      while (!done.load()) {
        const auto r = cache.attend(q.row(0));
        if (r.scores.size() < last || r.scores.size() < 64 || r.scores.size() > 264) ++bad;
        if (std::abs(score_sum(r) - 1.0) > 1e-5) ++bad;
        last = r.scores.size();
      }
    });
  }
  for (std::size_t i = 0; i < 200; i += 2) cache.append(extra.row(i), extra.row(i + 1));
  done = true;
  for (auto& t : readers) t.join();
  CHECK(bad.load() == 0);
  CHECK(cache.token_count() == 164);
}
