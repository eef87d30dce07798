#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

#include "polarquant/byte_io.hpp"
#include "polarquant/error.hpp"
#include "polarquant/half.hpp"
#include "polarquant/stats.hpp"
#include "polarquant/tensor_io.hpp"

using namespace polarquant;

namespace {

std::filesystem::path temp_path(const char* name) {
  return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("generate_gaussian is deterministic in its seed") {
  const auto a = generate_gaussian(1, 4, 7);
  const auto b = generate_gaussian(1, 4, 7);
  CHECK(a == b);
  CHECK_FALSE(a == generate_gaussian(1, 4, 8));
}

TEST_CASE("generate_gaussian moments") {
  // N = 1e5: sd of the mean is 0.0032 and of the variance 0.0045, so +-0.02
  // is a >4 sigma band.
  const auto m = generate_gaussian(100000, 1, 42);
  std::vector<double> xs(m.data().begin(), m.data().end());
  CHECK(std::abs(mean(xs)) <= 0.02);
  CHECK(std::abs(variance(xs) - 1.0) <= 0.02);
}

TEST_CASE("generate_gaussian rejects zero dimensions") {
  CHECK_THROWS_AS(generate_gaussian(0, 8, 1), std::invalid_argument);
  CHECK_THROWS_AS(generate_gaussian(8, 0, 1), std::invalid_argument);
}

TEST_CASE("EmbeddingMatrix enforces its invariants") {
  CHECK_THROWS_AS(EmbeddingMatrix(2, 2, {1.0f, 2.0f, 3.0f}), std::invalid_argument);
  CHECK_THROWS_AS(EmbeddingMatrix(1, 2, {1.0f, std::numeric_limits<float>::quiet_NaN()}),
                  std::invalid_argument);
  CHECK_THROWS_AS(EmbeddingMatrix(1, 1, {std::numeric_limits<float>::infinity()}),
                  std::invalid_argument);
}

TEST_CASE("save/load round-trips f32 bit-exactly") {
  std::vector<float> data(12);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = 0.1f * static_cast<float>(i) - 0.37f;
  const EmbeddingMatrix m(3, 4, data);
  const auto path = temp_path("pq_roundtrip.pqt");
  save_tensor(m, path);
  CHECK(load_tensor(path) == m);

  const auto g = generate_gaussian(17, 33, 5);
  save_tensor(g, path);
  CHECK(load_tensor(path) == g);
  std::filesystem::remove(path);
}

TEST_CASE("f16 payload rounds each value through binary16") {
  const EmbeddingMatrix m(1, 3, {1.0f, 0.333f, -2.5f});
  const auto back = decode_tensor(encode_tensor(m, DType::kF16));
  for (std::size_t j = 0; j < 3; ++j) CHECK(back(0, j) == round_to_half(m(0, j)));
}

TEST_CASE("corrupt tensor files raise FormatError") {
  const EmbeddingMatrix m(2, 2, {1, 2, 3, 4});
  auto bytes = encode_tensor(m);

  SUBCASE("wrong magic") {
    bytes[0] = 'X';
    CHECK_THROWS_AS(decode_tensor(bytes), FormatError);
  }
  SUBCASE("truncated payload") {
    bytes.pop_back();
    CHECK_THROWS_AS(decode_tensor(bytes), FormatError);
  }
  SUBCASE("unknown dtype") {
    bytes[4] = 9;
    CHECK_THROWS_AS(decode_tensor(bytes), FormatError);
  }
  SUBCASE("truncated header") {
    bytes.resize(10);
    CHECK_THROWS_AS(decode_tensor(bytes), FormatError);
  }
}

TEST_CASE("header layout is little-endian u32 fields after the magic") {
  const EmbeddingMatrix m(2, 3);
  const auto bytes = encode_tensor(m);
  REQUIRE(bytes.size() == 4 + 4 * 4 + 6 * 4);
  CHECK(bytes[0] == 'P');
  CHECK(bytes[3] == 'N');
  CHECK(bytes[8] == 2);   // rank
  CHECK(bytes[12] == 2);  // rows
  CHECK(bytes[16] == 3);  // cols
}

TEST_CASE("half conversion on known values") {
  CHECK(float_to_half(1.0f) == 0x3C00);
  CHECK(float_to_half(-2.0f) == 0xC000);
  CHECK(float_to_half(65504.0f) == 0x7BFF);
  CHECK(float_to_half(65520.0f) == 0x7C00);
  CHECK(float_to_half(0.0f) == 0x0000);
  CHECK(half_to_float(0x0001) == std::ldexp(1.0f, -24));
  CHECK(half_to_float(0x3555) == doctest::Approx(0.33325195f));
  // Every finite half survives half -> float -> half.
  for (std::uint32_t h = 0; h < 0x10000; ++h) {
    if ((h & 0x7C00u) == 0x7C00u) continue;
    REQUIRE(float_to_half(half_to_float(static_cast<std::uint16_t>(h))) == h);
  }
}

TEST_CASE("heavy-tailed generator has outliers") {
  const auto m = generate_heavy_tailed(2000, 64, 3);
  float max_abs = 0.0f;
  for (float v : m.data()) max_abs = std::max(max_abs, std::abs(v));
  CHECK(max_abs > 20.0f);
  CHECK(m == generate_heavy_tailed(2000, 64, 3));
}
