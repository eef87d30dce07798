#pragma once

// Record-level helpers shared by the batch and cache file formats.

#include <cstdint>
#include <memory>
#include <vector>

#include "polarquant/byte_io.hpp"
#include "polarquant/quantizer.hpp"

namespace polarquant::detail {

// d, L, radius precision, per-level bits, rotation seed.
void write_config_header(std::vector<std::uint8_t>& out, std::size_t d,
                         const QuantizerConfig& config);
// Returns d and fills `config` (codebook mode is not stored).
std::size_t read_config_header(ByteReader& in, QuantizerConfig& config);

void write_record(std::vector<std::uint8_t>& out, const QuantizedEmbedding& qe);
QuantizedEmbedding read_record(ByteReader& in, std::size_t d,
                               const std::shared_ptr<const BitWidthConfig>& bits,
                               RadiusPrecision precision);

}  // namespace polarquant::detail
