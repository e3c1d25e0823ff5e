#pragma once

#include <array>

#include "deltacomp/tensor.hpp"

namespace deltac {

enum class QuantScheme : uint8_t { absmax_int8, nf4 };
enum class QuantStrategy : uint8_t { AnchorSkip, AllQuant };
enum class QuantGranularity : uint8_t { per_row, per_tensor };

const char* scheme_name(QuantScheme s);
const char* strategy_name(QuantStrategy s);
QuantStrategy parse_quant_strategy(std::string_view s);

struct QuantPolicy {
    int bits = 8; // 8 -> absmax_int8, 4 -> nf4
    QuantStrategy strategy = QuantStrategy::AllQuant;
    QuantGranularity granularity = QuantGranularity::per_row;
};

// Integer-coded 2-D weight with per-row (vector-wise) scales. 4-bit codes
// are nibble-packed two per byte, each row padded to a whole byte.
struct QuantizedTensor {
    std::vector<int> shape; // [rows, cols]
    int bits = 8;
    QuantScheme scheme = QuantScheme::absmax_int8;
    QuantGranularity granularity = QuantGranularity::per_row;
    std::vector<uint8_t> codes;
    std::vector<double> scales; // one per row, or a single entry for per_tensor

    int rows() const { return shape[0]; }
    int cols() const { return shape[1]; }
    size_t row_bytes() const { return bits == 4 ? (static_cast<size_t>(cols()) + 1) / 2
                                                : static_cast<size_t>(cols()); }
};

// The 16 NF4 code levels: normalized standard-normal quantiles, symmetric
// around (and including) zero, endpoints at -1 and 1.
const std::array<double, 16>& nf4_levels();

QuantizedTensor quantize_tensor(const Tensor& w, int bits, QuantScheme scheme,
                                QuantGranularity granularity = QuantGranularity::per_row);
Tensor dequantize(const QuantizedTensor& q);

struct CompressedModel; // delta.hpp

// Applies `policy` to the base weights. Delta modules, norm gains, the
// embedding and the output projection always stay in full precision;
// AnchorSkip additionally leaves every anchor site untouched.
CompressedModel quantize_model(const CompressedModel& m, const QuantPolicy& policy);

} // namespace deltac
