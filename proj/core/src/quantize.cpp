#include "deltacomp/quantize.hpp"

#include <algorithm>
#include <cmath>

#include "deltacomp/delta.hpp"

namespace deltac {

const char* scheme_name(QuantScheme s) {
    return s == QuantScheme::absmax_int8 ? "absmax_int8" : "nf4";
}

const char* strategy_name(QuantStrategy s) {
    return s == QuantStrategy::AnchorSkip ? "AnchorSkip" : "AllQuant";
}

QuantStrategy parse_quant_strategy(std::string_view s) {
    if (s == "AnchorSkip") return QuantStrategy::AnchorSkip;
    if (s == "AllQuant") return QuantStrategy::AllQuant;
    throw ValueError("unknown quantization strategy '" + std::string(s) +
                     "' (expected AnchorSkip|AllQuant)");
}

// Standard-normal quantiles at j/16 (j = 1..15), normalized so the endpoints
// sit at +-1. The midpoint quantile is zero; the spare 16th slot duplicates
// it so the code table stays symmetric. The encoder always picks the lower
// index on ties, so code 8 is never emitted.
const std::array<double, 16>& nf4_levels() {
    static const std::array<double, 16> levels = {
        -1.0,
        -0.749842888559644915,
        -0.57827695632176258,
        -0.439658899477642104,
        -0.318603654004875223,
        -0.207701647134158131,
        -0.102541280207261305,
        0.0,
        0.0,
        0.102541280207261305,
        0.207701647134158131,
        0.318603654004875223,
        0.439658899477642104,
        0.57827695632176258,
        0.749842888559644915,
        1.0,
    };
    return levels;
}

namespace {

uint8_t nearest_nf4_code(double x) {
    const auto& levels = nf4_levels();
    int best = 0;
    double best_d = std::abs(x - levels[0]);
    for (int i = 1; i < 16; ++i) {
        const double d = std::abs(x - levels[static_cast<size_t>(i)]);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return static_cast<uint8_t>(best);
}

double row_absmax(const double* w, int n) {
    double amax = 0.0;
    for (int i = 0; i < n; ++i) amax = std::max(amax, std::abs(w[i]));
    return amax;
}

} // namespace

QuantizedTensor quantize_tensor(const Tensor& w, int bits, QuantScheme scheme,
                                QuantGranularity granularity) {
    if (w.ndim() != 2)
        throw DimensionError("quantize_tensor: expected 2-D weight, got " + shape_str(w.shape()));
    for (double v : w.values())
        if (!std::isfinite(v)) throw ValueError("quantize_tensor: input contains non-finite values");
    if ((bits == 8) != (scheme == QuantScheme::absmax_int8) ||
        (bits == 4) != (scheme == QuantScheme::nf4))
        throw ValueError("quantize_tensor: bits " + std::to_string(bits) +
                         " do not match scheme " + scheme_name(scheme));

    const int rows = w.dim(0), cols = w.dim(1);
    QuantizedTensor q;
    q.shape = {rows, cols};
    q.bits = bits;
    q.scheme = scheme;
    q.granularity = granularity;

    double tensor_amax = 0.0;
    if (granularity == QuantGranularity::per_tensor)
        tensor_amax = row_absmax(w.values().data(), rows * cols);

    const size_t rb = q.row_bytes();
    q.codes.assign(static_cast<size_t>(rows) * rb, 0);
    q.scales.assign(granularity == QuantGranularity::per_row ? static_cast<size_t>(rows) : 1, 1.0);

    for (int i = 0; i < rows; ++i) {
        const double* wi = w.values().data() + static_cast<size_t>(i) * cols;
        double amax = granularity == QuantGranularity::per_row ? row_absmax(wi, cols) : tensor_amax;
        double scale_store;
        if (scheme == QuantScheme::absmax_int8) {
            scale_store = amax > 0.0 ? amax / 127.0 : 1.0;
        } else {
            scale_store = amax > 0.0 ? amax : 1.0;
        }
        if (granularity == QuantGranularity::per_row)
            q.scales[static_cast<size_t>(i)] = scale_store;
        else if (i == 0)
            q.scales[0] = scale_store;

        uint8_t* ci = q.codes.data() + static_cast<size_t>(i) * rb;
        if (scheme == QuantScheme::absmax_int8) {
            for (int j = 0; j < cols; ++j) {
                long code = std::lround(wi[j] / scale_store);
                code = std::clamp(code, -127l, 127l);
                ci[j] = static_cast<uint8_t>(static_cast<int8_t>(code));
            }
        } else {
            for (int j = 0; j < cols; ++j) {
                const uint8_t code = nearest_nf4_code(wi[j] / scale_store);
                if (j % 2 == 0)
                    ci[j / 2] = code;
                else
                    ci[j / 2] = static_cast<uint8_t>(ci[j / 2] | (code << 4));
            }
        }
    }
    return q;
}

Tensor dequantize(const QuantizedTensor& q) {
    const int rows = q.rows(), cols = q.cols();
    Tensor out = Tensor::zeros({rows, cols});
    auto& ov = out.values_mut();
    const size_t rb = q.row_bytes();
    for (int i = 0; i < rows; ++i) {
        const double s = q.granularity == QuantGranularity::per_row
                             ? q.scales[static_cast<size_t>(i)]
                             : q.scales[0];
        const uint8_t* ci = q.codes.data() + static_cast<size_t>(i) * rb;
        double* oi = ov.data() + static_cast<size_t>(i) * cols;
        if (q.scheme == QuantScheme::absmax_int8) {
            for (int j = 0; j < cols; ++j) oi[j] = static_cast<int8_t>(ci[j]) * s;
        } else {
            for (int j = 0; j < cols; ++j) {
                const uint8_t nib = j % 2 == 0 ? (ci[j / 2] & 0x0f) : (ci[j / 2] >> 4);
                oi[j] = nf4_levels()[nib] * s;
            }
        }
    }
    return out;
}

CompressedModel quantize_model(const CompressedModel& m, const QuantPolicy& policy) {
    if (policy.bits != 8 && policy.bits != 4)
        throw ValueError("quantize_model: bits must be 4 or 8, got " + std::to_string(policy.bits));
    const QuantScheme scheme =
        policy.bits == 8 ? QuantScheme::absmax_int8 : QuantScheme::nf4;
    const auto anchors = m.plan.anchor_sites();

    CompressedModel out = m;
    for (auto& [site, w] : out.base) {
        if (policy.strategy == QuantStrategy::AnchorSkip && anchors.count(site)) {
            if (w.quantized()) w = StoredWeight{w.materialize(), {}};
            continue;
        }
        Tensor fp = w.materialize();
        w.q = quantize_tensor(fp, policy.bits, scheme, policy.granularity);
        w.fp = Tensor();
    }
    out.quant = policy;
    return out;
}

} // namespace deltac
