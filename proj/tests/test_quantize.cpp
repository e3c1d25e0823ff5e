#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "deltacomp/quantize.hpp"
#include "deltacomp/redundancy.hpp"
#include "oracles.hpp"

using namespace deltac;

namespace {

Tensor randt(std::vector<int> shape, uint64_t seed, double std_dev = 1.0) {
    Rng rng(seed);
    return Tensor::randn(std::move(shape), rng, std_dev);
}

} // namespace

TEST_CASE("nf4 levels match the normal-quantile oracle") {
    const auto& levels = nf4_levels();
    const double denom = oracles::normal_quantile(15.0 / 16.0);
    // codes 0..7 are the quantiles at 1/16 .. 8/16, 8 duplicates the zero,
    // 9..15 are the quantiles at 9/16 .. 15/16; all normalized by q(15/16)
    for (int j = 1; j <= 15; ++j) {
        const double want = oracles::normal_quantile(j / 16.0) / denom;
        const int idx = j <= 8 ? j - 1 : j;
        CHECK(levels[static_cast<size_t>(idx)] == doctest::Approx(want).epsilon(1e-9));
    }
    CHECK(levels[7] == 0.0);
    CHECK(levels[8] == 0.0);
    CHECK(levels[0] == -1.0);
    CHECK(levels[15] == 1.0);
    // symmetric
    for (int i = 0; i < 8; ++i)
        CHECK(levels[static_cast<size_t>(i)] ==
              doctest::Approx(-levels[static_cast<size_t>(15 - i)]).epsilon(1e-15));
    // ascending
    for (int i = 0; i + 1 < 16; ++i) CHECK(levels[static_cast<size_t>(i)] <= levels[static_cast<size_t>(i) + 1]);
}

TEST_CASE("zero matrix quantizes to zero codes and dequantizes to zeros") {
    for (int bits : {8, 4}) {
        const QuantScheme scheme = bits == 8 ? QuantScheme::absmax_int8 : QuantScheme::nf4;
        QuantizedTensor q = quantize_tensor(Tensor::zeros({3, 5}), bits, scheme);
        Tensor back = dequantize(q);
        for (double v : back.values()) CHECK(v == 0.0);
        if (bits == 8)
            for (uint8_t c : q.codes) CHECK(static_cast<int8_t>(c) == 0);
    }
}

TEST_CASE("int8 per-row round-trip bound: |dequant - w| <= scale/2") {
    Tensor w = randt({12, 33}, 3, 0.7);
    QuantizedTensor q = quantize_tensor(w, 8, QuantScheme::absmax_int8);
    Tensor back = dequantize(q);
    for (int i = 0; i < 12; ++i) {
        const double s = q.scales[static_cast<size_t>(i)];
        CHECK(s > 0.0);
        for (int j = 0; j < 33; ++j)
            CHECK(std::abs(back.at({i, j}) - w.at({i, j})) <= s / 2.0 + 1e-15);
    }
}

TEST_CASE("nf4 packing, odd widths, and scale recovery") {
    Tensor w = randt({5, 7}, 4);
    QuantizedTensor q = quantize_tensor(w, 4, QuantScheme::nf4);
    CHECK(q.row_bytes() == 4);
    CHECK(q.codes.size() == 5 * 4);
    Tensor back = dequantize(q);
    for (int i = 0; i < 5; ++i) {
        double amax = 0.0;
        for (int j = 0; j < 7; ++j) amax = std::max(amax, std::abs(w.at({i, j})));
        CHECK(q.scales[static_cast<size_t>(i)] == amax);
        // the absmax element maps to an endpoint level exactly
        bool endpoint_hit = false;
        for (int j = 0; j < 7; ++j)
            if (std::abs(std::abs(back.at({i, j})) - amax) < 1e-12) endpoint_hit = true;
        CHECK(endpoint_hit);
    }
}

TEST_CASE("quantization is idempotent code-for-code") {
    for (int bits : {8, 4}) {
        const QuantScheme scheme = bits == 8 ? QuantScheme::absmax_int8 : QuantScheme::nf4;
        Tensor w = randt({9, 14}, static_cast<uint64_t>(40 + bits));
        QuantizedTensor q1 = quantize_tensor(w, bits, scheme);
        QuantizedTensor q2 = quantize_tensor(dequantize(q1), bits, scheme);
        CHECK(q1.codes == q2.codes);
        for (size_t i = 0; i < q1.scales.size(); ++i)
            CHECK(q1.scales[i] == doctest::Approx(q2.scales[i]).epsilon(1e-12));
    }
}

TEST_CASE("per-tensor granularity uses a single scale") {
    Tensor w = randt({6, 6}, 5);
    QuantizedTensor q = quantize_tensor(w, 8, QuantScheme::absmax_int8, QuantGranularity::per_tensor);
    CHECK(q.scales.size() == 1);
    Tensor back = dequantize(q);
    for (size_t i = 0; i < w.values().size(); ++i)
        CHECK(std::abs(back.values()[i] - w.values()[i]) <= q.scales[0] / 2.0 + 1e-15);
}

TEST_CASE("quantize_tensor validation") {
    CHECK_THROWS_AS(quantize_tensor(Tensor::zeros({3}), 8, QuantScheme::absmax_int8),
                    DimensionError);
    CHECK_THROWS_AS(quantize_tensor(Tensor::zeros({3, 3}), 4, QuantScheme::absmax_int8), ValueError);
    Tensor bad = Tensor::from_data({1, 2}, {1.0, std::nan("")});
    CHECK_THROWS_AS(quantize_tensor(bad, 8, QuantScheme::absmax_int8), ValueError);
}

namespace {

ModelConfig qcfg() {
    ModelConfig cfg;
    cfg.n_layers = 6;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.d_ffn = 48;
    cfg.vocab_size = 31;
    cfg.max_seq_len = 32;
    return cfg;
}

} // namespace

TEST_CASE("quantize_model: AllQuant covers every block weight on an empty plan") {
    Model m = init_model(qcfg(), 9);
    CompressedModel cm = as_compressed(m);
    QuantPolicy pol;
    pol.bits = 8;
    pol.strategy = QuantStrategy::AllQuant;
    CompressedModel q = quantize_model(cm, pol);
    CHECK(q.quant.has_value());
    for (const auto& [site, w] : q.base) CHECK(w.quantized());
    // norms, embedding, output projection untouched by construction
    CHECK(q.embedding.values() == m.embedding.values());
    CHECK(q.output_proj.values() == m.output_proj.values());
}

TEST_CASE("quantize_model: AnchorSkip leaves exactly the anchor set unquantized") {
    ModelConfig cfg = qcfg();
    Model m = init_model(cfg, 10);
    SharingPlan plan = build_plan(cfg, PlanStrategy::alternating, SublayerKind::mlp, 1);
    CompressedModel cm = compress(m, plan, uniform_rank_map(cfg, plan, 4), {InitMethod::svd});
    QuantPolicy pol;
    pol.bits = 4;
    pol.strategy = QuantStrategy::AnchorSkip;
    CompressedModel q = quantize_model(cm, pol);

    const auto anchors = q.plan.anchor_sites();
    for (const auto& [site, w] : q.base) {
        if (anchors.count(site))
            CHECK_FALSE(w.quantized());
        else
            CHECK(w.quantized());
    }
    // deltas stay full precision
    for (const auto& [site, d] : q.deltas) {
        CHECK(d.a.defined());
        CHECK(d.b.defined());
    }
    CHECK(q.quant->strategy == QuantStrategy::AnchorSkip);
}

TEST_CASE("quantized model still evaluates, with bounded logit drift at 8 bits") {
    ModelConfig cfg = qcfg();
    Model m = init_model(cfg, 11);
    CompressedModel cm = as_compressed(m);
    QuantPolicy pol;
    pol.bits = 8;
    pol.strategy = QuantStrategy::AllQuant;
    CompressedModel q = quantize_model(cm, pol);

    Rng rng(12);
    std::vector<int> tokens(16);
    for (auto& t : tokens) t = static_cast<int>(rng.uniform_int(cfg.vocab_size));
    NoGradGuard ng;
    Tensor a = forward(m, tokens, 1, 16);
    Tensor b = transformer_forward(q.forward_params(), tokens, 1, 16);
    double max_abs = 0.0;
    for (size_t i = 0; i < a.values().size(); ++i)
        max_abs = std::max(max_abs, std::abs(a.values()[i] - b.values()[i]));
    CHECK(max_abs < 0.5); // untrained weights, 8-bit codes: drift stays small
    CHECK(max_abs > 0.0); // and it genuinely quantized
}
