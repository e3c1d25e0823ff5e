#include <benchmark/benchmark.h>

#include "deltacomp/quantize.hpp"

using namespace deltac;

namespace {

void BM_QuantizeTensor(benchmark::State& state) {
    const int bits = static_cast<int>(state.range(0));
    const QuantScheme scheme = bits == 8 ? QuantScheme::absmax_int8 : QuantScheme::nf4;
    Rng rng(17);
    Tensor w = Tensor::randn({256, 256}, rng);
    for (auto _ : state) {
        QuantizedTensor q = quantize_tensor(w, bits, scheme);
        benchmark::DoNotOptimize(q.codes.data());
    }
    state.SetBytesProcessed(state.iterations() * w.numel() * 8);
}

void BM_Dequantize(benchmark::State& state) {
    const int bits = static_cast<int>(state.range(0));
    const QuantScheme scheme = bits == 8 ? QuantScheme::absmax_int8 : QuantScheme::nf4;
    Rng rng(19);
    Tensor w = Tensor::randn({256, 256}, rng);
    QuantizedTensor q = quantize_tensor(w, bits, scheme);
    for (auto _ : state) {
        Tensor back = dequantize(q);
        benchmark::DoNotOptimize(back.values().data());
    }
    state.SetBytesProcessed(state.iterations() * w.numel() * 8);
}

} // namespace

BENCHMARK(BM_QuantizeTensor)->Arg(8)->Arg(4);
BENCHMARK(BM_Dequantize)->Arg(8)->Arg(4);
