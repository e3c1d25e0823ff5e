#include <benchmark/benchmark.h>

#include "deltacomp/linalg.hpp"

using namespace deltac;

namespace {

void BM_TruncatedSvd(benchmark::State& state) {
    const int m = static_cast<int>(state.range(0));
    const int n = static_cast<int>(state.range(1));
    const int r = static_cast<int>(state.range(2));
    Rng rng(11);
    Tensor w = Tensor::randn({m, n}, rng);
    for (auto _ : state) {
        SvdResult s = truncated_svd(w, r);
        benchmark::DoNotOptimize(s.s.values().data());
    }
}

void BM_Qr(benchmark::State& state) {
    const int m = static_cast<int>(state.range(0));
    const int n = static_cast<int>(state.range(1));
    Rng rng(13);
    Tensor w = Tensor::randn({m, n}, rng);
    for (auto _ : state) {
        QrResult q = qr_decompose(w);
        benchmark::DoNotOptimize(q.r.values().data());
    }
}

} // namespace

BENCHMARK(BM_TruncatedSvd)->Args({128, 256, 16})->Args({256, 256, 32})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_Qr)->Args({128, 256})->Args({256, 256})->Unit(benchmark::kMillisecond);
