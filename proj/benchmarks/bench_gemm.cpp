#include <benchmark/benchmark.h>

#include "deltacomp/tensor.hpp"

using namespace deltac;

namespace {

void BM_GemmNN(benchmark::State& state) {
    const int m = static_cast<int>(state.range(0));
    const int k = static_cast<int>(state.range(1));
    const int n = static_cast<int>(state.range(2));
    Rng rng(1);
    Tensor a = Tensor::randn({m, k}, rng);
    Tensor b = Tensor::randn({k, n}, rng);
    std::vector<double> c(static_cast<size_t>(m) * n);
    for (auto _ : state) {
        detail::gemm_nn(a.values().data(), b.values().data(), c.data(), m, k, n, false);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * 2ll * m * k * n);
}

void BM_MatmulGraph(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0));
    Rng rng(2);
    Tensor a = Tensor::randn({n, n}, rng, 1.0, true);
    Tensor b = Tensor::randn({n, n}, rng);
    for (auto _ : state) {
        Tensor loss = sum(matmul(a, b));
        loss.backward();
        a.zero_grad();
        benchmark::DoNotOptimize(loss.item());
    }
    state.SetItemsProcessed(state.iterations() * 6ll * n * n * n);
}

} // namespace

BENCHMARK(BM_GemmNN)->Args({1024, 128, 256})->Args({512, 128, 258})->Args({64, 32, 64});
BENCHMARK(BM_MatmulGraph)->Arg(128)->Arg(256);
