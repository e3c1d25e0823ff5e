#include <benchmark/benchmark.h>

#include "deltacomp/pmr.hpp"
#include "deltacomp/redundancy.hpp"

using namespace deltac;

namespace {

ModelConfig bench_config() {
    ModelConfig cfg;
    cfg.n_layers = 8;
    cfg.d_model = 128;
    cfg.n_heads = 4;
    cfg.d_ffn = 256;
    cfg.vocab_size = 258;
    cfg.max_seq_len = 128;
    return cfg;
}

std::vector<int> bench_tokens(int n) {
    Rng rng(3);
    std::vector<int> t(static_cast<size_t>(n));
    for (auto& x : t) x = static_cast<int>(rng.uniform_int(256));
    return t;
}

void BM_Forward(benchmark::State& state) {
    const int batch = static_cast<int>(state.range(0));
    const int seq = static_cast<int>(state.range(1));
    Model m = init_model(bench_config(), 5);
    auto tokens = bench_tokens(batch * seq);
    NoGradGuard ng;
    for (auto _ : state) {
        Tensor logits = forward(m, tokens, batch, seq);
        benchmark::DoNotOptimize(logits.values().data());
    }
    state.SetItemsProcessed(state.iterations() * batch * seq);
}

void BM_TrainStep(benchmark::State& state) {
    const int batch = static_cast<int>(state.range(0));
    const int seq = static_cast<int>(state.range(1));
    Model m = init_model(bench_config(), 7);
    m.set_requires_grad(true);
    auto params = m.parameters();
    AdamOptimizer opt(params);
    auto tokens = bench_tokens(batch * seq + 1);
    std::span<const int> inputs(tokens.data(), static_cast<size_t>(batch) * seq);
    std::vector<int> targets(tokens.begin() + 1, tokens.begin() + 1 + batch * seq);
    for (auto _ : state) {
        Tensor loss = softmax_cross_entropy(forward(m, inputs, batch, seq), targets);
        loss.backward();
        clip_grad_norm(params, 1.0);
        opt.step(1e-4);
        opt.zero_grad();
        benchmark::DoNotOptimize(loss.item());
    }
    state.SetItemsProcessed(state.iterations() * batch * seq);
}

void BM_HybridForward(benchmark::State& state) {
    ModelConfig cfg = bench_config();
    Model teacher = init_model(cfg, 9);
    SharingPlan plan = build_plan(cfg, PlanStrategy::sequential, SublayerKind::mlp, 3);
    CompressedModel student =
        compress(teacher, plan, uniform_rank_map(cfg, plan, 16), {InitMethod::svd});
    auto tokens = bench_tokens(8 * 64);
    std::vector<uint8_t> mask(student.plan.module_sites().size(), 1);
    mask[0] = 0;
    NoGradGuard ng;
    for (auto _ : state) {
        Tensor logits = hybrid_forward(teacher, student, mask, tokens, 8, 64);
        benchmark::DoNotOptimize(logits.values().data());
    }
    state.SetItemsProcessed(state.iterations() * 8 * 64);
}

} // namespace

BENCHMARK(BM_Forward)->Args({8, 64})->Args({16, 64});
BENCHMARK(BM_TrainStep)->Args({8, 64})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_HybridForward)->Unit(benchmark::kMillisecond);
