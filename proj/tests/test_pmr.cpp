#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "deltacomp/pmr.hpp"
#include "deltacomp/redundancy.hpp"

using namespace deltac;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.n_layers = 5;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.d_ffn = 48;
    cfg.vocab_size = 128; // ascii corpora feed straight in
    cfg.max_seq_len = 32;
    return cfg;
}

Corpus tiny_corpus(uint64_t seed, int n = 24000) {
    // byte stream with digram structure so there is something to learn
    Rng rng(seed);
    std::string text;
    const std::string alphabet = "abcdefghijklm ";
    char prev = 'a';
    for (int i = 0; i < n; ++i) {
        char c = rng.uniform_int(3) == 0
                     ? alphabet[static_cast<size_t>(rng.uniform_int(alphabet.size()))]
                     : static_cast<char>(prev == 'm' ? 'a' : prev + 1);
        if (c == ' ' && prev == ' ') c = 'a';
        text.push_back(c);
        prev = c;
    }
    return corpus_from_text("tiny", text, seed);
}

struct Fixture {
    ModelConfig cfg = tiny_config();
    Model teacher;
    SharingPlan plan;
    Fixture() : teacher(init_model(cfg, 5)), plan(build_plan(cfg, PlanStrategy::sequential,
                                                             SublayerKind::mlp, 1)) {}
    CompressedModel student(InitMethod m = InitMethod::svd, int rank = 4) const {
        CompressOptions opt;
        opt.method = m;
        opt.seed = 7;
        return compress(teacher, plan, uniform_rank_map(cfg, plan, rank), opt);
    }
};

uint64_t fnv1a(const std::vector<double>& v, uint64_t h = 1469598103934665603ull) {
    for (double d : v) {
        uint64_t bits;
        std::memcpy(&bits, &d, 8);
        for (int i = 0; i < 8; ++i) {
            h ^= (bits >> (8 * i)) & 0xff;
            h *= 1099511628211ull;
        }
    }
    return h;
}

uint64_t non_delta_hash(const CompressedModel& m) {
    uint64_t h = 1469598103934665603ull;
    for (const Tensor& t : m.retained_parameters()) h = fnv1a(t.values(), h);
    return h;
}

} // namespace

TEST_CASE("replacement_probability formula and extremes") {
    ReplacementScheduler s;
    s.p0 = 0.2;
    s.converge_step = 100;
    s.depth_bias = 0.0;

    CHECK(replacement_probability(s, 0, 0, 3) == doctest::Approx(0.2));
    CHECK(replacement_probability(s, 50, 0, 3) == doctest::Approx(0.6));
    CHECK(replacement_probability(s, 100, 0, 3) == 1.0);
    CHECK(replacement_probability(s, 100000, 2, 3) == 1.0);

    // depth bias: deeper sites ramp earlier, rank 0 recovers the even scheme
    s.depth_bias = 1.0;
    CHECK(replacement_probability(s, 50, 0, 3) == doctest::Approx(0.6));
    CHECK(replacement_probability(s, 50, 1, 3) == doctest::Approx(0.9));
    CHECK(replacement_probability(s, 50, 2, 3) == 1.0); // clipped

    // monotone in step and in depth rank
    for (int rank = 0; rank < 3; ++rank) {
        double prev = -1.0;
        for (int64_t step = 0; step <= 120; step += 10) {
            const double p = replacement_probability(s, step, rank, 3);
            CHECK(p >= prev);
            CHECK(p <= 1.0);
            prev = p;
        }
    }
    for (int64_t step : {0, 30, 70}) {
        double prev = -1.0;
        for (int rank = 0; rank < 3; ++rank) {
            const double p = replacement_probability(s, step, rank, 3);
            CHECK(p >= prev);
            prev = p;
        }
    }
}

TEST_CASE("sample_replacement_mask extremes and frequency") {
    Rng rng(11);
    ReplacementScheduler zero;
    zero.p0 = 0.0;
    zero.converge_step = 1000000000;
    for (int i = 0; i < 10; ++i) {
        auto m = sample_replacement_mask(zero, 0, 4, rng);
        for (uint8_t b : m) CHECK(b == 0);
    }
    ReplacementScheduler one;
    one.p0 = 1.0;
    for (int i = 0; i < 10; ++i) {
        auto m = sample_replacement_mask(one, 0, 4, rng);
        for (uint8_t b : m) CHECK(b == 1);
    }

    // p = 0.5: per-site frequency lands in [0.48, 0.52] over 10k draws
    ReplacementScheduler half;
    half.p0 = 0.5;
    half.converge_step = 1;
    std::vector<int64_t> counts(3, 0);
    Rng rng2(12);
    for (int i = 0; i < 10000; ++i) {
        auto m = sample_replacement_mask(half, 0, 3, rng2);
        for (int j = 0; j < 3; ++j) counts[static_cast<size_t>(j)] += m[static_cast<size_t>(j)];
    }
    for (int64_t c : counts) {
        CHECK(c >= 4800);
        CHECK(c <= 5200);
    }

    // deterministic given the rng seed
    Rng a(99), b(99);
    CHECK(sample_replacement_mask(half, 3, 5, a) == sample_replacement_mask(half, 3, 5, b));
}

TEST_CASE("hybrid_forward extremes are bit-exact") {
    Fixture fx;
    CompressedModel student = fx.student(InitMethod::svd, 4);
    // push the deltas away from the teacher so the two paths differ
    for (auto& [site, d] : student.deltas)
        for (auto& v : d.a.values_mut()) v *= 0.5;

    Rng rng(13);
    std::vector<int> tokens(24);
    for (auto& t : tokens) t = static_cast<int>(rng.uniform_int(fx.cfg.vocab_size));

    NoGradGuard ng;
    const auto sites = student.plan.module_sites();
    std::vector<uint8_t> none(sites.size(), 0), all(sites.size(), 1);

    Tensor teacher_logits = forward(fx.teacher, tokens, 2, 12);
    Tensor hybrid_off = hybrid_forward(fx.teacher, student, none, tokens, 2, 12);
    CHECK(hybrid_off.values() == teacher_logits.values());

    Tensor student_logits = transformer_forward(student.forward_params(), tokens, 2, 12);
    Tensor hybrid_on = hybrid_forward(fx.teacher, student, all, tokens, 2, 12);
    CHECK(hybrid_on.values() == student_logits.values());

    // the mixed mask differs from both (deltas were perturbed)
    CHECK(hybrid_off.values() != student_logits.values());

    std::vector<uint8_t> wrong(sites.size() + 1, 1);
    CHECK_THROWS_AS(hybrid_forward(fx.teacher, student, wrong, tokens, 2, 12), ValueError);
}

TEST_CASE("single-site mask on a full-rank student stays near the teacher") {
    Fixture fx;
    CompressedModel student =
        compress(fx.teacher, fx.plan, uniform_rank_map(fx.cfg, fx.plan, 0), {InitMethod::svd});
    Rng rng(17);
    std::vector<int> tokens(16);
    for (auto& t : tokens) t = static_cast<int>(rng.uniform_int(fx.cfg.vocab_size));
    NoGradGuard ng;
    std::vector<uint8_t> one(student.plan.module_sites().size(), 0);
    one[0] = 1;
    Tensor a = forward(fx.teacher, tokens, 1, 16);
    Tensor b = hybrid_forward(fx.teacher, student, one, tokens, 1, 16);
    double max_abs = 0.0;
    for (size_t i = 0; i < a.values().size(); ++i)
        max_abs = std::max(max_abs, std::abs(a.values()[i] - b.values()[i]));
    CHECK(max_abs < 1e-5);
}

TEST_CASE("distill_loss composition") {
    Rng rng(19);
    Tensor student = Tensor::randn({4, 7}, rng);
    Tensor teacher = Tensor::randn({4, 7}, rng);
    std::vector<int> targets = {1, 0, 6, 3};

    const double ce = softmax_cross_entropy(student, targets).item();
    const double kl = kl_divergence_logits(teacher, student).item();

    CHECK(distill_loss(student, teacher, targets, 0.0).item() == ce);
    CHECK(distill_loss(student, Tensor(), targets, 0.0).item() == ce); // teacher unused
    CHECK(distill_loss(student, student, targets, 1.0).item() == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(distill_loss(student, teacher, targets, 0.5).item() ==
          doctest::Approx(0.5 * ce + 0.5 * kl).epsilon(1e-12));

    // the two-class closed-form case plus its CE, hand-summed
    Tensor t2 = Tensor::from_data({1, 2}, {0.0, 0.0});
    Tensor s2 = Tensor::from_data({1, 2}, {std::log(3.0), 0.0});
    std::vector<int> tgt2 = {0};
    const double kl2 = 0.5 * std::log(0.5 / 0.75) + 0.5 * std::log(0.5 / 0.25);
    const double ce2 = -std::log(0.75);
    CHECK(distill_loss(s2, t2, tgt2, 0.5).item() ==
          doctest::Approx(0.5 * ce2 + 0.5 * kl2).epsilon(1e-12));

    CHECK_THROWS_AS(distill_loss(student, teacher, targets, 1.5), ValueError);
}

TEST_CASE("train: zero epochs returns the student unchanged") {
    Fixture fx;
    CompressedModel student = fx.student();
    const uint64_t before = non_delta_hash(student);
    uint64_t delta_before = 1469598103934665603ull;
    for (const Tensor& t : student.delta_parameters()) delta_before = fnv1a(t.values(), delta_before);

    Corpus corpus = tiny_corpus(1);
    TrainConfig cfg;
    cfg.epochs = 0;
    TrainReport rep = train(fx.teacher, student, corpus, cfg, nullptr);
    CHECK(rep.epochs.empty());
    CHECK(rep.steps == 0);
    CHECK(non_delta_hash(student) == before);
    uint64_t delta_after = 1469598103934665603ull;
    for (const Tensor& t : student.delta_parameters()) delta_after = fnv1a(t.values(), delta_after);
    CHECK(delta_after == delta_before);
}

TEST_CASE("train: delta-only mode leaves non-delta parameters bit-identical") {
    Fixture fx;
    CompressedModel student = fx.student(InitMethod::svd, 2);
    Corpus corpus = tiny_corpus(2);

    const uint64_t teacher_hash = [&] {
        uint64_t h = 1469598103934665603ull;
        for (const Tensor& t : fx.teacher.parameters()) h = fnv1a(t.values(), h);
        return h;
    }();
    const uint64_t frozen = non_delta_hash(student);
    uint64_t delta_before = 1469598103934665603ull;
    for (const Tensor& t : student.delta_parameters()) delta_before = fnv1a(t.values(), delta_before);

    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 4;
    cfg.seq_len = 16;
    cfg.tokens_per_epoch = 2048;
    cfg.val_tokens = 512;
    cfg.seed = 3;
    ReplacementScheduler sched;
    sched.p0 = 0.3;
    sched.converge_step = 16;
    TrainReport rep = train(fx.teacher, student, corpus, cfg, &sched);

    REQUIRE(rep.epochs.size() == 1);
    CHECK(rep.steps == 32);
    CHECK(rep.epochs[0].val_ppl > 0.0);
    CHECK(non_delta_hash(student) == frozen);
    uint64_t delta_after = 1469598103934665603ull;
    for (const Tensor& t : student.delta_parameters()) delta_after = fnv1a(t.values(), delta_after);
    CHECK(delta_after != delta_before); // deltas actually moved
    uint64_t teacher_after = 1469598103934665603ull;
    for (const Tensor& t : fx.teacher.parameters()) teacher_after = fnv1a(t.values(), teacher_after);
    CHECK(teacher_after == teacher_hash);
}

TEST_CASE("train: p0=1 run is step-identical to the no-scheduler baseline") {
    Fixture fx;
    Corpus corpus = tiny_corpus(3);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.seq_len = 16;
    cfg.tokens_per_epoch = 1024;
    cfg.val_tokens = 512;
    cfg.seed = 17;

    CompressedModel a = fx.student(InitMethod::svd, 2);
    CompressedModel b = fx.student(InitMethod::svd, 2);
    ReplacementScheduler sched;
    sched.p0 = 1.0;
    sched.converge_step = 5;
    TrainReport ra = train(fx.teacher, a, corpus, cfg, &sched);
    TrainReport rb = train(fx.teacher, b, corpus, cfg, nullptr);

    REQUIRE(ra.epochs.size() == rb.epochs.size());
    for (size_t i = 0; i < ra.epochs.size(); ++i) {
        CHECK(ra.epochs[i].train_loss == rb.epochs[i].train_loss);
        CHECK(ra.epochs[i].val_ppl == rb.epochs[i].val_ppl);
        CHECK(ra.epochs[i].replacement_rate == rb.epochs[i].replacement_rate);
    }
    // distillation makes headway epoch over epoch on this seeded fixture
    CHECK(ra.epochs[1].train_loss < ra.epochs[0].train_loss);
    auto pa = a.delta_parameters();
    auto pb = b.delta_parameters();
    for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].values() == pb[i].values());
}

TEST_CASE("train is deterministic given the seed") {
    Fixture fx;
    Corpus corpus = tiny_corpus(4);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 4;
    cfg.seq_len = 16;
    cfg.tokens_per_epoch = 1024;
    cfg.val_tokens = 512;
    cfg.seed = 23;
    ReplacementScheduler sched;
    sched.p0 = 0.4;
    sched.converge_step = 10;

    CompressedModel a = fx.student(InitMethod::svd, 2);
    CompressedModel b = fx.student(InitMethod::svd, 2);
    TrainReport ra = train(fx.teacher, a, corpus, cfg, &sched);
    TrainReport rb = train(fx.teacher, b, corpus, cfg, &sched);
    CHECK(ra.epochs[0].train_loss == rb.epochs[0].train_loss);
    auto pa = a.delta_parameters();
    auto pb = b.delta_parameters();
    for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].values() == pb[i].values());
}

TEST_CASE("train: extra epochs continue after the ramp at full replacement") {
    Fixture fx;
    CompressedModel student = fx.student(InitMethod::svd, 2);
    Corpus corpus = tiny_corpus(10);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 4;
    cfg.seq_len = 16;
    cfg.tokens_per_epoch = 512;
    cfg.val_tokens = 256;
    cfg.seed = 53;
    ReplacementScheduler sched;
    sched.p0 = 0.5;
    sched.converge_step = 4;
    sched.extra_epochs = 2;
    TrainReport rep = train(fx.teacher, student, corpus, cfg, &sched);
    REQUIRE(rep.epochs.size() == 3); // ramp epoch + two extra
    CHECK(rep.epochs.back().replacement_rate == 1.0);
    CHECK(rep.steps == 3 * (512 / 16 / 4));
}

TEST_CASE("train: joint mode updates retained weights through merged adapters") {
    Fixture fx;
    CompressedModel student = fx.student(InitMethod::svd, 2);
    Corpus corpus = tiny_corpus(5);
    const uint64_t frozen = non_delta_hash(student);

    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 4;
    cfg.seq_len = 16;
    cfg.tokens_per_epoch = 1024;
    cfg.val_tokens = 512;
    cfg.seed = 29;
    cfg.mode = TrainMode::joint;
    cfg.adapter_rank = 2;
    TrainReport rep = train(fx.teacher, student, corpus, cfg, nullptr);
    REQUIRE(rep.epochs.size() == 1);
    CHECK(non_delta_hash(student) != frozen); // adapters merged into the base
    CHECK_NOTHROW(student.validate());
    // teacher still pristine
    Model fresh = init_model(fx.cfg, 5);
    for (const auto& [site, w] : fx.teacher.weights)
        CHECK(w.values() == fresh.weights.at(site).values());
}

TEST_CASE("train: dropout on delta contributions still runs deterministically") {
    Fixture fx;
    Corpus corpus = tiny_corpus(6);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 4;
    cfg.seq_len = 16;
    cfg.tokens_per_epoch = 512;
    cfg.val_tokens = 256;
    cfg.seed = 31;
    cfg.lora_dropout = 0.2;
    CompressedModel a = fx.student(InitMethod::svd, 2);
    CompressedModel b = fx.student(InitMethod::svd, 2);
    TrainReport ra = train(fx.teacher, a, corpus, cfg, nullptr);
    TrainReport rb = train(fx.teacher, b, corpus, cfg, nullptr);
    CHECK(ra.epochs[0].train_loss == rb.epochs[0].train_loss);
}

TEST_CASE("train: empty corpus and bad config error out") {
    Fixture fx;
    CompressedModel student = fx.student();
    Corpus corpus = tiny_corpus(7, 400); // too small for a batch
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch_size = 64;
    cfg.seq_len = 32;
    CHECK_THROWS_AS(train(fx.teacher, student, corpus, cfg, nullptr), ValueError);
    cfg.alpha = 2.0;
    CHECK_THROWS_AS(train(fx.teacher, student, corpus, cfg, nullptr), ValueError);
}

TEST_CASE("appending forced high-probability continuations raises mean log-likelihood") {
    ModelConfig cfg = tiny_config();
    cfg.n_layers = 2;
    Model m = init_model(cfg, 43);
    Corpus corpus = tiny_corpus(9, 48000);
    TeacherTrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 8;
    tc.seq_len = 16;
    tc.tokens_per_epoch = 8192;
    tc.val_tokens = 1024;
    tc.seed = 47;
    train_teacher(m, corpus, tc);

    NoGradGuard ng;
    auto val = corpus.split(Split::val);
    std::vector<int> seq(val.begin(), val.begin() + 12);
    SequenceScore base = score_sequence(m, seq);

    // greedily extend with the model's own argmax picks
    for (int step = 0; step < 6; ++step) {
        Tensor logits = forward(m, seq, 1, static_cast<int>(seq.size()));
        const int t = static_cast<int>(seq.size()) - 1;
        int best = 0;
        for (int v = 1; v < cfg.vocab_size; ++v)
            if (logits.at({0, t, v}) > logits.at({0, t, best})) best = v;
        seq.push_back(best);
    }
    SequenceScore ext = score_sequence(m, seq);
    CHECK(ext.total_log_likelihood / ext.token_count >
          base.total_log_likelihood / base.token_count);
}

TEST_CASE("teacher training reduces loss on a learnable stream") {
    ModelConfig cfg = tiny_config();
    cfg.n_layers = 2;
    Model m = init_model(cfg, 37);
    Corpus corpus = tiny_corpus(8, 48000);
    TeacherTrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 8;
    tc.seq_len = 16;
    tc.tokens_per_epoch = 8192;
    tc.val_tokens = 1024;
    tc.lr = 3e-3;
    tc.seed = 41;
    TrainReport rep = train_teacher(m, corpus, tc);
    REQUIRE(rep.epochs.size() == 2);
    // smoothed loss falls across the first epochs on this seeded fixture
    CHECK(rep.epochs[1].train_loss < rep.epochs[0].train_loss);
    CHECK(rep.epochs[1].val_ppl < 128.0); // far below uniform over the vocab
    const std::string lines = rep.to_json_lines();
    CHECK(lines.find("\"epoch\":1") != std::string::npos);
    CHECK(lines.find("epochs_to_threshold") != std::string::npos);
}
