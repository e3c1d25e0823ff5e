// End-to-end checks of the command-line surface: each test drives the real
// binary through a tiny pipeline in a temp directory.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "deltacomp/checkpoint.hpp"

using namespace deltac;
using nlohmann::json;

namespace {

namespace fs = std::filesystem;

struct Run {
    int exit_code = -1;
    std::string out, err;
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return "";
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << bytes;
}

struct Workspace {
    fs::path dir;
    Workspace() {
        dir = fs::temp_directory_path() / ("deltacomp_cli_" + std::to_string(::getpid()));
        fs::create_directories(dir);
    }
    ~Workspace() { fs::remove_all(dir); }
    std::string path(const std::string& name) const { return (dir / name).string(); }

    Run run(const std::string& args) const {
        const std::string out_f = path("stdout.txt"), err_f = path("stderr.txt");
        const std::string cmd = std::string(DELTACOMP_CLI_PATH) + " " + args + " > " + out_f +
                                " 2> " + err_f;
        const int status = std::system(cmd.c_str());
        Run r;
        r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.out = slurp(out_f);
        r.err = slurp(err_f);
        return r;
    }
};

json last_json_line(const std::string& text) {
    size_t end = text.find_last_not_of("\n");
    if (end == std::string::npos) return {};
    size_t start = text.rfind('\n', end);
    start = start == std::string::npos ? 0 : start + 1;
    return json::parse(text.substr(start, end - start + 1));
}

// One shared workspace with a trained micro-teacher; built once, reused by
// every test case below.
const Workspace& ws() {
    static Workspace w = [] {
        Workspace ws;
        // corpus: repetitive word soup, ~96 KiB
        Rng rng(5);
        const std::vector<std::string> words = {"alpha", "bravo", "copper", "delta", "ember",
                                                "forge", "glint", "harrow", "inlet", "joist"};
        std::string text;
        while (text.size() < 96 * 1024) {
            text += words[static_cast<size_t>(rng.uniform_int(words.size()))];
            text += rng.uniform_int(12) == 0 ? ".\n" : " ";
        }
        spit(ws.path("corpus.txt"), text);

        spit(ws.path("teacher.json"), R"({
          "model": {"n_layers": 5, "d_model": 32, "n_heads": 4, "d_ffn": 64,
                     "max_seq_len": 64, "seed": 9},
          "train": {"epochs": 1, "lr": 0.003, "lr_schedule": "cosine",
                     "batch_size": 8, "seq_len": 32, "tokens_per_epoch": 8192,
                     "val_tokens": 2048}
        })");
        spit(ws.path("plan.json"),
             R"({"strategy": "sequential", "sublayer": "mlp", "k": 1, "rank": 4})");

        Run t = ws.run("train-teacher --config " + ws.path("teacher.json") + " --corpus " +
                       ws.path("corpus.txt") + " --out " + ws.path("teacher.dllm"));
        REQUIRE(t.exit_code == 0);
        return ws;
    }();
    return w;
}

} // namespace

TEST_CASE("train-teacher: repeated seed gives identical checkpoint bytes") {
    const auto& w = ws();
    Run a = w.run("train-teacher --config " + w.path("teacher.json") + " --corpus " +
                  w.path("corpus.txt") + " --out " + w.path("t_a.dllm") + " --seed 123");
    Run b = w.run("train-teacher --config " + w.path("teacher.json") + " --corpus " +
                  w.path("corpus.txt") + " --out " + w.path("t_b.dllm") + " --seed 123");
    CHECK(a.exit_code == 0);
    CHECK(b.exit_code == 0);
    CHECK(slurp(w.path("t_a.dllm")) == slurp(w.path("t_b.dllm")));
    CHECK_FALSE(slurp(w.path("t_a.dllm")).empty());

    json ja = last_json_line(a.out);
    CHECK(ja.at("command") == "train-teacher");
    CHECK(ja.at("tokens_processed").get<int64_t>() > 0);
}

TEST_CASE("train-teacher: missing corpus exits nonzero with a diagnostic") {
    const auto& w = ws();
    Run r = w.run("train-teacher --config " + w.path("teacher.json") +
                  " --corpus /nonexistent.txt --out " + w.path("nope.dllm"));
    CHECK(r.exit_code != 0);
    CHECK(r.err.find("error") != std::string::npos);
}

TEST_CASE("eval: zeroed output projection scores ppl = vocab size, runs repeat bit-equal") {
    const auto& w = ws();
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.d_ffn = 48;
    cfg.max_seq_len = 64;
    Model m = init_model(cfg, 3);
    for (auto& v : m.output_proj.values_mut()) v = 0.0;
    save_checkpoint(m, w.path("uniform.dllm"));

    Run r1 = w.run("eval --model " + w.path("uniform.dllm") + " --corpus " + w.path("corpus.txt") +
                   " --split val --seq-len 32 --max-tokens 512");
    REQUIRE(r1.exit_code == 0);
    json j1 = last_json_line(r1.out);
    CHECK(j1.at("perplexity").get<double>() == doctest::Approx(258.0).epsilon(1e-9));
    CHECK(j1.at("split") == "val");
    CHECK(j1.at("token_count").get<int64_t>() >= 512);

    Run r2 = w.run("eval --model " + w.path("uniform.dllm") + " --corpus " + w.path("corpus.txt") +
                   " --split val --seq-len 32 --max-tokens 512");
    json j2 = last_json_line(r2.out);
    CHECK(j1.at("perplexity").get<double>() == j2.at("perplexity").get<double>());
}

TEST_CASE("compress: full-rank svd matches teacher perplexity within 1e-4") {
    const auto& w = ws();
    spit(w.path("plan_full.json"),
         R"({"strategy": "sequential", "sublayer": "mlp", "k": 1, "rank": "full"})");
    Run c = w.run("compress --teacher " + w.path("teacher.dllm") + " --plan " +
                  w.path("plan_full.json") + " --init svd --out " + w.path("student_full.dllm"));
    REQUIRE(c.exit_code == 0);
    json cj = last_json_line(c.out);
    CHECK(cj.at("params_after").get<int64_t>() > cj.at("params_before").get<int64_t>() * 9 / 10);
    CHECK(cj.contains("delta_storage_bytes"));

    auto eval_ppl = [&](const std::string& model) {
        Run e = w.run("eval --model " + w.path(model) + " --corpus " + w.path("corpus.txt") +
                      " --split val --seq-len 32 --max-tokens 2048");
        REQUIRE(e.exit_code == 0);
        return last_json_line(e.out).at("perplexity").get<double>();
    };
    const double teacher_ppl = eval_ppl("teacher.dllm");
    const double student_ppl = eval_ppl("student_full.dllm");
    CHECK(std::abs(teacher_ppl - student_ppl) < 1e-4);
}

TEST_CASE("compress: rank flag reduces parameters and reports the fraction") {
    const auto& w = ws();
    Run c = w.run("compress --teacher " + w.path("teacher.dllm") + " --plan " + w.path("plan.json") +
                  " --rank 4 --init svd --out " + w.path("student.dllm"));
    REQUIRE(c.exit_code == 0);
    json cj = last_json_line(c.out);
    CHECK(cj.at("params_after").get<int64_t>() < cj.at("params_before").get<int64_t>());
    CHECK(cj.at("compression").get<double>() > 0.0);
    CHECK(cj.at("delta_sites").get<int>() == 3);
}

TEST_CASE("compress: invalid plan JSON names the missing field") {
    const auto& w = ws();
    spit(w.path("plan_bad.json"), R"({"sublayer": "mlp", "k": 1})");
    Run c = w.run("compress --teacher " + w.path("teacher.dllm") + " --plan " +
                  w.path("plan_bad.json") + " --out " + w.path("x.dllm"));
    CHECK(c.exit_code != 0);
    CHECK(c.err.find("strategy") != std::string::npos);
}

TEST_CASE("delta-tune: zero epochs round-trips the student byte-identically") {
    const auto& w = ws();
    // reuse the rank-4 student from the compress test, or build it fresh
    if (slurp(w.path("student.dllm")).empty()) {
        Run c = w.run("compress --teacher " + w.path("teacher.dllm") + " --plan " +
                      w.path("plan.json") + " --rank 4 --init svd --out " + w.path("student.dllm"));
        REQUIRE(c.exit_code == 0);
    }
    Run t = w.run("delta-tune --teacher " + w.path("teacher.dllm") + " --student " +
                  w.path("student.dllm") + " --corpus " + w.path("corpus.txt") +
                  " --epochs 0 --out " + w.path("student_e0.dllm"));
    REQUIRE(t.exit_code == 0);
    CHECK(slurp(w.path("student.dllm")) == slurp(w.path("student_e0.dllm")));
}

TEST_CASE("delta-tune: --p0 1 report equals the no-PMR baseline report") {
    const auto& w = ws();
    if (slurp(w.path("student.dllm")).empty()) {
        Run c = w.run("compress --teacher " + w.path("teacher.dllm") + " --plan " +
                      w.path("plan.json") + " --rank 4 --init svd --out " + w.path("student.dllm"));
        REQUIRE(c.exit_code == 0);
    }
    const std::string common = " --teacher " + w.path("teacher.dllm") + " --student " +
                               w.path("student.dllm") + " --corpus " + w.path("corpus.txt") +
                               " --alpha 0.5 --epochs 1 --lr 0.002 --batch-size 8 --seq-len 32 "
                               "--tokens-per-epoch 2048 --val-tokens 512 --seed 7";
    Run a = w.run("delta-tune" + common + " --p0 1 --converge-step 4 --out " + w.path("tuned_a.dllm") +
                  " --report " + w.path("rep_a.jsonl"));
    Run b = w.run("delta-tune" + common + " --out " + w.path("tuned_b.dllm") + " --report " +
                  w.path("rep_b.jsonl"));
    REQUIRE(a.exit_code == 0);
    REQUIRE(b.exit_code == 0);
    CHECK(slurp(w.path("tuned_a.dllm")) == slurp(w.path("tuned_b.dllm")));

    // per-epoch records match field for field (wall clock lives only in the summary)
    std::istringstream la(slurp(w.path("rep_a.jsonl"))), lb(slurp(w.path("rep_b.jsonl")));
    std::string ra, rb;
    int rows = 0;
    while (std::getline(la, ra) && std::getline(lb, rb)) {
        json ja = json::parse(ra), jb = json::parse(rb);
        if (ja.contains("epoch")) {
            CHECK(ja == jb);
            ++rows;
        }
    }
    CHECK(rows == 1);
}

TEST_CASE("quantize: AnchorSkip keeps anchor tensors f32 in the output header") {
    const auto& w = ws();
    if (slurp(w.path("student.dllm")).empty()) {
        Run c = w.run("compress --teacher " + w.path("teacher.dllm") + " --plan " +
                      w.path("plan.json") + " --rank 4 --init svd --out " + w.path("student.dllm"));
        REQUIRE(c.exit_code == 0);
    }
    Run q = w.run("quantize --model " + w.path("student.dllm") +
                  " --bits 8 --strategy AnchorSkip --out " + w.path("q8.dllm"));
    REQUIRE(q.exit_code == 0);
    json qj = last_json_line(q.out);
    CHECK(qj.at("storage_bytes").get<int64_t>() < qj.at("storage_bytes_fp").get<int64_t>());

    LoadedCheckpoint lc = load_checkpoint(w.path("q8.dllm"));
    REQUIRE(lc.kind == CheckpointKind::compressed);
    for (const auto& site : lc.compressed->plan.anchor_sites())
        CHECK_FALSE(lc.compressed->base.at(site).quantized());
    bool any_quantized = false;
    for (const auto& [site, sw] : lc.compressed->base) any_quantized |= sw.quantized();
    CHECK(any_quantized);
}

TEST_CASE("inspect: emits model, plan and similarity records") {
    const auto& w = ws();
    if (slurp(w.path("student.dllm")).empty()) {
        Run c = w.run("compress --teacher " + w.path("teacher.dllm") + " --plan " +
                      w.path("plan.json") + " --rank 4 --init svd --out " + w.path("student.dllm"));
        REQUIRE(c.exit_code == 0);
    }
    Run i = w.run("inspect --model " + w.path("student.dllm"));
    REQUIRE(i.exit_code == 0);
    CHECK(i.out.find("\"record\":\"model\"") != std::string::npos);
    CHECK(i.out.find("\"record\":\"plan\"") != std::string::npos);
    CHECK(i.out.find("\"record\":\"delta_site\"") != std::string::npos);

    Run s = w.run("inspect --model " + w.path("teacher.dllm") + " --corpus " + w.path("corpus.txt") +
                  " --similarity-out " + w.path("sim.txt"));
    REQUIRE(s.exit_code == 0);
    CHECK(s.out.find("\"record\":\"similarity\"") != std::string::npos);
    const std::string table = slurp(w.path("sim.txt"));
    CHECK(table.find("0.attention") != std::string::npos);
    CHECK(table.find("3.mlp") != std::string::npos);
}

TEST_CASE("unknown checkpoint input fails cleanly") {
    const auto& w = ws();
    spit(w.path("junk.dllm"), "this is not a checkpoint");
    Run r = w.run("eval --model " + w.path("junk.dllm") + " --corpus " + w.path("corpus.txt"));
    CHECK(r.exit_code != 0);
    CHECK(r.err.find("magic") != std::string::npos);
}
