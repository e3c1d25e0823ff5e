// deltacomp: compress a small decoder-only transformer by sharing weights
// across blocks with trainable low-rank deltas, recover quality with
// replacement-scheduled distillation, then optionally quantize.
//
// Subcommands: train-teacher, compress, delta-tune, eval, quantize, inspect.
// Machine-readable output is line-JSON on stdout; logs go to stderr.

#include <chrono>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "deltacomp/checkpoint.hpp"
#include "deltacomp/pmr.hpp"

using namespace deltac;
using nlohmann::json;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValueError("cannot open file '" + path + "'");
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValueError("cannot open file '" + path + "' for writing");
    out << text;
}

void emit(const json& j) { std::cout << j.dump() << "\n"; }

// Like compression_ratio, but full-rank deltas can legitimately grow the
// model; reports carry the signed value instead of refusing.
double signed_fraction(int64_t before, int64_t after) {
    return static_cast<double>(before - after) / static_cast<double>(before);
}

json report_json(const TrainReport& r) {
    json j;
    j["epochs_to_threshold"] = r.epochs_to_threshold;
    j["wall_clock_s"] = r.wall_clock_s;
    j["tokens_processed"] = r.tokens_processed;
    j["steps"] = r.steps;
    if (!r.epochs.empty()) {
        j["final_val_ppl"] = r.epochs.back().val_ppl;
        j["final_train_loss"] = r.epochs.back().train_loss;
    }
    return j;
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.vocab_size = kVocabSize;
    if (j.contains("n_layers")) c.n_layers = j.at("n_layers").get<int>();
    if (j.contains("d_model")) c.d_model = j.at("d_model").get<int>();
    if (j.contains("n_heads")) c.n_heads = j.at("n_heads").get<int>();
    if (j.contains("d_ffn")) c.d_ffn = j.at("d_ffn").get<int>();
    if (j.contains("vocab_size")) c.vocab_size = j.at("vocab_size").get<int>();
    if (j.contains("max_seq_len")) c.max_seq_len = j.at("max_seq_len").get<int>();
    if (j.contains("rms_eps")) c.rms_eps = j.at("rms_eps").get<double>();
    if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
    c.validate();
    return c;
}

// ---- train-teacher --------------------------------------------------------

int cmd_train_teacher(const std::string& config_path, const std::string& corpus_path,
                      const std::string& out_path, int64_t seed, bool seed_given) {
    json cfg_json;
    try {
        cfg_json = json::parse(read_file(config_path));
    } catch (const json::exception& e) {
        throw ValueError(std::string("config is not valid JSON: ") + e.what());
    }
    ModelConfig mc = model_config_from_json(cfg_json.value("model", json::object()));
    TeacherTrainConfig tc;
    const json tj = cfg_json.value("train", json::object());
    if (tj.contains("epochs")) tc.epochs = tj.at("epochs").get<int>();
    if (tj.contains("lr")) tc.lr = tj.at("lr").get<double>();
    if (tj.contains("lr_schedule")) tc.lr_schedule = parse_lr_schedule(tj.at("lr_schedule").get<std::string>());
    if (tj.contains("batch_size")) tc.batch_size = tj.at("batch_size").get<int>();
    if (tj.contains("seq_len")) tc.seq_len = tj.at("seq_len").get<int>();
    if (tj.contains("tokens_per_epoch")) tc.tokens_per_epoch = tj.at("tokens_per_epoch").get<int64_t>();
    if (tj.contains("val_tokens")) tc.val_tokens = tj.at("val_tokens").get<int64_t>();
    if (seed_given) mc.seed = static_cast<uint64_t>(seed);
    tc.seed = mc.seed;

    Corpus corpus = load_corpus(corpus_path, mc.seed);
    std::cerr << "training teacher: " << mc.n_layers << " layers, d_model " << mc.d_model
              << ", corpus " << corpus.id << " (" << corpus.size() << " tokens)\n";

    Model model = init_model(mc, mc.seed);
    TrainReport report = train_teacher(model, corpus, tc);
    for (const auto& row : report.epochs)
        std::cerr << "epoch " << row.epoch << ": train_loss " << row.train_loss << " val_ppl "
                  << row.val_ppl << "\n";
    save_checkpoint(model, out_path);

    json out = report_json(report);
    out["command"] = "train-teacher";
    out["checkpoint"] = out_path;
    out["param_count"] = count_params(model);
    emit(out);
    return 0;
}

// ---- compress -------------------------------------------------------------

int cmd_compress(const std::string& teacher_path, const std::string& plan_path,
                 const std::string& rank_flag, const std::string& init_flag,
                 const std::string& out_path, const std::string& calib_path, uint64_t seed) {
    LoadedCheckpoint lc = load_checkpoint(teacher_path);
    if (lc.kind != CheckpointKind::model)
        throw ValueError("compress: --teacher must be a plain model checkpoint");
    Model& teacher = *lc.model;

    PlanSpec spec = parse_plan_spec(read_file(plan_path));
    if (!rank_flag.empty()) {
        if (rank_flag == "full") spec.rank = -1;
        else spec.rank = std::stoi(rank_flag);
    }
    CompressOptions opt;
    opt.method = init_flag.empty() ? InitMethod::svd : parse_init_method(init_flag);
    opt.seed = seed;

    std::optional<Corpus> calib;
    if (!calib_path.empty()) calib = load_corpus(calib_path, seed);
    if (opt.method == InitMethod::eva && !calib)
        throw ValueError("compress: --init eva requires --calib");

    SharingPlan plan =
        build_plan(teacher.config, spec.strategy, spec.sublayer, spec.k, nullptr,
                   spec.protected_blocks ? &*spec.protected_blocks : nullptr);
    const auto ranks = resolve_rank_map(teacher.config, plan, spec);
    CompressedModel student = compress(teacher, plan, ranks, opt, calib ? &*calib : nullptr);
    save_checkpoint(student, out_path);

    const int64_t before = count_params(teacher.config);
    const int64_t after = student.stored_param_count();
    json out;
    out["command"] = "compress";
    out["checkpoint"] = out_path;
    out["params_before"] = before;
    out["params_after"] = after;
    out["compression"] = signed_fraction(before, after);
    out["delta_sites"] = student.deltas.size();
    out["delta_params"] = student.delta_param_count();
    out["delta_storage_bytes"] = delta_storage_bytes(student);
    out["init"] = init_method_name(opt.method);
    emit(out);
    return 0;
}

// ---- delta-tune -------------------------------------------------------------

struct TuneFlags {
    double alpha = 0.5, p0 = 0.2, gamma = 0.0, lr = 1e-3;
    int64_t converge_step = 200;
    int extra_epochs = 0, epochs = 1;
    std::string mode = "delta_only", lr_schedule = "constant";
    int batch_size = 16, seq_len = 64;
    int64_t tokens_per_epoch = 0, val_tokens = 32768;
    double alpha_lora = 0.0, lora_dropout = 0.0;
    int adapter_rank = 8;
    uint64_t seed = 0;
};

int cmd_delta_tune(const std::string& teacher_path, const std::string& student_path,
                   const std::string& corpus_path, const std::string& out_path,
                   const std::string& report_path, const TuneFlags& f, bool pmr_requested) {
    LoadedCheckpoint tl = load_checkpoint(teacher_path);
    if (tl.kind != CheckpointKind::model)
        throw ValueError("delta-tune: --teacher must be a plain model checkpoint");
    LoadedCheckpoint sl = load_checkpoint(student_path);
    if (sl.kind != CheckpointKind::compressed)
        throw ValueError("delta-tune: --student must be a compressed checkpoint");
    if (sl.compressed->quant)
        throw ValueError("delta-tune: student is quantized; tune before quantizing");

    Corpus corpus = load_corpus(corpus_path, f.seed);

    TrainConfig tc;
    tc.alpha = f.alpha;
    tc.lr = f.lr;
    tc.lr_schedule = parse_lr_schedule(f.lr_schedule);
    tc.epochs = f.epochs;
    tc.batch_size = f.batch_size;
    tc.seq_len = f.seq_len;
    tc.seed = f.seed;
    tc.mode = parse_train_mode(f.mode);
    tc.alpha_lora = f.alpha_lora;
    tc.lora_dropout = f.lora_dropout;
    tc.adapter_rank = f.adapter_rank;
    tc.tokens_per_epoch = f.tokens_per_epoch;
    tc.val_tokens = f.val_tokens;

    ReplacementScheduler sched;
    sched.p0 = f.p0;
    sched.converge_step = f.converge_step;
    sched.depth_bias = f.gamma;
    sched.extra_epochs = f.extra_epochs;

    std::cerr << "delta-tune: " << sl.compressed->deltas.size() << " delta matrices, mode "
              << f.mode << ", pmr " << (pmr_requested ? "on" : "off") << "\n";
    TrainReport report =
        train(*tl.model, *sl.compressed, corpus, tc, pmr_requested ? &sched : nullptr);
    for (const auto& row : report.epochs)
        std::cerr << "epoch " << row.epoch << ": train_loss " << row.train_loss << " val_ppl "
                  << row.val_ppl << " rate " << row.replacement_rate << "\n";

    save_checkpoint(*sl.compressed, out_path);
    if (!report_path.empty()) write_file(report_path, report.to_json_lines());

    json out = report_json(report);
    out["command"] = "delta-tune";
    out["checkpoint"] = out_path;
    out["pmr"] = pmr_requested;
    emit(out);
    return 0;
}

// ---- eval -------------------------------------------------------------------

int cmd_eval(const std::string& model_path, const std::string& corpus_path,
             const std::string& split_name_, int seq_len, int64_t max_tokens) {
    const auto t0 = std::chrono::steady_clock::now();
    LoadedCheckpoint lc = load_checkpoint(model_path);
    Corpus corpus = load_corpus(corpus_path, 0);
    const Split split = parse_split(split_name_);

    EvalStats st = evaluate_perplexity(lc.forward_params(), corpus.split(split), seq_len, 8,
                                       max_tokens);
    const int64_t original = count_params(lc.config());
    const int64_t stored = lc.stored_param_count();
    json out;
    out["command"] = "eval";
    out["dataset"] = corpus.id;
    out["split"] = split_name_;
    out["perplexity"] = st.perplexity;
    out["token_count"] = st.token_count;
    out["storage_bytes"] = lc.kind == CheckpointKind::model ? storage_bytes(*lc.model)
                                                            : storage_bytes(*lc.compressed);
    out["param_count"] = stored;
    out["compression"] = signed_fraction(original, stored);
    out["wall_clock_s"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    emit(out);
    return 0;
}

// ---- quantize -----------------------------------------------------------------

int cmd_quantize(const std::string& model_path, int bits, const std::string& strategy,
                 const std::string& out_path) {
    LoadedCheckpoint lc = load_checkpoint(model_path);
    QuantPolicy policy;
    policy.bits = bits;
    policy.strategy = parse_quant_strategy(strategy);

    CompressedModel cm = lc.kind == CheckpointKind::compressed ? std::move(*lc.compressed)
                                                               : as_compressed(*lc.model);
    CompressedModel q = quantize_model(cm, policy);
    save_checkpoint(q, out_path);

    json out;
    out["command"] = "quantize";
    out["checkpoint"] = out_path;
    out["bits"] = bits;
    out["strategy"] = strategy;
    out["storage_bytes"] = storage_bytes(q);
    out["storage_bytes_fp"] = storage_bytes(cm);
    emit(out);
    return 0;
}

// ---- inspect -------------------------------------------------------------------

int cmd_inspect(const std::string& model_path, const std::string& corpus_path,
                const std::string& similarity_out) {
    LoadedCheckpoint lc = load_checkpoint(model_path);
    const ModelConfig& cfg = lc.config();

    json summary;
    summary["record"] = "model";
    summary["kind"] = lc.kind == CheckpointKind::model ? "model" : "compressed";
    summary["n_layers"] = cfg.n_layers;
    summary["d_model"] = cfg.d_model;
    summary["n_heads"] = cfg.n_heads;
    summary["d_ffn"] = cfg.d_ffn;
    summary["vocab_size"] = cfg.vocab_size;
    summary["param_count"] = lc.stored_param_count();
    summary["original_param_count"] = count_params(cfg);
    summary["compression"] = signed_fraction(count_params(cfg), lc.stored_param_count());
    summary["storage_bytes"] = lc.kind == CheckpointKind::model ? storage_bytes(*lc.model)
                                                                : storage_bytes(*lc.compressed);
    emit(summary);

    if (lc.kind == CheckpointKind::compressed) {
        const CompressedModel& m = *lc.compressed;
        json planj;
        planj["record"] = "plan";
        planj["strategy"] = plan_strategy_name(m.plan.strategy);
        planj["protected_blocks"] = m.plan.protected_blocks;
        planj["delta_storage_bytes"] = delta_storage_bytes(m);
        if (m.quant) planj["quant_bits"] = m.quant->bits;
        emit(planj);
        for (const auto& e : m.plan.entries) {
            const DeltaModule& d = m.deltas.at(e.target);
            json row;
            row["record"] = "delta_site";
            row["target"] = e.target.str();
            row["anchor"] = e.anchor.str();
            row["rank"] = d.rank;
            row["scaling"] = d.scaling;
            row["init"] = init_method_name(d.init);
            row["params"] = d.param_count();
            emit(row);
        }
    }

    if (!corpus_path.empty()) {
        if (lc.kind != CheckpointKind::model)
            throw ValueError("inspect: similarity probing requires a plain model checkpoint");
        Corpus corpus = load_corpus(corpus_path, cfg.seed);
        CorpusSample sample = draw_sample(corpus, Split::val, 8192, 64, cfg.seed);
        ImportanceReport rep = layer_similarity(*lc.model, sample, SublayerKind::both);
        for (const auto& e : rep.entries) {
            json row;
            row["record"] = "similarity";
            row["site"] = std::to_string(e.block) + "." + sublayer_name(e.sublayer);
            row["score"] = e.score;
            row["n_positions"] = e.n_positions;
            emit(row);
        }
        if (!similarity_out.empty()) write_file(similarity_out, rep.to_table());
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"delta-compression toolkit for small decoder-only transformers"};
    app.require_subcommand(1);

    // train-teacher
    auto* t = app.add_subcommand("train-teacher", "train a teacher model on a byte corpus");
    std::string t_config, t_corpus, t_out;
    int64_t t_seed = 0;
    t->add_option("--config", t_config, "model/train config JSON")->required();
    t->add_option("--corpus", t_corpus, "corpus text file")->required();
    t->add_option("--out", t_out, "output checkpoint path")->required();
    auto* t_seed_opt = t->add_option("--seed", t_seed, "seed override");

    // compress
    auto* c = app.add_subcommand("compress", "replace planned weights with anchored deltas");
    std::string c_teacher, c_plan, c_rank, c_init = "svd", c_out, c_calib;
    uint64_t c_seed = 0;
    c->add_option("--teacher", c_teacher, "teacher checkpoint")->required();
    c->add_option("--plan", c_plan, "plan config JSON file")->required();
    c->add_option("--rank", c_rank, "uniform delta rank, or 'full'");
    c->add_option("--init", c_init, "delta init: gaussian|svd|qr|eva");
    c->add_option("--out", c_out, "output checkpoint path")->required();
    c->add_option("--calib", c_calib, "calibration corpus (eva init)");
    c->add_option("--seed", c_seed, "seed for gaussian/eva sampling");

    // delta-tune
    auto* d = app.add_subcommand("delta-tune", "train delta modules with distillation");
    std::string d_teacher, d_student, d_corpus, d_out, d_report;
    TuneFlags f;
    d->add_option("--teacher", d_teacher, "teacher checkpoint")->required();
    d->add_option("--student", d_student, "compressed student checkpoint")->required();
    d->add_option("--corpus", d_corpus, "corpus text file")->required();
    d->add_option("--out", d_out, "output checkpoint path")->required();
    d->add_option("--report", d_report, "write per-epoch line-JSON report here");
    d->add_option("--alpha", f.alpha, "distillation weight in [0,1]");
    auto* d_p0 = d->add_option("--p0", f.p0, "initial replacement probability");
    auto* d_cs = d->add_option("--converge-step", f.converge_step, "step at which the rate hits 1");
    auto* d_g = d->add_option("--gamma", f.gamma, "depth bias for uneven replacement");
    auto* d_x = d->add_option("--extra-epochs", f.extra_epochs, "epochs after convergence");
    d->add_option("--epochs", f.epochs, "ramp-phase epochs");
    d->add_option("--lr", f.lr, "learning rate");
    d->add_option("--lr-schedule", f.lr_schedule, "constant|cosine");
    d->add_option("--mode", f.mode, "delta_only|joint");
    d->add_option("--batch-size", f.batch_size, "sequences per step");
    d->add_option("--seq-len", f.seq_len, "tokens per sequence");
    d->add_option("--tokens-per-epoch", f.tokens_per_epoch, "cap on train tokens per epoch");
    d->add_option("--val-tokens", f.val_tokens, "cap on validation tokens per epoch");
    d->add_option("--alpha-lora", f.alpha_lora, "adapter scaling numerator");
    d->add_option("--lora-dropout", f.lora_dropout, "drop-connect rate on delta contributions");
    d->add_option("--adapter-rank", f.adapter_rank, "adapter rank (joint mode)");
    d->add_option("--seed", f.seed, "training seed");

    // eval
    auto* e = app.add_subcommand("eval", "perplexity of a checkpoint on a corpus split");
    std::string e_model, e_corpus, e_split = "val";
    int e_seq_len = 64;
    int64_t e_max_tokens = 0;
    e->add_option("--model", e_model, "checkpoint")->required();
    e->add_option("--corpus", e_corpus, "corpus text file")->required();
    e->add_option("--split", e_split, "train|val|test");
    e->add_option("--seq-len", e_seq_len, "evaluation window");
    e->add_option("--max-tokens", e_max_tokens, "stop after this many scored positions");

    // quantize
    auto* q = app.add_subcommand("quantize", "post-training weight quantization");
    std::string q_model, q_strategy = "AllQuant", q_out;
    int q_bits = 8;
    q->add_option("--model", q_model, "checkpoint")->required();
    q->add_option("--bits", q_bits, "4 or 8");
    q->add_option("--strategy", q_strategy, "AnchorSkip|AllQuant");
    q->add_option("--out", q_out, "output checkpoint path")->required();

    // inspect
    auto* i = app.add_subcommand("inspect", "plan, storage and redundancy reports");
    std::string i_model, i_corpus, i_simout;
    i->add_option("--model", i_model, "checkpoint")->required();
    i->add_option("--corpus", i_corpus, "corpus for the similarity report");
    i->add_option("--similarity-out", i_simout, "write the similarity table to this file");

    CLI11_PARSE(app, argc, argv);

    try {
        if (t->parsed())
            return cmd_train_teacher(t_config, t_corpus, t_out, t_seed, t_seed_opt->count() > 0);
        if (c->parsed()) return cmd_compress(c_teacher, c_plan, c_rank, c_init, c_out, c_calib, c_seed);
        if (d->parsed()) {
            const bool pmr = d_p0->count() || d_cs->count() || d_g->count() || d_x->count();
            return cmd_delta_tune(d_teacher, d_student, d_corpus, d_out, d_report, f, pmr);
        }
        if (e->parsed()) return cmd_eval(e_model, e_corpus, e_split, e_seq_len, e_max_tokens);
        if (q->parsed()) return cmd_quantize(q_model, q_bits, q_strategy, q_out);
        if (i->parsed()) return cmd_inspect(i_model, i_corpus, i_simout);
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
    return 0;
}
