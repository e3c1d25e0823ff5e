#include "deltacomp/pmr.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include <json.hpp>

namespace deltac {

double replacement_probability(const ReplacementScheduler& sched, int64_t step,
                               int site_depth_rank, int n_sites) {
    if (step < 0) throw ValueError("replacement_probability: step must be >= 0");
    if (sched.converge_step < 1) throw ValueError("replacement_probability: converge_step must be >= 1");
    if (sched.p0 < 0.0 || sched.p0 > 1.0) throw ValueError("replacement_probability: p0 must be in [0, 1]");
    if (sched.depth_bias < 0.0) throw ValueError("replacement_probability: depth bias must be >= 0");
    const double base =
        std::min(1.0, sched.p0 + (1.0 - sched.p0) * static_cast<double>(step) /
                                     static_cast<double>(sched.converge_step));
    const double bias =
        1.0 + sched.depth_bias * static_cast<double>(site_depth_rank) /
                  static_cast<double>(std::max(1, n_sites - 1));
    return std::min(1.0, base * bias);
}

std::vector<uint8_t> sample_replacement_mask(const ReplacementScheduler& sched, int64_t step,
                                             int n_sites, Rng& rng) {
    std::vector<uint8_t> mask(static_cast<size_t>(n_sites));
    for (int i = 0; i < n_sites; ++i)
        mask[static_cast<size_t>(i)] =
            rng.bernoulli(replacement_probability(sched, step, i, n_sites)) ? 1 : 0;
    return mask;
}

const char* train_mode_name(TrainMode m) { return m == TrainMode::delta_only ? "delta_only" : "joint"; }

TrainMode parse_train_mode(std::string_view s) {
    if (s == "delta_only") return TrainMode::delta_only;
    if (s == "joint") return TrainMode::joint;
    throw ValueError("unknown train mode '" + std::string(s) + "' (expected delta_only|joint)");
}

void TrainConfig::validate() const {
    if (alpha < 0.0 || alpha > 1.0) throw ValueError("train: alpha must be in [0, 1]");
    if (lr <= 0.0) throw ValueError("train: lr must be positive");
    if (epochs < 0) throw ValueError("train: epochs must be >= 0");
    if (batch_size < 1 || seq_len < 2) throw ValueError("train: batch_size >= 1 and seq_len >= 2 required");
    if (lora_dropout < 0.0 || lora_dropout >= 1.0) throw ValueError("train: lora_dropout must be in [0, 1)");
    if (adapter_rank < 1) throw ValueError("train: adapter_rank must be >= 1");
}

namespace {

using ModuleSite = std::pair<int, Sublayer>;

int module_index(const std::vector<ModuleSite>& sites, int block, Sublayer s) {
    for (size_t i = 0; i < sites.size(); ++i)
        if (sites[i].first == block && sites[i].second == s) return static_cast<int>(i);
    return -1;
}

struct HybridContext {
    const Model* teacher = nullptr;
    const CompressedModel* student = nullptr;
    const std::vector<uint8_t>* mask = nullptr;
    std::vector<ModuleSite> sites;
    // training-only extras
    const std::map<WeightSite, DeltaModule>* adapters = nullptr;
    double dropout_p = 0.0;
    Rng* dropout_rng = nullptr;

    Tensor delta_contribution(const DeltaModule& d) const {
        Tensor eff = d.effective();
        if (dropout_p > 0.0 && dropout_rng) eff = dropout(eff, dropout_p, *dropout_rng);
        return eff;
    }

    Tensor resolve(const WeightSite& site) const {
        const int idx = module_index(sites, site.block, site.sublayer);
        const bool is_target = student->deltas.count(site) != 0;
        if (is_target) {
            if (idx < 0 || !(*mask)[static_cast<size_t>(idx)])
                return teacher->weight(site); // teacher path
            // student path: anchor (+ adapter in joint mode) + delta
            const PlanEntry* entry = nullptr;
            for (const auto& e : student->plan.entries)
                if (e.target == site) { entry = &e; break; }
            Tensor anchor = resolve_retained(entry->anchor);
            return add(anchor, delta_contribution(student->deltas.at(site)));
        }
        return resolve_retained(site);
    }

    Tensor resolve_retained(const WeightSite& site) const {
        Tensor w = student->base.at(site).materialize();
        if (adapters) {
            auto it = adapters->find(site);
            if (it != adapters->end()) return add(w, delta_contribution(it->second));
        }
        return w;
    }

    ForwardParams params() const {
        ForwardParams p;
        p.config = &student->config;
        p.embedding = student->embedding;
        p.attn_norm = student->attn_norm;
        p.mlp_norm = student->mlp_norm;
        p.final_norm = student->final_norm;
        p.output_proj = student->output_proj;
        p.resolve = [this](const WeightSite& site) { return resolve(site); };
        return p;
    }
};

} // namespace

Tensor hybrid_forward(const Model& teacher, const CompressedModel& student,
                      const std::vector<uint8_t>& mask, std::span<const int> tokens, int batch,
                      int seq_len) {
    if (!(teacher.config == student.config))
        throw ValueError("hybrid_forward: teacher and student configs differ");
    HybridContext ctx;
    ctx.teacher = &teacher;
    ctx.student = &student;
    ctx.mask = &mask;
    ctx.sites = student.plan.module_sites();
    if (mask.size() != ctx.sites.size())
        throw ValueError("hybrid_forward: mask covers " + std::to_string(mask.size()) +
                         " sites, plan has " + std::to_string(ctx.sites.size()));
    return transformer_forward(ctx.params(), tokens, batch, seq_len);
}

Tensor distill_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                    std::span<const int> targets, double alpha) {
    if (alpha < 0.0 || alpha > 1.0) throw ValueError("distill_loss: alpha must be in [0, 1]");
    if (alpha == 0.0) return softmax_cross_entropy(student_logits, targets);
    Tensor kl = kl_divergence_logits(teacher_logits, student_logits);
    if (alpha == 1.0) return kl;
    Tensor ce = softmax_cross_entropy(student_logits, targets);
    return add(scale(ce, 1.0 - alpha), scale(kl, alpha));
}

// ---- training loops ---------------------------------------------------

namespace {

struct BatchIter {
    std::vector<int64_t> starts; // chunk starts into the train split
    int seq_len = 0;

    static BatchIter make(std::span<const int> train, int seq_len) {
        BatchIter it;
        it.seq_len = seq_len;
        // each chunk needs seq_len inputs plus one lookahead target
        for (int64_t s = 0; s + seq_len < static_cast<int64_t>(train.size()); s += seq_len)
            it.starts.push_back(s);
        if (it.starts.empty())
            throw ValueError("train: corpus split shorter than one sequence");
        return it;
    }
};

void fill_batch(std::span<const int> train, const std::vector<int64_t>& starts, size_t first,
                int nb, int seq_len, std::vector<int>& inputs, std::vector<int>& targets) {
    inputs.resize(static_cast<size_t>(nb) * seq_len);
    targets.resize(static_cast<size_t>(nb) * seq_len);
    for (int b = 0; b < nb; ++b) {
        const int64_t s = starts[first + static_cast<size_t>(b)];
        for (int t = 0; t < seq_len; ++t) {
            inputs[static_cast<size_t>(b) * seq_len + t] = train[static_cast<size_t>(s + t)];
            targets[static_cast<size_t>(b) * seq_len + t] = train[static_cast<size_t>(s + t + 1)];
        }
    }
}

int compute_epochs_to_threshold(const std::vector<EpochRow>& rows) {
    if (rows.empty()) return 0;
    const double bar = rows.back().val_ppl * 1.05;
    for (const auto& r : rows)
        if (r.val_ppl <= bar) return r.epoch;
    return 0;
}

} // namespace

std::string TrainReport::to_json_lines() const {
    std::ostringstream os;
    for (const auto& r : epochs) {
        nlohmann::json j;
        j["epoch"] = r.epoch;
        j["train_loss"] = r.train_loss;
        j["val_ppl"] = r.val_ppl;
        j["replacement_rate"] = r.replacement_rate;
        os << j.dump() << "\n";
    }
    nlohmann::json s;
    s["epochs_to_threshold"] = epochs_to_threshold;
    s["wall_clock_s"] = wall_clock_s;
    s["tokens_processed"] = tokens_processed;
    s["steps"] = steps;
    os << s.dump() << "\n";
    return os.str();
}

TrainReport train(const Model& teacher, CompressedModel& student, const Corpus& corpus,
                  const TrainConfig& cfg, const ReplacementScheduler* sched) {
    cfg.validate();
    if (!(teacher.config == student.config))
        throw ValueError("train: teacher and student configs differ");
    const auto train_split = corpus.split(Split::train);
    const auto val_split = corpus.split(Split::val);
    if (train_split.empty() || val_split.empty()) throw ValueError("train: empty corpus split");

    const auto t0 = std::chrono::steady_clock::now();

    // freeze everything, then enable exactly the trainables
    for (Tensor p : teacher.parameters()) p.set_requires_grad(false);
    for (Tensor p : student.retained_parameters()) p.set_requires_grad(false);
    std::vector<Tensor> trainables = student.delta_parameters();
    for (Tensor p : trainables) p.set_requires_grad(true);

    // joint mode: gaussian low-rank adapters on every retained block weight
    std::map<WeightSite, DeltaModule> adapters;
    if (cfg.mode == TrainMode::joint) {
        Rng arng(cfg.seed ^ 0xada97e25ull);
        const auto targets = student.plan.target_sites();
        for (const WeightSite& site : all_sites(student.config)) {
            if (targets.count(site)) continue;
            const auto shape = site.matrix_shape(student.config);
            const int r = std::min({cfg.adapter_rank, shape[0], shape[1]});
            DeltaInitOptions opt;
            opt.rng = &arng;
            opt.alpha_lora = cfg.alpha_lora;
            DeltaModule ad = init_delta(Tensor::zeros(shape), r, InitMethod::gaussian, opt);
            ad.a.set_requires_grad(true);
            ad.b.set_requires_grad(true);
            trainables.push_back(ad.a);
            trainables.push_back(ad.b);
            adapters.emplace(site, std::move(ad));
        }
    }

    TrainReport report;
    const int total_epochs = cfg.epochs + (sched ? sched->extra_epochs : 0);
    if (total_epochs == 0 || trainables.empty()) {
        report.wall_clock_s = 0.0;
        return report;
    }

    AdamOptimizer opt(trainables);
    Rng batch_rng(cfg.seed * 0x9e3779b97f4a7c15ull + 1);
    Rng mask_rng(cfg.seed ^ 0x6d61736bull);
    Rng dropout_rng(cfg.seed ^ 0x64726f70ull);

    BatchIter iter = BatchIter::make(train_split, cfg.seq_len);
    int64_t chunks_per_epoch = static_cast<int64_t>(iter.starts.size());
    if (cfg.tokens_per_epoch > 0)
        chunks_per_epoch = std::min<int64_t>(
            chunks_per_epoch, std::max<int64_t>(cfg.batch_size, cfg.tokens_per_epoch / cfg.seq_len));
    const int64_t steps_per_epoch = chunks_per_epoch / cfg.batch_size;
    if (steps_per_epoch == 0)
        throw ValueError("train: not enough data for a single batch (batch_size * seq_len too large)");
    const int64_t total_steps = steps_per_epoch * total_epochs;

    HybridContext ctx;
    ctx.teacher = &teacher;
    ctx.student = &student;
    ctx.sites = student.plan.module_sites();
    ctx.adapters = adapters.empty() ? nullptr : &adapters;
    ctx.dropout_p = cfg.lora_dropout;
    ctx.dropout_rng = &dropout_rng;
    const int n_sites = static_cast<int>(ctx.sites.size());
    const std::vector<uint8_t> all_on(static_cast<size_t>(n_sites), 1);

    ForwardParams teacher_params = ForwardParams::of(teacher);

    int64_t step = 0;
    std::vector<int> inputs, targets;
    for (int epoch = 0; epoch < total_epochs; ++epoch) {
        batch_rng.shuffle(iter.starts);
        double loss_sum = 0.0;
        int64_t loss_n = 0;
        for (int64_t bstep = 0; bstep < steps_per_epoch; ++bstep) {
            fill_batch(train_split, iter.starts, static_cast<size_t>(bstep) * cfg.batch_size,
                       cfg.batch_size, cfg.seq_len, inputs, targets);

            std::vector<uint8_t> mask =
                sched ? sample_replacement_mask(*sched, step, n_sites, mask_rng) : all_on;
            ctx.mask = &mask;

            Tensor logits = transformer_forward(ctx.params(), inputs, cfg.batch_size, cfg.seq_len);
            Tensor teacher_logits;
            if (cfg.alpha > 0.0) {
                NoGradGuard ng;
                teacher_logits = transformer_forward(teacher_params, inputs, cfg.batch_size,
                                                     cfg.seq_len);
            }
            Tensor loss = distill_loss(logits, teacher_logits, targets, cfg.alpha);

            const double lr = scheduled_lr(cfg.lr, cfg.lr_schedule, step, total_steps);
            if (!std::isfinite(loss.item()))
                throw ValueError("train: non-finite loss at step " + std::to_string(step) +
                                 " (lr=" + std::to_string(lr) + ")");
            // a mask that replaces no module leaves nothing to train this step
            if (loss.requires_grad()) {
                loss.backward();
                clip_grad_norm(trainables, cfg.grad_clip);
                opt.step(lr);
                opt.zero_grad();
            }

            loss_sum += loss.item();
            ++loss_n;
            ++step;
            report.tokens_processed += static_cast<int64_t>(cfg.batch_size) * cfg.seq_len;
        }

        // epoch-end validation on the student itself (all modules replaced)
        ForwardParams val_params;
        HybridContext val_ctx = ctx;
        std::vector<uint8_t> on = all_on;
        val_ctx.mask = &on;
        val_ctx.dropout_p = 0.0;
        {
            NoGradGuard ng;
            val_params = val_ctx.params();
            EvalStats st = evaluate_perplexity(val_params, val_split, cfg.seq_len, 8, cfg.val_tokens);
            EpochRow row;
            row.epoch = epoch + 1;
            row.train_loss = loss_sum / static_cast<double>(std::max<int64_t>(1, loss_n));
            row.val_ppl = st.perplexity;
            row.replacement_rate =
                sched ? std::min(1.0, sched->p0 + (1.0 - sched->p0) *
                                          static_cast<double>(step - 1) /
                                          static_cast<double>(sched->converge_step))
                      : 1.0;
            report.epochs.push_back(row);
        }
    }
    report.steps = step;

    // fold joint-mode adapters into the stored base weights
    if (!adapters.empty()) {
        NoGradGuard ng;
        for (auto& [site, ad] : adapters) {
            StoredWeight& w = student.base.at(site);
            Tensor merged = add(w.materialize(), ad.effective());
            w.fp = merged.clone();
            w.q.reset();
        }
    }

    report.epochs_to_threshold = compute_epochs_to_threshold(report.epochs);
    report.wall_clock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

TrainReport train_teacher(Model& model, const Corpus& corpus, const TeacherTrainConfig& cfg) {
    if (cfg.epochs < 0) throw ValueError("train_teacher: epochs must be >= 0");
    if (cfg.batch_size < 1 || cfg.seq_len < 2)
        throw ValueError("train_teacher: batch_size >= 1 and seq_len >= 2 required");
    const auto train_split = corpus.split(Split::train);
    const auto val_split = corpus.split(Split::val);
    if (train_split.empty() || val_split.empty()) throw ValueError("train_teacher: empty corpus split");

    const auto t0 = std::chrono::steady_clock::now();
    model.set_requires_grad(true);
    std::vector<Tensor> params = model.parameters();

    TrainReport report;
    if (cfg.epochs == 0) return report;

    AdamOptimizer opt(params);
    Rng batch_rng(cfg.seed * 0x9e3779b97f4a7c15ull + 1);

    BatchIter iter = BatchIter::make(train_split, cfg.seq_len);
    int64_t chunks_per_epoch = static_cast<int64_t>(iter.starts.size());
    if (cfg.tokens_per_epoch > 0)
        chunks_per_epoch = std::min<int64_t>(
            chunks_per_epoch, std::max<int64_t>(cfg.batch_size, cfg.tokens_per_epoch / cfg.seq_len));
    const int64_t steps_per_epoch = chunks_per_epoch / cfg.batch_size;
    if (steps_per_epoch == 0)
        throw ValueError("train_teacher: not enough data for a single batch");
    const int64_t total_steps = steps_per_epoch * cfg.epochs;

    ForwardParams fp = ForwardParams::of(model);
    int64_t step = 0;
    std::vector<int> inputs, targets;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        batch_rng.shuffle(iter.starts);
        double loss_sum = 0.0;
        int64_t loss_n = 0;
        for (int64_t bstep = 0; bstep < steps_per_epoch; ++bstep) {
            fill_batch(train_split, iter.starts, static_cast<size_t>(bstep) * cfg.batch_size,
                       cfg.batch_size, cfg.seq_len, inputs, targets);
            Tensor logits = transformer_forward(fp, inputs, cfg.batch_size, cfg.seq_len);
            Tensor loss = softmax_cross_entropy(logits, targets);
            const double lr = scheduled_lr(cfg.lr, cfg.lr_schedule, step, total_steps);
            if (!std::isfinite(loss.item()))
                throw ValueError("train_teacher: non-finite loss at step " + std::to_string(step) +
                                 " (lr=" + std::to_string(lr) + ")");
            loss.backward();
            clip_grad_norm(params, cfg.grad_clip);
            opt.step(lr);
            opt.zero_grad();
            loss_sum += loss.item();
            ++loss_n;
            ++step;
            report.tokens_processed += static_cast<int64_t>(cfg.batch_size) * cfg.seq_len;
        }
        EvalStats st;
        {
            NoGradGuard ng;
            st = evaluate_perplexity(fp, val_split, cfg.seq_len, 8, cfg.val_tokens);
        }
        EpochRow row;
        row.epoch = epoch + 1;
        row.train_loss = loss_sum / static_cast<double>(std::max<int64_t>(1, loss_n));
        row.val_ppl = st.perplexity;
        row.replacement_rate = 0.0;
        report.epochs.push_back(row);
    }
    report.steps = step;
    report.epochs_to_threshold = compute_epochs_to_threshold(report.epochs);
    report.wall_clock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

} // namespace deltac
