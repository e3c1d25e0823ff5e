#include "deltacomp/delta.hpp"

#include <algorithm>
#include <cmath>

#include "deltacomp/linalg.hpp"

namespace deltac {

const char* plan_strategy_name(PlanStrategy s) {
    switch (s) {
        case PlanStrategy::sequential: return "sequential";
        case PlanStrategy::alternating: return "alternating";
        case PlanStrategy::similarity: return "similarity";
        case PlanStrategy::explicit_plan: return "explicit";
    }
    return "?";
}

PlanStrategy parse_plan_strategy(std::string_view s) {
    if (s == "sequential") return PlanStrategy::sequential;
    if (s == "alternating") return PlanStrategy::alternating;
    if (s == "similarity") return PlanStrategy::similarity;
    if (s == "explicit") return PlanStrategy::explicit_plan;
    throw ValueError("unknown plan strategy '" + std::string(s) + "'");
}

const char* init_method_name(InitMethod m) {
    switch (m) {
        case InitMethod::gaussian: return "gaussian";
        case InitMethod::svd: return "svd";
        case InitMethod::qr: return "qr";
        case InitMethod::eva: return "eva";
    }
    return "?";
}

InitMethod parse_init_method(std::string_view s) {
    if (s == "gaussian") return InitMethod::gaussian;
    if (s == "svd") return InitMethod::svd;
    if (s == "qr") return InitMethod::qr;
    if (s == "eva") return InitMethod::eva;
    throw ValueError("unknown init method '" + std::string(s) + "'");
}

std::set<WeightSite> SharingPlan::target_sites() const {
    std::set<WeightSite> s;
    for (const auto& e : entries) s.insert(e.target);
    return s;
}

std::set<WeightSite> SharingPlan::anchor_sites() const {
    std::set<WeightSite> s;
    for (const auto& e : entries) s.insert(e.anchor);
    return s;
}

std::vector<std::pair<int, Sublayer>> SharingPlan::module_sites() const {
    std::set<std::pair<int, uint8_t>> seen;
    for (const auto& e : entries) seen.insert({e.target.block, static_cast<uint8_t>(e.target.sublayer)});
    std::vector<std::pair<int, Sublayer>> out;
    for (const auto& [b, s] : seen) out.push_back({b, static_cast<Sublayer>(s)});
    return out;
}

std::set<int> SharingPlan::default_protected(int n_layers) {
    std::set<int> p;
    if (n_layers > 0) p.insert(0);
    if (n_layers > 1) p.insert(n_layers - 1);
    if (n_layers > 2) p.insert(n_layers - 2);
    return p;
}

void SharingPlan::validate(const ModelConfig& cfg) const {
    std::set<WeightSite> targets;
    for (const auto& e : entries) {
        if (e.target.block >= cfg.n_layers || e.anchor.block >= cfg.n_layers ||
            e.target.block < 0 || e.anchor.block < 0)
            throw ValueError("plan: site block out of range for " + std::to_string(cfg.n_layers) +
                             " layers (entry " + e.target.str() + " <- " + e.anchor.str() + ")");
        if (e.anchor.block >= e.target.block)
            throw ValueError("plan: anchor " + e.anchor.str() + " must lie strictly before target " +
                             e.target.str());
        if (e.target.matrix_shape(cfg) != e.anchor.matrix_shape(cfg))
            throw ValueError("plan: shape mismatch between " + e.target.str() + " and " +
                             e.anchor.str());
        if (!targets.insert(e.target).second)
            throw ValueError("plan: duplicate target " + e.target.str());
        if (protected_blocks.count(e.target.block))
            throw ValueError("plan: target " + e.target.str() + " lies in a protected block");
        if (protected_blocks.count(e.anchor.block))
            throw ValueError("plan: anchor " + e.anchor.str() + " lies in a protected block");
    }
    // one-hop anchors: an anchor may never itself be a target
    for (const auto& e : entries)
        if (targets.count(e.anchor))
            throw ValueError("plan: anchor " + e.anchor.str() +
                             " is also a target (anchors must resolve in one hop)");
}

int64_t StoredWeight::param_count() const {
    if (quantized()) return static_cast<int64_t>(q->rows()) * q->cols();
    return fp.numel();
}

int64_t CompressedModel::stored_param_count() const {
    int64_t n = embedding.numel() + final_norm.numel() + output_proj.numel();
    for (const auto& t : attn_norm) n += t.numel();
    for (const auto& t : mlp_norm) n += t.numel();
    for (const auto& [site, w] : base) n += w.param_count();
    return n + delta_param_count();
}

int64_t CompressedModel::delta_param_count() const {
    int64_t n = 0;
    for (const auto& [site, d] : deltas) n += d.param_count();
    return n;
}

std::vector<Tensor> CompressedModel::delta_parameters() const {
    std::vector<Tensor> ps;
    for (const auto& [site, d] : deltas) {
        ps.push_back(d.a);
        ps.push_back(d.b);
    }
    return ps;
}

std::vector<Tensor> CompressedModel::retained_parameters() const {
    std::vector<Tensor> ps;
    ps.push_back(embedding);
    for (const auto& [site, w] : base)
        if (!w.quantized()) ps.push_back(w.fp);
    for (const auto& t : attn_norm) ps.push_back(t);
    for (const auto& t : mlp_norm) ps.push_back(t);
    ps.push_back(final_norm);
    ps.push_back(output_proj);
    return ps;
}

ForwardParams CompressedModel::forward_params() const {
    ForwardParams p;
    p.config = &config;
    p.embedding = embedding;
    p.attn_norm = attn_norm;
    p.mlp_norm = mlp_norm;
    p.final_norm = final_norm;
    p.output_proj = output_proj;
    p.resolve = [this](const WeightSite& site) { return reconstruct_weight(*this, site); };
    return p;
}

void CompressedModel::validate() const {
    plan.validate(config);
    for (const auto& e : plan.entries) {
        if (base.count(e.target))
            throw ValueError("compressed model stores a weight at target site " + e.target.str());
        if (!deltas.count(e.target))
            throw ValueError("compressed model lacks a delta at target site " + e.target.str());
        if (!base.count(e.anchor))
            throw ValueError("dangling anchor " + e.anchor.str() + " for target " + e.target.str());
    }
    const auto targets = plan.target_sites();
    for (const WeightSite& site : all_sites(config))
        if (!targets.count(site) && !base.count(site))
            throw ValueError("compressed model is missing site " + site.str());
}

Tensor compute_delta(const Tensor& anchor, const Tensor& target) {
    if (anchor.shape() != target.shape())
        throw DimensionError("compute_delta: shape mismatch, " + shape_str(anchor.shape()) +
                             " vs " + shape_str(target.shape()));
    return sub(target, anchor);
}

DeltaModule init_delta(const Tensor& delta_full, int rank, InitMethod method,
                       const DeltaInitOptions& opt) {
    if (delta_full.ndim() != 2)
        throw DimensionError("init_delta: expected 2-D delta, got " + shape_str(delta_full.shape()));
    const int m = delta_full.dim(0), n = delta_full.dim(1);
    if (rank < 1 || rank > std::min(m, n))
        throw ValueError("init_delta: rank " + std::to_string(rank) + " out of range [1, " +
                         std::to_string(std::min(m, n)) + "] for " + shape_str(delta_full.shape()));

    DeltaModule d;
    d.rank = rank;
    d.init = method;
    switch (method) {
        case InitMethod::gaussian: {
            if (!opt.rng) throw ValueError("init_delta: gaussian init needs an rng");
            const double alpha = opt.alpha_lora > 0.0 ? opt.alpha_lora : static_cast<double>(rank);
            d.a = Tensor::randn({m, rank}, *opt.rng, 1.0 / std::sqrt(static_cast<double>(rank)));
            d.b = Tensor::zeros({rank, n});
            d.scaling = alpha / rank;
            break;
        }
        case InitMethod::svd: {
            SvdResult svd = truncated_svd(delta_full, rank);
            Tensor a = Tensor::zeros({m, rank});
            auto& av = a.values_mut();
            for (int i = 0; i < m; ++i)
                for (int r = 0; r < rank; ++r)
                    av[static_cast<size_t>(i) * rank + r] =
                        svd.u.values()[static_cast<size_t>(i) * rank + r] *
                        svd.s.values()[static_cast<size_t>(r)];
            d.a = a;
            d.b = transpose(svd.v);
            d.scaling = 1.0;
            break;
        }
        case InitMethod::qr: {
            QrResult qr = qr_decompose(delta_full);
            Tensor a = Tensor::zeros({m, rank});
            auto& av = a.values_mut();
            const int k = qr.q.dim(1);
            for (int i = 0; i < m; ++i)
                for (int r = 0; r < rank; ++r)
                    av[static_cast<size_t>(i) * rank + r] =
                        qr.q.values()[static_cast<size_t>(i) * k + r];
            Tensor b = Tensor::zeros({rank, n});
            auto& bv = b.values_mut();
            for (int r = 0; r < rank; ++r)
                for (int j = 0; j < n; ++j)
                    bv[static_cast<size_t>(r) * n + j] =
                        qr.r.values()[static_cast<size_t>(r) * n + j];
            d.a = a;
            d.b = b;
            d.scaling = 1.0;
            break;
        }
        case InitMethod::eva: {
            if (!opt.activations)
                throw ValueError("init_delta: eva init needs an activation sample");
            const Tensor& acts = *opt.activations;
            if (acts.ndim() != 2 || acts.dim(1) != m)
                throw DimensionError("init_delta: activation sample " + shape_str(acts.shape()) +
                                     " does not match input dim " + std::to_string(m));
            if (rank > std::min(acts.dim(0), m))
                throw ValueError("init_delta: eva rank " + std::to_string(rank) +
                                 " exceeds activation sample rank bound");
            SvdResult svd = truncated_svd(acts, rank);
            d.a = svd.v; // [m, rank]: principal input directions
            d.b = Tensor::zeros({rank, n});
            d.scaling = 1.0;
            break;
        }
    }
    return d;
}

Tensor reconstruct_weight(const CompressedModel& m, const WeightSite& site) {
    auto bit = m.base.find(site);
    if (bit != m.base.end()) return bit->second.materialize();
    auto dit = m.deltas.find(site);
    if (dit == m.deltas.end()) throw ValueError("unknown site " + site.str());
    const PlanEntry* entry = nullptr;
    for (const auto& e : m.plan.entries)
        if (e.target == site) { entry = &e; break; }
    if (!entry) throw ValueError("site " + site.str() + " has a delta but no plan entry");
    auto ait = m.base.find(entry->anchor);
    if (ait == m.base.end())
        throw ValueError("dangling anchor " + entry->anchor.str() + " for target " + site.str());
    return add(ait->second.materialize(), dit->second.effective());
}

std::map<WeightSite, int> uniform_rank_map(const ModelConfig& cfg, const SharingPlan& plan,
                                           int rank) {
    std::map<WeightSite, int> m;
    for (const auto& e : plan.entries) {
        const auto shape = e.target.matrix_shape(cfg);
        const int full = std::min(shape[0], shape[1]);
        if (rank > full)
            throw ValueError("rank " + std::to_string(rank) + " exceeds min dim " +
                             std::to_string(full) + " at site " + e.target.str());
        m[e.target] = rank <= 0 ? full : rank;
    }
    return m;
}

namespace {

// Deterministically sampled windows from the calibration split, run through
// the teacher to collect per-site matrix inputs.
std::map<WeightSite, Tensor> collect_eva_activations(const Model& teacher,
                                                     const SharingPlan& plan,
                                                     const Corpus& calibration,
                                                     const CompressOptions& opt) {
    NoGradGuard ng;
    ActivationTap tap;
    tap.max_rows = opt.eva_positions;
    tap.sites = plan.target_sites();

    const auto train = calibration.split(Split::train);
    const int seq = std::min<int>({opt.eva_seq_len, teacher.config.max_seq_len,
                                   static_cast<int>(train.size())});
    if (seq < 1) throw ValueError("compress: calibration corpus too small for eva init");
    Rng rng(opt.seed ^ 0xe7a0001ull);
    const int batch = 4;
    const int needed_batches =
        (opt.eva_positions + batch * seq - 1) / (batch * seq);
    for (int i = 0; i < needed_batches; ++i) {
        std::vector<int> ids(static_cast<size_t>(batch) * seq);
        for (int b = 0; b < batch; ++b) {
            const size_t start = train.size() > static_cast<size_t>(seq)
                                     ? rng.uniform_int(train.size() - seq)
                                     : 0;
            std::copy_n(train.data() + start, seq, ids.data() + static_cast<size_t>(b) * seq);
        }
        transformer_forward(ForwardParams::of(teacher), ids, batch, seq, nullptr, &tap);
    }

    std::map<WeightSite, Tensor> out;
    for (const WeightSite& site : tap.sites) {
        const int width = site.matrix_shape(teacher.config)[0];
        const int rows = tap.n_rows[site];
        if (rows < 1) throw ValueError("compress: no activations collected for " + site.str());
        out.emplace(site, Tensor::from_data({rows, width}, std::move(tap.rows[site])));
    }
    return out;
}

} // namespace

CompressedModel compress(const Model& teacher, const SharingPlan& plan,
                         const std::map<WeightSite, int>& rank_map, const CompressOptions& opt,
                         const Corpus* calibration) {
    plan.validate(teacher.config);
    for (const auto& e : plan.entries)
        if (!rank_map.count(e.target))
            throw ValueError("compress: no rank for target site " + e.target.str());
    if (opt.method == InitMethod::eva && !calibration)
        throw ValueError("compress: eva init requires a calibration corpus");

    CompressedModel cm;
    cm.config = teacher.config;
    cm.plan = plan;
    cm.embedding = teacher.embedding.clone();
    for (const auto& t : teacher.attn_norm) cm.attn_norm.push_back(t.clone());
    for (const auto& t : teacher.mlp_norm) cm.mlp_norm.push_back(t.clone());
    cm.final_norm = teacher.final_norm.clone();
    cm.output_proj = teacher.output_proj.clone();

    const auto targets = plan.target_sites();
    for (const WeightSite& site : all_sites(teacher.config))
        if (!targets.count(site)) cm.base.emplace(site, StoredWeight{teacher.weight(site).clone(), {}});

    std::map<WeightSite, Tensor> eva_acts;
    if (opt.method == InitMethod::eva)
        eva_acts = collect_eva_activations(teacher, plan, *calibration, opt);

    Rng gaussian_rng(opt.seed ^ 0x5eed5eedull);
    for (const auto& e : plan.entries) {
        Tensor delta;
        {
            NoGradGuard ng;
            delta = compute_delta(teacher.weight(e.anchor), teacher.weight(e.target));
        }
        DeltaInitOptions dopt;
        dopt.alpha_lora = opt.alpha_lora;
        dopt.rng = &gaussian_rng;
        auto ait = eva_acts.find(e.target);
        if (ait != eva_acts.end()) dopt.activations = &ait->second;
        cm.deltas.emplace(e.target, init_delta(delta, rank_map.at(e.target), opt.method, dopt));
    }
    cm.validate();
    return cm;
}

CompressedModel as_compressed(const Model& m) {
    CompressedModel cm;
    cm.config = m.config;
    cm.embedding = m.embedding;
    cm.attn_norm = m.attn_norm;
    cm.mlp_norm = m.mlp_norm;
    cm.final_norm = m.final_norm;
    cm.output_proj = m.output_proj;
    for (const auto& [site, w] : m.weights) cm.base.emplace(site, StoredWeight{w, {}});
    cm.plan.strategy = PlanStrategy::explicit_plan;
    return cm;
}

double compression_ratio(int64_t original_params, int64_t compressed_params) {
    if (original_params <= 0 || compressed_params <= 0)
        throw ValueError("compression_ratio: parameter counts must be positive");
    if (compressed_params > original_params)
        throw ValueError("compression_ratio: compressed count " + std::to_string(compressed_params) +
                         " exceeds original " + std::to_string(original_params));
    return static_cast<double>(original_params - compressed_params) /
           static_cast<double>(original_params);
}

} // namespace deltac
