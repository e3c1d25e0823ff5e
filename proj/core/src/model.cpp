#include "deltacomp/model.hpp"

#include <array>
#include <cmath>

namespace deltac {

void ModelConfig::validate() const {
    if (n_layers < 0) throw ValueError("config: n_layers must be >= 0");
    if (d_model < 1 || n_heads < 1 || d_ffn < 1 || vocab_size < 1 || max_seq_len < 1)
        throw ValueError("config: all sizes must be >= 1");
    if (d_model % n_heads != 0)
        throw ValueError("config: d_model " + std::to_string(d_model) +
                         " not divisible by n_heads " + std::to_string(n_heads));
    if (head_dim() % 2 != 0)
        throw ValueError("config: head dimension must be even for rotary positions");
    if (rms_eps <= 0.0) throw ValueError("config: rms_eps must be positive");
}

const char* sublayer_name(Sublayer s) { return s == Sublayer::attention ? "attention" : "mlp"; }

const char* role_name(Role r) {
    switch (r) {
        case Role::q: return "q";
        case Role::k: return "k";
        case Role::v: return "v";
        case Role::o: return "o";
        case Role::gate: return "gate";
        case Role::up: return "up";
        case Role::down: return "down";
    }
    return "?";
}

bool role_in_sublayer(Role r, Sublayer s) {
    const bool attn = r == Role::q || r == Role::k || r == Role::v || r == Role::o;
    return attn == (s == Sublayer::attention);
}

std::vector<Role> roles_of(Sublayer s) {
    if (s == Sublayer::attention) return {Role::q, Role::k, Role::v, Role::o};
    return {Role::gate, Role::up, Role::down};
}

std::string WeightSite::str() const {
    return std::to_string(block) + "." + sublayer_name(sublayer) + "." + role_name(role);
}

WeightSite WeightSite::parse(std::string_view s) {
    const auto d1 = s.find('.');
    const auto d2 = s.find('.', d1 == std::string_view::npos ? d1 : d1 + 1);
    if (d1 == std::string_view::npos || d2 == std::string_view::npos)
        throw ValueError("bad weight site '" + std::string(s) + "' (expected block.sublayer.role)");
    WeightSite site;
    site.block = std::stoi(std::string(s.substr(0, d1)));
    const auto sub = s.substr(d1 + 1, d2 - d1 - 1);
    if (sub == "attention") site.sublayer = Sublayer::attention;
    else if (sub == "mlp") site.sublayer = Sublayer::mlp;
    else throw ValueError("bad sublayer '" + std::string(sub) + "' in site '" + std::string(s) + "'");
    const auto role = s.substr(d2 + 1);
    const Role all[] = {Role::q, Role::k, Role::v, Role::o, Role::gate, Role::up, Role::down};
    bool found = false;
    for (Role r : all)
        if (role == role_name(r)) { site.role = r; found = true; break; }
    if (!found) throw ValueError("bad role '" + std::string(role) + "' in site '" + std::string(s) + "'");
    if (!role_in_sublayer(site.role, site.sublayer))
        throw ValueError("role '" + std::string(role) + "' does not belong to sublayer '" +
                         std::string(sub) + "'");
    return site;
}

std::vector<int> WeightSite::matrix_shape(const ModelConfig& cfg) const {
    if (block < 0 || block >= cfg.n_layers)
        throw ValueError("site " + str() + ": block out of range for " +
                         std::to_string(cfg.n_layers) + " layers");
    switch (role) {
        case Role::q:
        case Role::k:
        case Role::v:
        case Role::o: return {cfg.d_model, cfg.d_model};
        case Role::gate:
        case Role::up: return {cfg.d_model, cfg.d_ffn};
        case Role::down: return {cfg.d_ffn, cfg.d_model};
    }
    return {};
}

std::vector<WeightSite> all_sites(const ModelConfig& cfg) {
    std::vector<WeightSite> sites;
    for (int l = 0; l < cfg.n_layers; ++l)
        for (Sublayer s : {Sublayer::attention, Sublayer::mlp})
            for (Role r : roles_of(s)) sites.push_back({l, s, r});
    return sites;
}

const Tensor& Model::weight(const WeightSite& site) const {
    auto it = weights.find(site);
    if (it == weights.end()) throw ValueError("model has no weight at site " + site.str());
    return it->second;
}

void Model::set_requires_grad(bool v) {
    for (Tensor& t : parameters()) t.set_requires_grad(v);
}

std::vector<Tensor> Model::parameters() const {
    std::vector<Tensor> ps;
    ps.push_back(embedding);
    for (const auto& [site, w] : weights) ps.push_back(w);
    for (const auto& t : attn_norm) ps.push_back(t);
    for (const auto& t : mlp_norm) ps.push_back(t);
    ps.push_back(final_norm);
    ps.push_back(output_proj);
    return ps;
}

Model init_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const double init_std = 0.02;
    // residual-feeding projections get the usual depth-scaled std
    const double resid_std =
        cfg.n_layers > 0 ? init_std / std::sqrt(2.0 * cfg.n_layers) : init_std;

    Model m;
    m.config = cfg;
    m.config.seed = seed;
    m.embedding = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, init_std);
    for (const WeightSite& site : all_sites(cfg)) {
        const bool residual = site.role == Role::o || site.role == Role::down;
        m.weights.emplace(site,
                          Tensor::randn(site.matrix_shape(cfg), rng, residual ? resid_std : init_std));
    }
    for (int l = 0; l < cfg.n_layers; ++l) {
        m.attn_norm.push_back(Tensor::full({cfg.d_model}, 1.0));
        m.mlp_norm.push_back(Tensor::full({cfg.d_model}, 1.0));
    }
    m.final_norm = Tensor::full({cfg.d_model}, 1.0);
    m.output_proj = Tensor::randn({cfg.d_model, cfg.vocab_size}, rng, init_std);
    return m;
}

Model init_model(const ModelConfig& cfg) { return init_model(cfg, cfg.seed); }

int64_t count_params(const ModelConfig& cfg) {
    const int64_t d = cfg.d_model, f = cfg.d_ffn, v = cfg.vocab_size;
    const int64_t per_block = 4 * d * d + 3 * d * f + 2 * d; // matrices + two norm gains
    return v * d + cfg.n_layers * per_block + d + d * v;
}

int64_t count_params(const Model& m) {
    int64_t n = 0;
    for (const Tensor& t : m.parameters()) n += t.numel();
    return n;
}

ForwardParams ForwardParams::of(const Model& m) {
    ForwardParams p;
    p.config = &m.config;
    p.embedding = m.embedding;
    p.attn_norm = m.attn_norm;
    p.mlp_norm = m.mlp_norm;
    p.final_norm = m.final_norm;
    p.output_proj = m.output_proj;
    p.resolve = [&m](const WeightSite& site) { return m.weight(site); };
    return p;
}

namespace {

void copy_rows_out(const Tensor& t, std::vector<double>& dst) {
    dst.assign(t.values().begin(), t.values().end());
}

void tap_site_input(ActivationTap* tap, int block, Sublayer sub, const Tensor& input,
                    std::span<const Role> roles) {
    if (!tap) return;
    const int width = input.cols();
    for (Role r : roles) {
        WeightSite site{block, sub, r};
        if (!tap->sites.count(site)) continue;
        int& have = tap->n_rows[site];
        const int want = std::min<int>(tap->max_rows - have, input.rows());
        if (want <= 0) continue;
        auto& dst = tap->rows[site];
        dst.insert(dst.end(), input.values().begin(),
                   input.values().begin() + static_cast<size_t>(want) * width);
        have += want;
    }
}

} // namespace

Tensor transformer_forward(const ForwardParams& p, std::span<const int> tokens, int batch,
                           int seq_len, StreamTrace* trace, ActivationTap* tap) {
    const ModelConfig& cfg = *p.config;
    if (batch < 1 || seq_len < 1) throw ValueError("forward: batch and seq_len must be >= 1");
    if (seq_len > cfg.max_seq_len)
        throw ValueError("forward: sequence length " + std::to_string(seq_len) +
                         " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    if (static_cast<int64_t>(tokens.size()) != static_cast<int64_t>(batch) * seq_len)
        throw DimensionError("forward: got " + std::to_string(tokens.size()) + " ids for batch " +
                             std::to_string(batch) + " x " + std::to_string(seq_len));
    for (int id : tokens)
        if (id < 0 || id >= cfg.vocab_size)
            throw ValueError("forward: token id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(cfg.vocab_size) + ")");

    const int heads = cfg.n_heads;
    const double rope_theta = 10000.0;

    if (trace) {
        trace->attn_in.resize(cfg.n_layers);
        trace->attn_out.resize(cfg.n_layers);
        trace->mlp_in.resize(cfg.n_layers);
        trace->mlp_out.resize(cfg.n_layers);
    }

    Tensor x = embedding_lookup(p.embedding, tokens); // [B*T, d]

    for (int l = 0; l < cfg.n_layers; ++l) {
        // attention sublayer
        if (trace) copy_rows_out(x, trace->attn_in[l]);
        Tensor h = rms_norm(x, p.attn_norm[l], cfg.rms_eps);
        tap_site_input(tap, l, Sublayer::attention, h, std::array{Role::q, Role::k, Role::v});
        Tensor q = matmul(h, p.resolve({l, Sublayer::attention, Role::q}));
        Tensor k = matmul(h, p.resolve({l, Sublayer::attention, Role::k}));
        Tensor v = matmul(h, p.resolve({l, Sublayer::attention, Role::v}));
        Tensor attn_cat = causal_attention(q, k, v, batch, seq_len, heads, rope_theta);
        tap_site_input(tap, l, Sublayer::attention, attn_cat, std::array{Role::o});
        Tensor attn_out = matmul(attn_cat, p.resolve({l, Sublayer::attention, Role::o}));
        x = add(x, attn_out);
        if (trace) copy_rows_out(x, trace->attn_out[l]);

        // mlp sublayer
        if (trace) copy_rows_out(x, trace->mlp_in[l]);
        Tensor h2 = rms_norm(x, p.mlp_norm[l], cfg.rms_eps);
        tap_site_input(tap, l, Sublayer::mlp, h2, std::array{Role::gate, Role::up});
        Tensor g = silu(matmul(h2, p.resolve({l, Sublayer::mlp, Role::gate})));
        Tensor u = matmul(h2, p.resolve({l, Sublayer::mlp, Role::up}));
        Tensor gated = mul(g, u);
        tap_site_input(tap, l, Sublayer::mlp, gated, std::array{Role::down});
        Tensor mlp_out = matmul(gated, p.resolve({l, Sublayer::mlp, Role::down}));
        x = add(x, mlp_out);
        if (trace) copy_rows_out(x, trace->mlp_out[l]);
    }

    Tensor out = rms_norm(x, p.final_norm, cfg.rms_eps);
    Tensor logits = matmul(out, p.output_proj);
    return reshape(logits, {batch, seq_len, cfg.vocab_size});
}

Tensor forward(const Model& m, std::span<const int> tokens, int batch, int seq_len) {
    return transformer_forward(ForwardParams::of(m), tokens, batch, seq_len);
}

SequenceScore score_sequence(const ForwardParams& p, std::span<const int> tokens) {
    if (tokens.size() < 2) throw ValueError("score_sequence: need at least 2 tokens");
    NoGradGuard ng;
    const int t = static_cast<int>(tokens.size());
    Tensor logits = transformer_forward(p, tokens, 1, t);
    const int v = p.config->vocab_size;
    SequenceScore s;
    for (int i = 0; i + 1 < t; ++i) {
        const double* li = logits.values().data() + static_cast<size_t>(i) * v;
        double mx = li[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, li[j]);
        double z = 0.0;
        for (int j = 0; j < v; ++j) z += std::exp(li[j] - mx);
        s.total_log_likelihood += li[tokens[static_cast<size_t>(i) + 1]] - mx - std::log(z);
        s.token_count += 1;
    }
    return s;
}

SequenceScore score_sequence(const Model& m, std::span<const int> tokens) {
    return score_sequence(ForwardParams::of(m), tokens);
}

EvalStats evaluate_perplexity(const ForwardParams& p, std::span<const int> tokens, int seq_len,
                              int batch, int64_t max_tokens) {
    if (seq_len < 2) throw ValueError("evaluate_perplexity: seq_len must be >= 2");
    NoGradGuard ng;
    const int v = p.config->vocab_size;
    const int64_t n_windows = static_cast<int64_t>(tokens.size()) / seq_len;
    if (n_windows == 0) throw ValueError("evaluate_perplexity: token stream shorter than seq_len");

    double total_nll = 0.0;
    int64_t scored = 0;
    for (int64_t w0 = 0; w0 < n_windows && (max_tokens == 0 || scored < max_tokens); w0 += batch) {
        const int nb = static_cast<int>(std::min<int64_t>(batch, n_windows - w0));
        std::span<const int> ids(tokens.data() + w0 * seq_len,
                                 static_cast<size_t>(nb) * seq_len);
        Tensor logits = transformer_forward(p, ids, nb, seq_len);
        for (int b = 0; b < nb; ++b) {
            for (int i = 0; i + 1 < seq_len; ++i) {
                const size_t row = static_cast<size_t>(b) * seq_len + i;
                const double* li = logits.values().data() + row * v;
                double mx = li[0];
                for (int j = 1; j < v; ++j) mx = std::max(mx, li[j]);
                double z = 0.0;
                for (int j = 0; j < v; ++j) z += std::exp(li[j] - mx);
                total_nll -= li[ids[row + 1]] - mx - std::log(z);
                ++scored;
            }
        }
    }
    EvalStats st;
    st.token_count = scored;
    st.mean_nll = total_nll / static_cast<double>(scored);
    st.perplexity = std::exp(st.mean_nll);
    return st;
}

} // namespace deltac
