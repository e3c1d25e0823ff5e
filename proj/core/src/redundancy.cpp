#include "deltacomp/redundancy.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace deltac {

const char* sublayer_kind_name(SublayerKind k) {
    switch (k) {
        case SublayerKind::mlp: return "mlp";
        case SublayerKind::attention: return "attention";
        case SublayerKind::both: return "both";
    }
    return "?";
}

SublayerKind parse_sublayer_kind(std::string_view s) {
    if (s == "mlp") return SublayerKind::mlp;
    if (s == "attention") return SublayerKind::attention;
    if (s == "both") return SublayerKind::both;
    throw ValueError("unknown sublayer kind '" + std::string(s) + "' (expected mlp|attention|both)");
}

const ImportanceEntry* ImportanceReport::find(int block, Sublayer s) const {
    for (const auto& e : entries)
        if (e.block == block && e.sublayer == s) return &e;
    return nullptr;
}

std::string ImportanceReport::to_table() const {
    std::ostringstream os;
    os << "# site similarity n_positions\n";
    for (const auto& e : entries) {
        os << e.block << "." << sublayer_name(e.sublayer) << " ";
        os.precision(12);
        os << e.score << " " << e.n_positions << "\n";
    }
    return os.str();
}

ImportanceReport ImportanceReport::from_table(std::string_view text) {
    ImportanceReport rep;
    std::istringstream is{std::string(text)};
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string site;
        ImportanceEntry e;
        if (!(ls >> site >> e.score >> e.n_positions))
            throw ValueError("bad importance table line: '" + line + "'");
        const auto dot = site.find('.');
        if (dot == std::string::npos) throw ValueError("bad site in importance table: " + site);
        e.block = std::stoi(site.substr(0, dot));
        const std::string sub = site.substr(dot + 1);
        if (sub == "attention") e.sublayer = Sublayer::attention;
        else if (sub == "mlp") e.sublayer = Sublayer::mlp;
        else throw ValueError("bad sublayer in importance table: " + site);
        rep.entries.push_back(e);
    }
    return rep;
}

CorpusSample draw_sample(const Corpus& corpus, Split split, int positions, int seq_len,
                         uint64_t seed) {
    const auto toks = corpus.split(split);
    if (toks.empty()) throw ValueError("draw_sample: empty corpus split");
    CorpusSample s;
    s.corpus_id = corpus.id;
    s.seq_len = std::min<int>(seq_len, static_cast<int>(toks.size()));
    s.batches = std::max(1, (positions + s.seq_len - 1) / s.seq_len);
    Rng rng(seed ^ 0x5a3f1e2dull);
    s.tokens.resize(static_cast<size_t>(s.batches) * s.seq_len);
    for (int b = 0; b < s.batches; ++b) {
        const size_t start = toks.size() > static_cast<size_t>(s.seq_len)
                                 ? rng.uniform_int(toks.size() - s.seq_len)
                                 : 0;
        std::copy_n(toks.data() + start, s.seq_len,
                    s.tokens.data() + static_cast<size_t>(b) * s.seq_len);
    }
    return s;
}

namespace {

double mean_row_cosine(const std::vector<double>& xin, const std::vector<double>& xout, int d) {
    const size_t rows = xin.size() / static_cast<size_t>(d);
    double acc = 0.0;
    for (size_t r = 0; r < rows; ++r) {
        const double* a = xin.data() + r * d;
        const double* b = xout.data() + r * d;
        double ab = 0.0, aa = 0.0, bb = 0.0;
        for (int j = 0; j < d; ++j) {
            ab += a[j] * b[j];
            aa += a[j] * a[j];
            bb += b[j] * b[j];
        }
        const double denom = std::sqrt(aa) * std::sqrt(bb);
        acc += denom > 0.0 ? ab / denom : 1.0; // zero vectors: unchanged stream
    }
    return acc / static_cast<double>(rows);
}

} // namespace

ImportanceReport layer_similarity(const Model& model, const CorpusSample& sample,
                                  SublayerKind kind) {
    if (sample.tokens.empty()) throw ValueError("layer_similarity: empty sample");
    NoGradGuard ng;
    StreamTrace trace;
    transformer_forward(ForwardParams::of(model), sample.tokens, sample.batches, sample.seq_len,
                        &trace);

    const int d = model.config.d_model;
    const int64_t n_pos = static_cast<int64_t>(sample.batches) * sample.seq_len;
    ImportanceReport rep;
    rep.corpus_id = sample.corpus_id;
    for (int l = 0; l < model.config.n_layers; ++l) {
        if (kind != SublayerKind::mlp) {
            ImportanceEntry e{l, Sublayer::attention,
                              mean_row_cosine(trace.attn_in[l], trace.attn_out[l], d), n_pos};
            rep.entries.push_back(e);
        }
        if (kind != SublayerKind::attention) {
            ImportanceEntry e{l, Sublayer::mlp,
                              mean_row_cosine(trace.mlp_in[l], trace.mlp_out[l], d), n_pos};
            rep.entries.push_back(e);
        }
    }
    return rep;
}

namespace {

void add_block_entries(SharingPlan& plan, SublayerKind kind, int target_block, int anchor_block) {
    auto add = [&](Sublayer s) {
        for (Role r : roles_of(s))
            plan.entries.push_back({{target_block, s, r}, {anchor_block, s, r}});
    };
    if (kind != SublayerKind::attention) add(Sublayer::mlp);
    if (kind != SublayerKind::mlp) add(Sublayer::attention);
}

std::vector<int> eligible_blocks(const ModelConfig& cfg, const std::set<int>& prot) {
    std::vector<int> blocks;
    for (int b = 0; b < cfg.n_layers; ++b)
        if (!prot.count(b)) blocks.push_back(b);
    return blocks;
}

} // namespace

SharingPlan build_plan(const ModelConfig& cfg, PlanStrategy strategy, SublayerKind kind, int k,
                       const ImportanceReport* importance,
                       const std::set<int>* protected_override) {
    cfg.validate();
    if (k < 0) throw ValueError("build_plan: k must be >= 0");

    SharingPlan plan;
    plan.strategy = strategy;
    plan.protected_blocks =
        protected_override ? *protected_override : SharingPlan::default_protected(cfg.n_layers);
    if (k == 0) {
        plan.validate(cfg);
        return plan;
    }

    const std::vector<int> eligible = eligible_blocks(cfg, plan.protected_blocks);

    switch (strategy) {
        case PlanStrategy::sequential: {
            // latest k eligible blocks become deltas; the block right before
            // the first of them is the single shared anchor
            if (k + 1 > static_cast<int>(eligible.size()))
                throw ValueError("build_plan: k=" + std::to_string(k) + " too large, only " +
                                 std::to_string(eligible.size()) + " eligible blocks");
            std::vector<int> chosen(eligible.end() - k, eligible.end());
            const int anchor = chosen.front() - 1;
            if (anchor < 0 || plan.protected_blocks.count(anchor))
                throw ValueError("build_plan: no eligible anchor before block " +
                                 std::to_string(chosen.front()));
            for (int b : chosen) add_block_entries(plan, kind, b, anchor);
            break;
        }
        case PlanStrategy::alternating: {
            // (anchor, delta) adjacent pairs, packed from the deep end
            std::vector<std::pair<int, int>> pairs; // anchor, target
            int i = static_cast<int>(eligible.size()) - 1;
            while (i >= 1 && static_cast<int>(pairs.size()) < k) {
                if (eligible[static_cast<size_t>(i)] == eligible[static_cast<size_t>(i) - 1] + 1) {
                    pairs.push_back({eligible[static_cast<size_t>(i) - 1],
                                     eligible[static_cast<size_t>(i)]});
                    i -= 2;
                } else {
                    i -= 1;
                }
            }
            if (static_cast<int>(pairs.size()) < k)
                throw ValueError("build_plan: k=" + std::to_string(k) +
                                 " alternating pairs do not fit in the eligible region");
            std::sort(pairs.begin(), pairs.end());
            for (const auto& [anchor, target] : pairs) add_block_entries(plan, kind, target, anchor);
            break;
        }
        case PlanStrategy::similarity: {
            if (!importance)
                throw ValueError("build_plan: similarity strategy requires an importance report");
            // candidates restricted to eligible blocks and the requested kind
            std::vector<ImportanceEntry> cand;
            for (const auto& e : importance->entries) {
                if (plan.protected_blocks.count(e.block)) continue;
                if (kind == SublayerKind::mlp && e.sublayer != Sublayer::mlp) continue;
                if (kind == SublayerKind::attention && e.sublayer != Sublayer::attention) continue;
                cand.push_back(e);
            }
            // highest similarity first; ties broken by lower block index,
            // then attention before mlp, making the pick order-independent
            std::stable_sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
                if (a.score != b.score) return a.score > b.score;
                if (a.block != b.block) return a.block < b.block;
                return static_cast<int>(a.sublayer) < static_cast<int>(b.sublayer);
            });
            if (k > static_cast<int>(cand.size()))
                throw ValueError("build_plan: k=" + std::to_string(k) + " exceeds " +
                                 std::to_string(cand.size()) + " eligible sites");

            // nearest earlier non-delta, non-protected block of the same sublayer
            auto find_anchor = [&](const std::set<std::pair<int, uint8_t>>& chosen, int block,
                                   uint8_t sub_raw) {
                for (int b = block - 1; b >= 0; --b) {
                    if (plan.protected_blocks.count(b)) continue;
                    if (chosen.count({b, sub_raw})) continue;
                    return b;
                }
                return -1;
            };
            auto all_anchored = [&](const std::set<std::pair<int, uint8_t>>& chosen) {
                for (const auto& [b, s] : chosen)
                    if (find_anchor(chosen, b, s) < 0) return false;
                return true;
            };

            // greedy by score; a candidate that would leave any chosen site
            // without an anchor is skipped
            std::set<std::pair<int, uint8_t>> chosen;
            for (const auto& c : cand) {
                if (static_cast<int>(chosen.size()) == k) break;
                const std::pair<int, uint8_t> key{c.block, static_cast<uint8_t>(c.sublayer)};
                chosen.insert(key);
                if (!all_anchored(chosen)) chosen.erase(key);
            }
            if (static_cast<int>(chosen.size()) < k)
                throw ValueError("build_plan: k=" + std::to_string(k) +
                                 " anchored sites do not fit the eligible region");

            for (const auto& [block, sub_raw] : chosen) {
                const Sublayer sub = static_cast<Sublayer>(sub_raw);
                const int anchor = find_anchor(chosen, block, sub_raw);
                for (Role r : roles_of(sub))
                    plan.entries.push_back({{block, sub, r}, {anchor, sub, r}});
            }
            break;
        }
        case PlanStrategy::explicit_plan:
            throw ValueError("build_plan: explicit plans are assembled from entries, not built");
    }

    std::sort(plan.entries.begin(), plan.entries.end(), [](const PlanEntry& a, const PlanEntry& b) {
        return a.target < b.target;
    });
    plan.validate(cfg);
    return plan;
}

} // namespace deltac
