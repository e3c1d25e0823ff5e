#pragma once

#include "deltacomp/delta.hpp"
#include "deltacomp/model.hpp"

namespace deltac {

enum class SublayerKind : uint8_t { mlp, attention, both };
const char* sublayer_kind_name(SublayerKind k);
SublayerKind parse_sublayer_kind(std::string_view s);

// Residual-stream redundancy scores: mean cosine similarity between a
// sublayer's input hidden state and its output hidden state (after the
// residual add). Higher means the sublayer changes the stream less.
struct ImportanceEntry {
    int block = 0;
    Sublayer sublayer = Sublayer::attention;
    double score = 0.0;
    int64_t n_positions = 0;
};

struct ImportanceReport {
    std::vector<ImportanceEntry> entries;
    std::string corpus_id;

    const ImportanceEntry* find(int block, Sublayer s) const;
    std::string to_table() const; // "site score n" rows, one per entry
    static ImportanceReport from_table(std::string_view text);
};

// Batched token sample for similarity probing. Drawn deterministically from
// a corpus split with the given seed.
struct CorpusSample {
    std::vector<int> tokens; // batches * seq_len ids
    int batches = 0;
    int seq_len = 0;
    std::string corpus_id;
};
CorpusSample draw_sample(const Corpus& corpus, Split split, int positions, int seq_len,
                         uint64_t seed);

ImportanceReport layer_similarity(const Model& model, const CorpusSample& sample,
                                  SublayerKind kind);

// Plan construction strategies over the eligible (non-protected) blocks:
//   sequential:  the latest k eligible blocks, all anchored on the block
//                just before them
//   alternating: (anchor, delta) pairs packed into the latest eligible
//                region, each delta anchored on its immediate predecessor
//   similarity:  the k highest-scoring eligible sites from `importance`,
//                each anchored on the nearest earlier non-delta block
// For sequential/alternating, k counts delta blocks (kind `both` tags both
// sublayers of each, so sites = 2k). For similarity, k counts sites.
SharingPlan build_plan(const ModelConfig& cfg, PlanStrategy strategy, SublayerKind kind, int k,
                       const ImportanceReport* importance = nullptr,
                       const std::set<int>* protected_override = nullptr);

} // namespace deltac
