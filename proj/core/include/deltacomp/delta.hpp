#pragma once

#include <map>
#include <optional>
#include <set>

#include "deltacomp/corpus.hpp"
#include "deltacomp/model.hpp"
#include "deltacomp/quantize.hpp"

namespace deltac {

enum class PlanStrategy : uint8_t { sequential, alternating, similarity, explicit_plan };
enum class InitMethod : uint8_t { gaussian, svd, qr, eva };

const char* plan_strategy_name(PlanStrategy s);
PlanStrategy parse_plan_strategy(std::string_view s);
const char* init_method_name(InitMethod m);
InitMethod parse_init_method(std::string_view s);

struct PlanEntry {
    WeightSite target;
    WeightSite anchor;
};

// Per-matrix mapping from delta sites to the earlier sites whose weights
// they share. Anchors resolve in one hop: no anchor is itself a target.
struct SharingPlan {
    std::vector<PlanEntry> entries;
    std::set<int> protected_blocks;
    PlanStrategy strategy = PlanStrategy::explicit_plan;

    bool empty() const { return entries.empty(); }
    std::set<WeightSite> target_sites() const;
    std::set<WeightSite> anchor_sites() const;
    // Unique (block, sublayer) units carrying deltas, ascending by depth.
    // These are the units the replacement scheduler flips.
    std::vector<std::pair<int, Sublayer>> module_sites() const;

    // Enforces every structural invariant against a concrete config.
    void validate(const ModelConfig& cfg) const;

    // First block plus the last two.
    static std::set<int> default_protected(int n_layers);
};

// Low-rank delta pair: effective delta = scaling * A@B.
struct DeltaModule {
    Tensor a; // [M, r]
    Tensor b; // [r, N]
    int rank = 0;
    double scaling = 1.0;
    InitMethod init = InitMethod::svd;

    Tensor effective() const { return scale(matmul(a, b), scaling); }
    int64_t param_count() const { return a.numel() + b.numel(); }
};

// Base weight storage: full precision, or integer codes after quantization.
struct StoredWeight {
    Tensor fp;
    std::optional<QuantizedTensor> q;

    bool quantized() const { return q.has_value(); }
    Tensor materialize() const { return quantized() ? dequantize(*q) : fp; }
    int64_t param_count() const;
};

// The compressed artifact: anchors and untouched weights keep storage,
// target sites are replaced by delta modules over their anchors.
struct CompressedModel {
    ModelConfig config;
    Tensor embedding;
    std::vector<Tensor> attn_norm, mlp_norm;
    Tensor final_norm;
    Tensor output_proj;
    std::map<WeightSite, StoredWeight> base; // no entries at plan targets
    SharingPlan plan;
    std::map<WeightSite, DeltaModule> deltas;
    std::optional<QuantPolicy> quant;

    int64_t stored_param_count() const; // base + deltas + embedding/norms/projection
    int64_t delta_param_count() const;
    std::vector<Tensor> delta_parameters() const; // A,B in deterministic site order
    std::vector<Tensor> retained_parameters() const; // everything that is not a delta

    // Weight resolution for forward passes. The returned params hold a
    // pointer to *this; keep the model alive and unmoved while in use.
    ForwardParams forward_params() const;
    void validate() const;
};

// delta = target - anchor (Eq. of the sharing construction)
Tensor compute_delta(const Tensor& anchor, const Tensor& target);

// Builds the low-rank pair for one site.
//   gaussian: A ~ N(0, 1/r), B = 0, scaling = alpha_lora / r
//   svd:      A = U_r diag(S_r), B = V_r^T of delta_full
//   qr:       A = Q[:, :r], B = R[:r, :] of delta_full
//   eva:      A = top-r right-singular vectors of `activations` (rows =
//             sampled positions, width = input dim M), B = 0
// gaussian ignores delta_full's values; eva requires `activations`.
struct DeltaInitOptions {
    double alpha_lora = 0.0; // <= 0 means alpha_lora = rank (scaling 1)
    Rng* rng = nullptr;      // required for gaussian
    const Tensor* activations = nullptr; // required for eva
};
DeltaModule init_delta(const Tensor& delta_full, int rank, InitMethod method,
                       const DeltaInitOptions& opt = {});

// Untouched site -> stored weight; target site -> anchor + scaling * A@B,
// differentiable through A and B.
Tensor reconstruct_weight(const CompressedModel& m, const WeightSite& site);

std::map<WeightSite, int> uniform_rank_map(const ModelConfig& cfg, const SharingPlan& plan,
                                           int rank); // rank <= 0 means full rank per site

struct CompressOptions {
    InitMethod method = InitMethod::svd;
    uint64_t seed = 0;       // gaussian init + eva sampling
    double alpha_lora = 0.0; // gaussian scaling knob
    int eva_positions = 4096;
    int eva_seq_len = 64;
};

CompressedModel compress(const Model& teacher, const SharingPlan& plan,
                         const std::map<WeightSite, int>& rank_map, const CompressOptions& opt,
                         const Corpus* calibration = nullptr);

// Wraps a plain model as a CompressedModel with an empty plan.
CompressedModel as_compressed(const Model& m);

// (original - compressed) / original
double compression_ratio(int64_t original_params, int64_t compressed_params);

} // namespace deltac
