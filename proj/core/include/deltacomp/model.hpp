#pragma once

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "deltacomp/tensor.hpp"

namespace deltac {

// Decoder-only pre-norm transformer: RMSNorm, causal multi-head attention
// with rotary positions, SiLU-gated MLP, untied output projection.
struct ModelConfig {
    int n_layers = 2;
    int d_model = 64;
    int n_heads = 4;
    int d_ffn = 128;
    int vocab_size = 258;
    int max_seq_len = 256;
    double rms_eps = 1e-8;
    uint64_t seed = 0;

    int head_dim() const { return d_model / n_heads; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

enum class Sublayer : uint8_t { attention, mlp };
enum class Role : uint8_t { q, k, v, o, gate, up, down };

const char* sublayer_name(Sublayer s);
const char* role_name(Role r);
bool role_in_sublayer(Role r, Sublayer s);
std::vector<Role> roles_of(Sublayer s);

// Addresses one weight matrix inside the stack of blocks.
struct WeightSite {
    int block = 0;
    Sublayer sublayer = Sublayer::attention;
    Role role = Role::q;

    auto operator<=>(const WeightSite&) const = default;

    std::string str() const; // "3.mlp.gate"
    static WeightSite parse(std::string_view s);
    // [rows, cols] of the matrix at this site
    std::vector<int> matrix_shape(const ModelConfig& cfg) const;
};

std::vector<WeightSite> all_sites(const ModelConfig& cfg);

struct Model {
    ModelConfig config;
    Tensor embedding;                    // [V, d]
    std::map<WeightSite, Tensor> weights;
    std::vector<Tensor> attn_norm;       // per block, [d]
    std::vector<Tensor> mlp_norm;        // per block, [d]
    Tensor final_norm;                   // [d]
    Tensor output_proj;                  // [d, V]

    const Tensor& weight(const WeightSite& site) const;
    void set_requires_grad(bool v);
    std::vector<Tensor> parameters() const; // deterministic order
};

Model init_model(const ModelConfig& cfg, uint64_t seed);
Model init_model(const ModelConfig& cfg); // uses cfg.seed

// Exact stored-scalar count (embedding + norms + per-block matrices +
// output projection); delta modules are counted elsewhere.
int64_t count_params(const ModelConfig& cfg);
int64_t count_params(const Model& m);

// Residual-stream snapshots taken during a forward pass, one per position:
// the stream right before each sublayer and right after its residual add.
struct StreamTrace {
    // [n_layers][positions * d]; values copied out of the graph
    std::vector<std::vector<double>> attn_in, attn_out, mlp_in, mlp_out;
};

// Collects the inputs that flow into selected weight matrices (for
// activation-based delta initialization). Rows are appended until
// `max_rows` is reached.
struct ActivationTap {
    std::set<WeightSite> sites;
    int max_rows = 4096;
    std::map<WeightSite, std::vector<double>> rows; // row-major, width = site input dim
    std::map<WeightSite, int> n_rows;
};

// Pluggable weight lookup so the same forward path serves the plain model,
// the compressed model, and the hybrid teacher/student mix bit-identically.
struct ForwardParams {
    const ModelConfig* config = nullptr;
    Tensor embedding;
    std::vector<Tensor> attn_norm, mlp_norm;
    Tensor final_norm;
    Tensor output_proj;
    std::function<Tensor(const WeightSite&)> resolve;

    static ForwardParams of(const Model& m);
};

// tokens are B*T ids, row-major; returns [B, T, V] logits.
Tensor transformer_forward(const ForwardParams& p, std::span<const int> tokens, int batch,
                           int seq_len, StreamTrace* trace = nullptr,
                           ActivationTap* tap = nullptr);

Tensor forward(const Model& m, std::span<const int> tokens, int batch, int seq_len);

// Sum of log p(token_t | prefix) over t = 1..T-1, plus the count of scored
// positions. No gradients are recorded.
struct SequenceScore {
    double total_log_likelihood = 0.0;
    int64_t token_count = 0;
};
SequenceScore score_sequence(const ForwardParams& p, std::span<const int> tokens);
SequenceScore score_sequence(const Model& m, std::span<const int> tokens);

// Perplexity over a token stream, evaluated in non-overlapping windows of
// `seq_len`. Stops after at least `max_tokens` positions have been scored
// (0 = the whole stream).
struct EvalStats {
    double perplexity = 0.0;
    double mean_nll = 0.0;
    int64_t token_count = 0;
};
EvalStats evaluate_perplexity(const ForwardParams& p, std::span<const int> tokens, int seq_len,
                              int batch = 8, int64_t max_tokens = 0);

} // namespace deltac
