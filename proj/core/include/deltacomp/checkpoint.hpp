#pragma once

#include <optional>
#include <string>

#include "deltacomp/delta.hpp"
#include "deltacomp/redundancy.hpp"

namespace deltac {

// Container layout ("DLLM" format, version 1):
//   bytes 0..3   magic "DLLM"
//   bytes 4..7   version, u32 little-endian
//   bytes 8..15  header length, u64 little-endian
//   then         UTF-8 JSON header
//   then         tensor payload; every blob 64-byte aligned, row-major,
//                little-endian, offsets in the header relative to the
//                (64-byte aligned) payload start
// The header carries the model config, the sharing plan, delta metadata,
// the quantization policy, and a per-tensor table (name, dtype f64|f32|i8|
// u4p, shape, offset, bytes, optional row-scale tensor name).
inline constexpr char kCheckpointMagic[4] = {'D', 'L', 'L', 'M'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
    enum class Kind { io, bad_magic, bad_version, bad_header, truncated, overlap };
    Kind kind;
    CheckpointError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};
const char* checkpoint_error_kind_name(CheckpointError::Kind k);

void save_checkpoint(const Model& m, const std::string& path);
void save_checkpoint(const CompressedModel& m, const std::string& path);

enum class CheckpointKind : uint8_t { model, compressed };

struct LoadedCheckpoint {
    CheckpointKind kind = CheckpointKind::model;
    std::optional<Model> model;
    std::optional<CompressedModel> compressed;
    int64_t file_bytes = 0;
    int64_t payload_bytes = 0; // sum of tensor blob lengths

    const ModelConfig& config() const;
    ForwardParams forward_params() const;
    int64_t stored_param_count() const;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

// Serialized tensor footprint (f32 weights, integer codes + f32 scales).
int64_t storage_bytes(const Model& m);
int64_t storage_bytes(const CompressedModel& m);
int64_t delta_storage_bytes(const CompressedModel& m);

// Plan config files: {"strategy", "sublayer", "k", "rank" | "rank_map",
// "protected_blocks"?}. rank -1 (or "full") selects full rank per site.
struct PlanSpec {
    PlanStrategy strategy = PlanStrategy::sequential;
    SublayerKind sublayer = SublayerKind::mlp;
    int k = 0;
    int rank = -1;
    std::map<std::string, int> rank_map; // site string -> rank
    std::optional<std::set<int>> protected_blocks;
};
PlanSpec parse_plan_spec(const std::string& json_text);
std::map<WeightSite, int> resolve_rank_map(const ModelConfig& cfg, const SharingPlan& plan,
                                           const PlanSpec& spec);

} // namespace deltac
