#pragma once

#include "deltacomp/corpus.hpp"
#include "deltacomp/delta.hpp"
#include "deltacomp/optim.hpp"

namespace deltac {

// Probability schedule for swapping teacher modules for student (delta)
// modules. The base rate ramps linearly from p0 to 1.0 at converge_step;
// a positive depth bias pushes deeper delta sites toward 1.0 earlier.
struct ReplacementScheduler {
    double p0 = 0.2;
    int64_t converge_step = 100;
    double depth_bias = 0.0; // gamma
    int extra_epochs = 0;    // training continued after the ramp
};

// base(step) = min(1, p0 + (1 - p0) * step / converge_step)
// p = min(1, base * (1 + gamma * depth_rank / max(1, n_sites - 1)))
double replacement_probability(const ReplacementScheduler& sched, int64_t step,
                               int site_depth_rank, int n_sites);

// One independent Bernoulli draw per delta site (ascending depth order).
std::vector<uint8_t> sample_replacement_mask(const ReplacementScheduler& sched, int64_t step,
                                             int n_sites, Rng& rng);

// Mixed forward: masked delta sites take the student path (anchor + delta),
// the rest run the teacher's original weights. The mask has one flag per
// entry of student.plan.module_sites().
Tensor hybrid_forward(const Model& teacher, const CompressedModel& student,
                      const std::vector<uint8_t>& mask, std::span<const int> tokens, int batch,
                      int seq_len);

// (1 - alpha) * cross-entropy + alpha * KL(teacher || student); the teacher
// logits enter as constants.
Tensor distill_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                    std::span<const int> targets, double alpha);

enum class TrainMode : uint8_t { delta_only, joint };
const char* train_mode_name(TrainMode m);
TrainMode parse_train_mode(std::string_view s);

struct TrainConfig {
    double alpha = 0.5; // distillation weight
    double lr = 1e-3;
    LrSchedule lr_schedule = LrSchedule::constant;
    int epochs = 1;
    int batch_size = 16;
    int seq_len = 64;
    uint64_t seed = 0;
    TrainMode mode = TrainMode::delta_only;
    double alpha_lora = 0.0;   // adapter scaling; <= 0 means rank (scaling 1)
    double lora_dropout = 0.0; // drop-connect rate on delta/adapter contributions
    int adapter_rank = 8;      // joint-mode adapters on retained weights
    int64_t tokens_per_epoch = 0; // cap per epoch; 0 = full train split
    int64_t val_tokens = 32768;   // per-epoch validation cap; 0 = full val split
    double grad_clip = 1.0;

    void validate() const;
};

struct EpochRow {
    int epoch = 0; // 1-based
    double train_loss = 0.0;
    double val_ppl = 0.0;
    double replacement_rate = 0.0; // base rate at the end of the epoch
};

struct TrainReport {
    std::vector<EpochRow> epochs;
    int epochs_to_threshold = 0; // first epoch with val ppl <= 1.05x final; 0 if none
    double wall_clock_s = 0.0;
    int64_t tokens_processed = 0;
    int64_t steps = 0;

    std::string to_json_lines() const; // one record per epoch plus a summary line
};

// Distillation training of the delta modules (plus low-rank adapters on the
// retained weights in joint mode, merged into the base when training ends).
// Passing no scheduler runs the plain-distillation baseline (replacement
// rate pinned at 1). Teacher parameters are flagged requires_grad = false.
TrainReport train(const Model& teacher, CompressedModel& student, const Corpus& corpus,
                  const TrainConfig& cfg, const ReplacementScheduler* sched);

// Plain next-token cross-entropy training for building teacher fixtures.
struct TeacherTrainConfig {
    double lr = 3e-3;
    LrSchedule lr_schedule = LrSchedule::cosine;
    int epochs = 2;
    int batch_size = 16;
    int seq_len = 64;
    uint64_t seed = 0;
    int64_t tokens_per_epoch = 0;
    int64_t val_tokens = 32768;
    double grad_clip = 1.0;
};
TrainReport train_teacher(Model& model, const Corpus& corpus, const TeacherTrainConfig& cfg);

} // namespace deltac
