#pragma once

#include "deltacomp/tensor.hpp"

namespace deltac {

enum class LrSchedule : uint8_t { constant, cosine };
const char* lr_schedule_name(LrSchedule s);
LrSchedule parse_lr_schedule(std::string_view s);

// lr at `step` of `total_steps` under the schedule (cosine decays to 10%)
double scheduled_lr(double base_lr, LrSchedule schedule, int64_t step, int64_t total_steps);

// Scales all grads so their global L2 norm is at most `max_norm`;
// returns the pre-clip norm.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

class AdamOptimizer {
public:
    explicit AdamOptimizer(std::vector<Tensor> params, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8);

    void step(double lr);
    void zero_grad();
    const std::vector<Tensor>& params() const { return params_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

} // namespace deltac
