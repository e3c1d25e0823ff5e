#include "deltacomp/optim.hpp"

#include <cmath>

namespace deltac {

const char* lr_schedule_name(LrSchedule s) { return s == LrSchedule::constant ? "constant" : "cosine"; }

LrSchedule parse_lr_schedule(std::string_view s) {
    if (s == "constant") return LrSchedule::constant;
    if (s == "cosine") return LrSchedule::cosine;
    throw ValueError("unknown lr schedule '" + std::string(s) + "' (expected constant|cosine)");
}

double scheduled_lr(double base_lr, LrSchedule schedule, int64_t step, int64_t total_steps) {
    if (schedule == LrSchedule::constant || total_steps <= 1) return base_lr;
    const double t = std::min<double>(1.0, static_cast<double>(step) / (total_steps - 1));
    const double floor = 0.1;
    return base_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(M_PI * t)));
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
    double sq = 0.0;
    for (const Tensor& p : params) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (Tensor p : params) {
            if (!p.has_grad()) continue;
            for (double& v : p.grad_mut()) v *= s;
        }
    }
    return norm;
}

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        m_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
        v_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
    }
}

void AdamOptimizer::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        if (!p.has_grad()) continue;
        const auto& g = p.grad();
        auto& w = p.values_mut();
        auto& m = m_[i];
        auto& v = v_[i];
        const int64_t n = static_cast<int64_t>(w.size());
        const bool par = n >= (1 << 14);
#pragma omp parallel for schedule(static) if (par)
        for (int64_t j = 0; j < n; ++j) {
            m[static_cast<size_t>(j)] = beta1_ * m[static_cast<size_t>(j)] + (1.0 - beta1_) * g[static_cast<size_t>(j)];
            v[static_cast<size_t>(j)] = beta2_ * v[static_cast<size_t>(j)] +
                                        (1.0 - beta2_) * g[static_cast<size_t>(j)] * g[static_cast<size_t>(j)];
            const double mh = m[static_cast<size_t>(j)] / bc1;
            const double vh = v[static_cast<size_t>(j)] / bc2;
            w[static_cast<size_t>(j)] -= lr * mh / (std::sqrt(vh) + eps_);
        }
    }
}

void AdamOptimizer::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

} // namespace deltac
