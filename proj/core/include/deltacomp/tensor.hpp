#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "deltacomp/common.hpp"

namespace deltac {

namespace detail {
struct TensorImpl;
}

// Dense row-major tensor of doubles with reverse-mode autodiff.
//
// A Tensor is a cheap value handle onto shared storage. Values are immutable
// once an op has produced them; the exceptions are gradient accumulation and
// explicit in-place parameter updates between graph executions (optimizers,
// initializers). Ops record graph nodes only while grad recording is enabled
// and at least one input requires grad.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    // i.i.d. N(0, std^2)
    static Tensor randn(std::vector<int> shape, Rng& rng, double std_dev = 1.0,
                        bool requires_grad = false);
    static Tensor identity(int n);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const;
    int ndim() const;
    int dim(int i) const;
    int64_t numel() const;
    int rows() const { return dim(0); } // 2-D helpers
    int cols() const { return dim(1); }

    const std::vector<double>& values() const;
    double item() const; // scalar tensors only
    double at(std::initializer_list<int> idx) const;

    // In-place access to leaf storage (initialization / optimizer steps).
    // Must not be used on tensors that are part of a live graph.
    std::vector<double>& values_mut();

    bool requires_grad() const;
    void set_requires_grad(bool v); // leaves only
    bool is_leaf() const;
    bool has_grad() const;
    const std::vector<double>& grad() const;
    std::vector<double>& grad_mut(); // leaves only (optimizer hooks)
    void zero_grad();

    // Reverse-mode sweep from a scalar. Leaf grads accumulate across calls;
    // interior grads are reset at the start of every sweep.
    void backward() const;

    // Deep copy of values; result is a detached leaf.
    Tensor clone() const;
    // Same storage, no graph edge, requires_grad = false.
    Tensor detach() const;

    uint64_t node_id() const;
    const char* op_name() const;

    detail::TensorImpl* impl() const { return impl_.get(); }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;

    friend struct OpBuilder;
};

// Disables graph recording for its scope (thread-local).
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};
bool grad_enabled();

// ---- differentiable ops -------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b); // [M,K] x [K,N]

// Elementwise ops support trailing-dimension broadcast: the smaller operand's
// shape must be a suffix of the larger one's.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor silu(const Tensor& x);
Tensor gelu(const Tensor& x);

Tensor sum(const Tensor& x); // scalar
Tensor transpose(const Tensor& x); // 2-D
Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor slice_rows(const Tensor& x, int start, int len); // 2-D
Tensor slice_cols(const Tensor& x, int start, int len); // 2-D
Tensor concat_rows(const std::vector<Tensor>& xs); // 2-D
Tensor concat_cols(const std::vector<Tensor>& xs); // 2-D

// rows of `table` gathered by id; backward scatter-adds into `table`
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

// per-row x / sqrt(mean(x^2) + eps), then scaled by `gain`
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps);

// [T,T] scores; row t is softmaxed over columns 0..t, columns > t become 0
Tensor causal_softmax(const Tensor& scores);

// rotary position encoding over a [T, d] slice; position = row index + pos0,
// frequency base `theta`
Tensor rope(const Tensor& x, double theta, int pos0 = 0);

// Bernoulli dropout with inverse scaling; identity when p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng);

// Fused multi-head causal self-attention over flattened [B*T, d] q/k/v:
// rotary positions on q and k, scaled scores, causal softmax, value mix,
// heads re-concatenated. Equivalent to the composition of slice/rope/
// matmul/causal_softmax/concat, in one graph node.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int batch, int seq_len,
                        int n_heads, double theta);

// Mean negative log-likelihood over positions whose target != ignore_index.
// logits: [R,V] or [B,T,V]; targets: one id per position.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets,
                             int ignore_index = -1);

// Mean over positions of KL(softmax(teacher) || softmax(student)); the
// gradient flows into the student logits only. `include`, when given, selects
// positions (1 = include).
Tensor kl_divergence_logits(const Tensor& teacher_logits, const Tensor& student_logits,
                            std::span<const uint8_t> include = {});

// ---- internal kernels (exposed for benchmarks) ---------------------------

namespace detail {
// C[M,N] (+)= A[M,K] * B[K,N]; row-parallel, bit-deterministic for any
// thread count
void gemm_nn(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c,
             int m, int k, int n, bool accumulate);
// C[M,N] (+)= A[M,K] * B[N,K]^T
void gemm_nt(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c,
             int m, int k, int n, bool accumulate);
// C[M,N] (+)= A[K,M]^T * B[K,N]
void gemm_tn(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c,
             int m, int k, int n, bool accumulate);
} // namespace detail

} // namespace deltac
