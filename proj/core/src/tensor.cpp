#include "deltacomp/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <unordered_set>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace deltac {

namespace detail {

#ifdef _OPENMP
// On small core counts the default spin-wait starves the serial sections
// between parallel regions. Respects a user-provided value.
static const bool g_omp_env_init = [] {
    ::setenv("OMP_WAIT_POLICY", "PASSIVE", /*overwrite=*/0);
    return true;
}();
#endif

#ifdef __GLIBC__
// Graph buffers are multi-megabyte and have stack-like lifetimes; without
// this every one becomes an mmap/munmap pair and each step pays the page
// faults again.
static const bool g_malloc_init = [] {
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
    return true;
}();
#endif

static std::atomic<uint64_t> g_node_counter{0};
static thread_local bool g_grad_enabled = true;

struct TensorImpl {
    std::vector<int> shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::unique_ptr<std::vector<double>> grad; // lazily allocated, same length as values

    // graph bookkeeping; parents own the upstream impls for the sweep
    uint64_t node_id = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void()> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(values.size()); }
    bool is_leaf() const { return parents.empty(); }

    std::vector<double>& grad_buf() {
        if (!grad) grad = std::make_unique<std::vector<double>>(values.size(), 0.0);
        return *grad;
    }
};

static int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ValueError("negative dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

} // namespace detail

using detail::TensorImpl;

// Creates impl + handle; every constructor funnels through here.
struct OpBuilder {
    static Tensor make(std::vector<int> shape, std::vector<double> values, bool requires_grad) {
        if (detail::shape_numel(shape) != static_cast<int64_t>(values.size()))
            throw DimensionError("tensor data length " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
        auto impl = std::make_shared<TensorImpl>();
        impl->shape = std::move(shape);
        impl->values = std::move(values);
        impl->requires_grad = requires_grad;
        impl->node_id = detail::g_node_counter.fetch_add(1, std::memory_order_relaxed) + 1;
        return Tensor(std::move(impl));
    }

    // Output of a recorded op. `make_backward` is invoked only when the node
    // is actually recorded, so closures are never built in no-grad mode.
    template <typename MakeBackward>
    static Tensor op(const char* name, std::vector<int> shape, std::vector<double> values,
                     std::vector<Tensor> inputs, MakeBackward&& make_backward) {
        bool record = detail::g_grad_enabled;
        if (record) {
            record = false;
            for (const auto& t : inputs)
                if (t.defined() && t.requires_grad()) { record = true; break; }
        }
        Tensor out = make(std::move(shape), std::move(values), record);
        if (record) {
            auto* o = out.impl();
            o->op = name;
            o->parents.reserve(inputs.size());
            for (auto& t : inputs) o->parents.push_back(share(t));
            o->backward_fn = make_backward(o);
        }
        return out;
    }

    static std::shared_ptr<TensorImpl> share(const Tensor& t) { return t.impl_; }

    static Tensor wrap(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }
};

// ---- Tensor basics --------------------------------------------------------

static const std::vector<int>& require(const Tensor& t, const char* who) {
    if (!t.defined()) throw ValueError(std::string(who) + ": undefined tensor");
    return t.impl()->shape;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto n = detail::shape_numel(shape);
    return OpBuilder::make(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0),
                           requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    auto n = detail::shape_numel(shape);
    return OpBuilder::make(std::move(shape), std::vector<double>(static_cast<size_t>(n), value),
                           requires_grad);
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    return OpBuilder::make(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return OpBuilder::make({}, {value}, requires_grad);
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double std_dev, bool requires_grad) {
    auto n = detail::shape_numel(shape);
    std::vector<double> v(static_cast<size_t>(n));
    for (auto& x : v) x = rng.normal() * std_dev;
    return OpBuilder::make(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::identity(int n) {
    Tensor t = zeros({n, n});
    auto& v = t.impl()->values;
    for (int i = 0; i < n; ++i) v[static_cast<size_t>(i) * n + i] = 1.0;
    return t;
}

const std::vector<int>& Tensor::shape() const { return require(*this, "shape"); }
int Tensor::ndim() const { return static_cast<int>(shape().size()); }

int Tensor::dim(int i) const {
    const auto& s = shape();
    if (i < 0 || i >= static_cast<int>(s.size()))
        throw DimensionError("dim index " + std::to_string(i) + " out of range for " + shape_str(s));
    return s[static_cast<size_t>(i)];
}

int64_t Tensor::numel() const { require(*this, "numel"); return impl_->numel(); }

const std::vector<double>& Tensor::values() const {
    require(*this, "values");
    return impl_->values;
}

double Tensor::item() const {
    if (numel() != 1) throw DimensionError("item() requires a scalar, got " + shape_str(shape()));
    return impl_->values[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    const auto& s = shape();
    if (idx.size() != s.size())
        throw DimensionError("at(): index rank mismatch for " + shape_str(s));
    int64_t off = 0;
    size_t i = 0;
    for (int ix : idx) {
        if (ix < 0 || ix >= s[i]) throw DimensionError("at(): index out of range");
        off = off * s[i] + ix;
        ++i;
    }
    return impl_->values[static_cast<size_t>(off)];
}

std::vector<double>& Tensor::values_mut() {
    require(*this, "values_mut");
    if (!impl_->is_leaf())
        throw ValueError("values_mut: only leaf tensors may be mutated in place");
    return impl_->values;
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool v) {
    require(*this, "set_requires_grad");
    if (!impl_->is_leaf()) throw ValueError("set_requires_grad: not a leaf tensor");
    impl_->requires_grad = v;
    if (!v) impl_->grad.reset();
}

bool Tensor::is_leaf() const { require(*this, "is_leaf"); return impl_->is_leaf(); }

bool Tensor::has_grad() const { return impl_ && impl_->grad != nullptr; }

const std::vector<double>& Tensor::grad() const {
    require(*this, "grad");
    if (!impl_->grad) throw ValueError("grad(): no gradient accumulated");
    return *impl_->grad;
}

std::vector<double>& Tensor::grad_mut() {
    require(*this, "grad_mut");
    if (!impl_->is_leaf()) throw ValueError("grad_mut: only leaf gradients may be edited");
    if (!impl_->grad) throw ValueError("grad_mut: no gradient accumulated");
    return *impl_->grad;
}

void Tensor::zero_grad() {
    require(*this, "zero_grad");
    if (impl_->grad) std::fill(impl_->grad->begin(), impl_->grad->end(), 0.0);
}

Tensor Tensor::clone() const {
    require(*this, "clone");
    return OpBuilder::make(impl_->shape, impl_->values, false);
}

Tensor Tensor::detach() const {
    require(*this, "detach");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->values = impl_->values; // copy keeps the detached view immutable-safe
    impl->node_id = detail::g_node_counter.fetch_add(1, std::memory_order_relaxed) + 1;
    return OpBuilder::wrap(std::move(impl));
}

uint64_t Tensor::node_id() const { require(*this, "node_id"); return impl_->node_id; }
const char* Tensor::op_name() const { require(*this, "op_name"); return impl_->op; }

NoGradGuard::NoGradGuard() : prev_(detail::g_grad_enabled) { detail::g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { detail::g_grad_enabled = prev_; }
bool grad_enabled() { return detail::g_grad_enabled; }

// ---- backward sweep -------------------------------------------------------

void Tensor::backward() const {
    require(*this, "backward");
    if (numel() != 1)
        throw ValueError("backward: loss must be scalar, got " + shape_str(shape()));
    if (!impl_->requires_grad)
        throw ValueError("backward: tensor does not require grad");

    // Collect the reachable graph, newest first. Node ids are assigned at
    // creation and an op's output is always newer than its inputs, so sorting
    // by id yields a reverse topological order.
    std::vector<TensorImpl*> nodes;
    std::unordered_set<TensorImpl*> seen;
    std::vector<TensorImpl*> stack{impl_.get()};
    seen.insert(impl_.get());
    while (!stack.empty()) {
        TensorImpl* t = stack.back();
        stack.pop_back();
        nodes.push_back(t);
        for (const auto& p : t->parents)
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    std::sort(nodes.begin(), nodes.end(),
              [](const TensorImpl* a, const TensorImpl* b) { return a->node_id > b->node_id; });

    // Interior grads restart at zero each sweep; leaf grads accumulate.
    for (TensorImpl* t : nodes)
        if (!t->is_leaf() && t->grad) std::fill(t->grad->begin(), t->grad->end(), 0.0);

    impl_->grad_buf()[0] += 1.0;
    for (TensorImpl* t : nodes)
        if (t->backward_fn) t->backward_fn();
}

// ---- gemm kernels ---------------------------------------------------------

namespace detail {

// Parallelism is over disjoint output rows with a fixed inner accumulation
// order, so results are identical for any thread count.
static constexpr int64_t kParallelFlops = 1 << 17;

void gemm_nn(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c, int m, int k, int n, bool accumulate) {
    const bool par = static_cast<int64_t>(m) * k * n * 2 >= kParallelFlops;
#pragma omp parallel for schedule(static) if (par)
    for (int i = 0; i < m; ++i) {
        double* __restrict__ ci = c + static_cast<size_t>(i) * n;
        if (!accumulate) std::fill(ci, ci + n, 0.0);
        const double* __restrict__ ai = a + static_cast<size_t>(i) * k;
        int p = 0;
        for (; p + 4 <= k; p += 4) {
            const double a0 = ai[p], a1 = ai[p + 1], a2 = ai[p + 2], a3 = ai[p + 3];
            const double* __restrict__ b0 = b + static_cast<size_t>(p) * n;
            const double* __restrict__ b1 = b0 + n;
            const double* __restrict__ b2 = b1 + n;
            const double* __restrict__ b3 = b2 + n;
            for (int j = 0; j < n; ++j)
                ci[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
        }
        for (; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

void gemm_nt(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c, int m, int k, int n, bool accumulate) {
    // Row-by-row dot products defeat vectorization (FP reductions cannot be
    // reordered), so transpose the small right operand once and reuse the
    // nn kernel.
    std::vector<double> bt(static_cast<size_t>(k) * n);
    const bool par_t = static_cast<int64_t>(k) * n >= (1 << 14);
#pragma omp parallel for schedule(static) if (par_t)
    for (int j = 0; j < n; ++j)
        for (int p = 0; p < k; ++p)
            bt[static_cast<size_t>(p) * n + j] = b[static_cast<size_t>(j) * k + p];
    gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

void gemm_tn(const double* __restrict__ a, const double* __restrict__ b, double* __restrict__ c, int m, int k, int n, bool accumulate) {
    // Both inputs are tall (k is the big dimension here), so B is tiled over
    // k and reused across a tile of output rows to keep traffic in cache.
    constexpr int row_tile = 32;
    constexpr int k_tile = 64;
    const bool par = static_cast<int64_t>(m) * k * n * 2 >= kParallelFlops;
    const int n_tiles = (m + row_tile - 1) / row_tile;
#pragma omp parallel for schedule(static) if (par)
    for (int tile = 0; tile < n_tiles; ++tile) {
        const int i0 = tile * row_tile;
        const int i1 = std::min(m, i0 + row_tile);
        if (!accumulate)
            for (int i = i0; i < i1; ++i)
                std::fill(c + static_cast<size_t>(i) * n, c + static_cast<size_t>(i + 1) * n, 0.0);
        for (int p0 = 0; p0 < k; p0 += k_tile) {
            const int p1 = std::min(k, p0 + k_tile);
            for (int i = i0; i < i1; ++i) {
                double* ci = c + static_cast<size_t>(i) * n;
                for (int p = p0; p < p1; ++p) {
                    const double av = a[static_cast<size_t>(p) * m + i];
                    const double* bp = b + static_cast<size_t>(p) * n;
                    for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
                }
            }
        }
    }
}

} // namespace detail

// ---- op helpers -----------------------------------------------------------

namespace {

void require_2d(const Tensor& t, const char* who) {
    if (t.ndim() != 2)
        throw DimensionError(std::string(who) + ": expected 2-D tensor, got " + shape_str(t.shape()));
}

// Accumulates `src` into `dst->grad` if dst requires grad.
void accum_grad(TensorImpl* dst, const std::vector<double>& src) {
    if (!dst->requires_grad) return;
    auto& g = dst->grad_buf();
    for (size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

const std::vector<double>& grad_of(TensorImpl* t) { return *t->grad; }

// Trailing-dimension broadcast layout: `small` must be a shape suffix of
// `big`; the small operand repeats over the leading dims.
struct Broadcast {
    std::vector<int> out_shape;
    int64_t repeat = 1;  // how many copies of the small operand tile the big one
    int64_t small_n = 1; // elements in the small operand
    bool a_is_big = true;
};

bool is_suffix(const std::vector<int>& suffix, const std::vector<int>& full) {
    if (suffix.size() > full.size()) return false;
    return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

Broadcast broadcast_layout(const Tensor& a, const Tensor& b, const char* who) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    Broadcast bc;
    if (sa == sb) {
        bc.out_shape = sa;
        bc.small_n = a.numel();
        bc.repeat = 1;
        bc.a_is_big = true;
        return bc;
    }
    if (is_suffix(sb, sa)) {
        bc.out_shape = sa;
        bc.small_n = b.numel() == 0 ? 1 : b.numel();
        bc.repeat = b.numel() == 0 ? a.numel() : a.numel() / b.numel();
        bc.a_is_big = true;
        return bc;
    }
    if (is_suffix(sa, sb)) {
        bc.out_shape = sb;
        bc.small_n = a.numel() == 0 ? 1 : a.numel();
        bc.repeat = a.numel() == 0 ? b.numel() : b.numel() / a.numel();
        bc.a_is_big = false;
        return bc;
    }
    throw DimensionError(std::string(who) + ": shapes " + shape_str(sa) + " and " + shape_str(sb) +
                         " are not trailing-broadcast compatible");
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace

// ---- matmul ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    std::vector<double> out(static_cast<size_t>(m) * n);
    detail::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n, false);
    return OpBuilder::op("matmul", {m, n}, std::move(out), {a, b}, [=](TensorImpl* o) {
        TensorImpl* ia = o->parents[0].get();
        TensorImpl* ib = o->parents[1].get();
        return [o, ia, ib, m, k, n] {
            const auto& g = grad_of(o);
            if (ia->requires_grad) // dA = G * B^T
                detail::gemm_nt(g.data(), ib->values.data(), ia->grad_buf().data(), m, n, k, true);
            if (ib->requires_grad) // dB = A^T * G
                detail::gemm_tn(ia->values.data(), g.data(), ib->grad_buf().data(), k, m, n, true);
        };
    });
}

// ---- elementwise ----------------------------------------------------------

namespace {

enum class BinKind { add, sub, mul };

// Loops above this element count run under OpenMP; each element is owned by
// exactly one thread with a fixed accumulation order, so results stay
// bit-identical for any thread count.
constexpr int64_t kParElems = 1 << 14;

Tensor binary_op(const char* name, BinKind kind, const Tensor& a, const Tensor& b) {
    Broadcast bc = broadcast_layout(a, b, name);
    const auto& big = bc.a_is_big ? a.values() : b.values();
    const auto& small = bc.a_is_big ? b.values() : a.values();
    std::vector<double> out(big.size());
    const int64_t sn = bc.small_n;
    const int64_t total = static_cast<int64_t>(big.size());
    const bool par = total >= kParElems;
    const bool flip = kind == BinKind::sub && !bc.a_is_big;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t r = 0; r < bc.repeat; ++r) {
        const double* pb = big.data() + r * sn;
        double* po = out.data() + r * sn;
        switch (kind) {
            case BinKind::add:
                for (int64_t i = 0; i < sn; ++i) po[i] = pb[i] + small[static_cast<size_t>(i)];
                break;
            case BinKind::sub:
                if (!flip)
                    for (int64_t i = 0; i < sn; ++i) po[i] = pb[i] - small[static_cast<size_t>(i)];
                else
                    for (int64_t i = 0; i < sn; ++i) po[i] = small[static_cast<size_t>(i)] - pb[i];
                break;
            case BinKind::mul:
                for (int64_t i = 0; i < sn; ++i) po[i] = pb[i] * small[static_cast<size_t>(i)];
                break;
        }
    }
    return OpBuilder::op(name, bc.out_shape, std::move(out), {a, b}, [=](TensorImpl* o) {
        TensorImpl* ia = o->parents[0].get();
        TensorImpl* ib = o->parents[1].get();
        return [o, ia, ib, kind, bc] {
            const auto& g = grad_of(o);
            TensorImpl* big = bc.a_is_big ? ia : ib;
            TensorImpl* small = bc.a_is_big ? ib : ia;
            const double big_sign = (kind == BinKind::sub && !bc.a_is_big) ? -1.0 : 1.0;
            const double small_sign = (kind == BinKind::sub && bc.a_is_big) ? -1.0 : 1.0;
            const int64_t sn = bc.small_n;
            const int64_t total = static_cast<int64_t>(g.size());
            const bool par = total >= kParElems;
            if (big->requires_grad) {
                auto& gb = big->grad_buf();
                if (kind == BinKind::mul) {
#pragma omp parallel for schedule(static) if (par)
                    for (int64_t r = 0; r < bc.repeat; ++r)
                        for (int64_t i = 0; i < sn; ++i)
                            gb[static_cast<size_t>(r * sn + i)] +=
                                g[static_cast<size_t>(r * sn + i)] * small->values[static_cast<size_t>(i)];
                } else {
#pragma omp parallel for schedule(static) if (par)
                    for (int64_t i = 0; i < total; ++i)
                        gb[static_cast<size_t>(i)] += big_sign * g[static_cast<size_t>(i)];
                }
            }
            if (small->requires_grad) {
                auto& gs = small->grad_buf();
                // per-i accumulation over repeats keeps the order fixed
                if (kind == BinKind::mul) {
#pragma omp parallel for schedule(static) if (par)
                    for (int64_t i = 0; i < sn; ++i) {
                        double acc = 0.0;
                        for (int64_t r = 0; r < bc.repeat; ++r)
                            acc += g[static_cast<size_t>(r * sn + i)] *
                                   big->values[static_cast<size_t>(r * sn + i)];
                        gs[static_cast<size_t>(i)] += acc;
                    }
                } else {
#pragma omp parallel for schedule(static) if (par)
                    for (int64_t i = 0; i < sn; ++i) {
                        double acc = 0.0;
                        for (int64_t r = 0; r < bc.repeat; ++r)
                            acc += g[static_cast<size_t>(r * sn + i)];
                        gs[static_cast<size_t>(i)] += small_sign * acc;
                    }
                }
            }
        };
    });
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op("add", BinKind::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op("sub", BinKind::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op("mul", BinKind::mul, a, b); }

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
    return OpBuilder::op("scale", a.shape(), std::move(out), {a}, [=](TensorImpl* o) {
        TensorImpl* ia = o->parents[0].get();
        return [o, ia, c] {
            const auto& g = grad_of(o);
            if (!ia->requires_grad) return;
            auto& ga = ia->grad_buf();
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += c * g[i];
        };
    });
}

Tensor silu(const Tensor& x) {
    const int64_t n = static_cast<int64_t>(x.values().size());
    const bool par = n >= kParElems;
    std::vector<double> out(static_cast<size_t>(n));
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < n; ++i) {
        const double v = x.values()[static_cast<size_t>(i)];
        out[static_cast<size_t>(i)] = v * sigmoid(v);
    }
    return OpBuilder::op("silu", x.shape(), std::move(out), {x}, [=](TensorImpl* o) {
        TensorImpl* ix = o->parents[0].get();
        return [o, ix, n, par] {
            if (!ix->requires_grad) return;
            const auto& g = grad_of(o);
            auto& gx = ix->grad_buf();
#pragma omp parallel for schedule(static) if (par)
            for (int64_t i = 0; i < n; ++i) {
                const double v = ix->values[static_cast<size_t>(i)];
                const double s = sigmoid(v);
                gx[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * (s + v * s * (1.0 - s));
            }
        };
    });
}

Tensor gelu(const Tensor& x) {
    static const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    static const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
    std::vector<double> out(x.values().size());
    for (size_t i = 0; i < out.size(); ++i) {
        const double v = x.values()[i];
        out[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    return OpBuilder::op("gelu", x.shape(), std::move(out), {x}, [=](TensorImpl* o) {
        TensorImpl* ix = o->parents[0].get();
        return [o, ix] {
            if (!ix->requires_grad) return;
            const auto& g = grad_of(o);
            auto& gx = ix->grad_buf();
            for (size_t i = 0; i < gx.size(); ++i) {
                const double v = ix->values[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                gx[i] += g[i] * (cdf + v * pdf);
            }
        };
    });
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    return OpBuilder::op("sum", {}, {acc}, {x}, [=](TensorImpl* o) {
        TensorImpl* ix = o->parents[0].get();
        return [o, ix] {
            if (!ix->requires_grad) return;
            const double g = grad_of(o)[0];
            auto& gx = ix->grad_buf();
            for (auto& v : gx) v += g;
        };
    });
}

Tensor transpose(const Tensor& x) {
    require_2d(x, "transpose");
    const int m = x.dim(0), n = x.dim(1);
    std::vector<double> out(static_cast<size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<size_t>(j) * m + i] = x.values()[static_cast<size_t>(i) * n + j];
    return OpBuilder::op("transpose", {n, m}, std::move(out), {x}, [=](TensorImpl* o) {
        TensorImpl* ix = o->parents[0].get();
        return [o, ix, m, n] {
            if (!ix->requires_grad) return;
            const auto& g = grad_of(o);
            auto& gx = ix->grad_buf();
            for (int j = 0; j < n; ++j)
                for (int i = 0; i < m; ++i)
                    gx[static_cast<size_t>(i) * n + j] += g[static_cast<size_t>(j) * m + i];
        };
    });
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
    if (detail::shape_numel(shape) != x.numel())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                             shape_str(shape));
    return OpBuilder::op("reshape", std::move(shape), x.values(), {x}, [](TensorImpl* o) {
        TensorImpl* ix = o->parents[0].get();
        return [o, ix] { accum_grad(ix, grad_of(o)); };
    });
}

Tensor slice_rows(const Tensor& x, int start, int len) {
    require_2d(x, "slice_rows");
    const int m = x.dim(0), n = x.dim(1);
    if (start < 0 || len < 0 || start + len > m)
        throw DimensionError("slice_rows: range [" + std::to_string(start) + ", " +
                             std::to_string(start + len) + ") out of bounds for " +
                             shape_str(x.shape()));
    std::vector<double> out(x.values().begin() + static_cast<size_t>(start) * n,
                            x.values().begin() + static_cast<size_t>(start + len) * n);
    return OpBuilder::op("slice_rows", {len, n}, std::move(out), {x}, [=](TensorImpl* o) {
        TensorImpl* ix = o->parents[0].get();
        return [o, ix, start, n] {
            if (!ix->requires_grad) return;
            const auto& g = grad_of(o);
            auto& gx = ix->grad_buf();
            for (size_t i = 0; i < g.size(); ++i) gx[static_cast<size_t>(start) * n + i] += g[i];
        };
    });
}

Tensor slice_cols(const Tensor& x, int start, int len) {
    require_2d(x, "slice_cols");
    const int m = x.dim(0), n = x.dim(1);
    if (start < 0 || len < 0 || start + len > n)
        throw DimensionError("slice_cols: range [" + std::to_string(start) + ", " +
                             std::to_string(start + len) + ") out of bounds for " +
                             shape_str(x.shape()));
    std::vector<double> out(static_cast<size_t>(m) * len);
    for (int i = 0; i < m; ++i)
        std::copy_n(x.values().data() + static_cast<size_t>(i) * n + start, len,
                    out.data() + static_cast<size_t>(i) * len);
    return OpBuilder::op("slice_cols", {m, len}, std::move(out), {x}, [=](TensorImpl* o) {
        TensorImpl* ix = o->parents[0].get();
        return [o, ix, start, len, m, n] {
            if (!ix->requires_grad) return;
            const auto& g = grad_of(o);
            auto& gx = ix->grad_buf();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < len; ++j)
                    gx[static_cast<size_t>(i) * n + start + j] += g[static_cast<size_t>(i) * len + j];
        };
    });
}

Tensor concat_rows(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ValueError("concat_rows: empty input list");
    const int n = xs[0].dim(1);
    int m = 0;
    for (const auto& t : xs) {
        require_2d(t, "concat_rows");
        if (t.dim(1) != n)
            throw DimensionError("concat_rows: column mismatch, " + shape_str(t.shape()) +
                                 " vs " + shape_str(xs[0].shape()));
        m += t.dim(0);
    }
    std::vector<double> out;
    out.reserve(static_cast<size_t>(m) * n);
    for (const auto& t : xs) out.insert(out.end(), t.values().begin(), t.values().end());
    return OpBuilder::op("concat_rows", {m, n}, std::move(out), xs, [=](TensorImpl* o) {
        return [o, n] {
            const auto& g = grad_of(o);
            size_t off = 0;
            for (auto& p : o->parents) {
                const size_t cnt = p->values.size();
                if (p->requires_grad) {
                    auto& gp = p->grad_buf();
                    for (size_t i = 0; i < cnt; ++i) gp[i] += g[off + i];
                }
                off += cnt;
            }
            (void)n;
        };
    });
}

Tensor concat_cols(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ValueError("concat_cols: empty input list");
    const int m = xs[0].dim(0);
    int n = 0;
    for (const auto& t : xs) {
        require_2d(t, "concat_cols");
        if (t.dim(0) != m)
            throw DimensionError("concat_cols: row mismatch, " + shape_str(t.shape()) + " vs " +
                                 shape_str(xs[0].shape()));
        n += t.dim(1);
    }
    std::vector<double> out(static_cast<size_t>(m) * n);
    int col = 0;
    for (const auto& t : xs) {
        const int w = t.dim(1);
        for (int i = 0; i < m; ++i)
            std::copy_n(t.values().data() + static_cast<size_t>(i) * w, w,
                        out.data() + static_cast<size_t>(i) * n + col);
        col += w;
    }
    return OpBuilder::op("concat_cols", {m, n}, std::move(out), xs, [=](TensorImpl* o) {
        return [o, m, n] {
            const auto& g = grad_of(o);
            int col = 0;
            for (auto& p : o->parents) {
                const int w = p->shape[1];
                if (p->requires_grad) {
                    auto& gp = p->grad_buf();
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j)
                            gp[static_cast<size_t>(i) * w + j] += g[static_cast<size_t>(i) * n + col + j];
                }
                col += w;
            }
        };
    });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
    require_2d(table, "embedding_lookup");
    const int v = table.dim(0), d = table.dim(1);
    std::vector<double> out(ids.size() * static_cast<size_t>(d));
    for (size_t i = 0; i < ids.size(); ++i) {
        const int id = ids[i];
        if (id < 0 || id >= v)
            throw ValueError("embedding_lookup: id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(v) + ")");
        std::copy_n(table.values().data() + static_cast<size_t>(id) * d, d, out.data() + i * d);
    }
    std::vector<int> idv(ids.begin(), ids.end());
    return OpBuilder::op("embedding_lookup", {static_cast<int>(ids.size()), d}, std::move(out),
                         {table}, [idv = std::move(idv), d](TensorImpl* o) {
        TensorImpl* it = o->parents[0].get();
        return [o, it, idv, d] {
            if (!it->requires_grad) return;
            const auto& g = grad_of(o);
            auto& gt = it->grad_buf();
            for (size_t i = 0; i < idv.size(); ++i) {
                double* row = gt.data() + static_cast<size_t>(idv[i]) * d;
                const double* gr = g.data() + i * static_cast<size_t>(d);
                for (int j = 0; j < d; ++j) row[j] += gr[j];
            }
        };
    });
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
    require_2d(x, "rms_norm");
    const int m = x.dim(0), n = x.dim(1);
    if (gain.ndim() != 1 || gain.dim(0) != n)
        throw DimensionError("rms_norm: gain " + shape_str(gain.shape()) + " does not match " +
                             shape_str(x.shape()));
    std::vector<double> out(static_cast<size_t>(m) * n);
    std::vector<double> inv_rms(static_cast<size_t>(m));
    const bool par = static_cast<int64_t>(m) * n >= kParElems;
#pragma omp parallel for schedule(static) if (par)
    for (int i = 0; i < m; ++i) {
        const double* xi = x.values().data() + static_cast<size_t>(i) * n;
        double ms = 0.0;
        for (int j = 0; j < n; ++j) ms += xi[j] * xi[j];
        ms = ms / n + eps;
        const double r = 1.0 / std::sqrt(ms);
        inv_rms[static_cast<size_t>(i)] = r;
        double* oi = out.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) oi[j] = xi[j] * r * gain.values()[static_cast<size_t>(j)];
    }
    return OpBuilder::op("rms_norm", {m, n}, std::move(out), {x, gain},
                         [inv_rms = std::move(inv_rms), m, n, par](TensorImpl* o) {
        TensorImpl* ix = o->parents[0].get();
        TensorImpl* ig = o->parents[1].get();
        return [o, ix, ig, inv_rms, m, n, par] {
            const auto& g = grad_of(o);
            if (ix->requires_grad) {
                auto& gx = ix->grad_buf();
#pragma omp parallel for schedule(static) if (par)
                for (int i = 0; i < m; ++i) {
                    const double r = inv_rms[static_cast<size_t>(i)];
                    const double* xi = ix->values.data() + static_cast<size_t>(i) * n;
                    const double* gi = g.data() + static_cast<size_t>(i) * n;
                    double dot = 0.0; // sum_j g_j * gain_j * x_j
                    for (int j = 0; j < n; ++j) dot += gi[j] * ig->values[static_cast<size_t>(j)] * xi[j];
                    double* gxi = gx.data() + static_cast<size_t>(i) * n;
                    const double k = dot * r * r * r / n;
                    for (int j = 0; j < n; ++j)
                        gxi[j] += gi[j] * ig->values[static_cast<size_t>(j)] * r - xi[j] * k;
                }
            }
            if (ig->requires_grad) {
                auto& gg = ig->grad_buf();
                // column-major accumulation keeps per-entry order fixed
#pragma omp parallel for schedule(static) if (par)
                for (int j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < m; ++i)
                        acc += g[static_cast<size_t>(i) * n + j] *
                               ix->values[static_cast<size_t>(i) * n + j] *
                               inv_rms[static_cast<size_t>(i)];
                    gg[static_cast<size_t>(j)] += acc;
                }
            }
        };
    });
}

Tensor causal_softmax(const Tensor& scores) {
    require_2d(scores, "causal_softmax");
    const int t = scores.dim(0);
    if (scores.dim(1) != t)
        throw DimensionError("causal_softmax: expected square scores, got " +
                             shape_str(scores.shape()));
    std::vector<double> out(static_cast<size_t>(t) * t, 0.0);
    for (int i = 0; i < t; ++i) {
        const double* si = scores.values().data() + static_cast<size_t>(i) * t;
        double* oi = out.data() + static_cast<size_t>(i) * t;
        double mx = si[0];
        for (int j = 1; j <= i; ++j) mx = std::max(mx, si[j]);
        double z = 0.0;
        for (int j = 0; j <= i; ++j) {
            oi[j] = std::exp(si[j] - mx);
            z += oi[j];
        }
        const double inv = 1.0 / z;
        for (int j = 0; j <= i; ++j) oi[j] *= inv;
    }
    return OpBuilder::op("causal_softmax", {t, t}, std::move(out), {scores}, [=](TensorImpl* o) {
        TensorImpl* is = o->parents[0].get();
        return [o, is, t] {
            if (!is->requires_grad) return;
            const auto& g = grad_of(o);
            auto& gs = is->grad_buf();
            for (int i = 0; i < t; ++i) {
                const double* pi = o->values.data() + static_cast<size_t>(i) * t;
                const double* gi = g.data() + static_cast<size_t>(i) * t;
                double dot = 0.0;
                for (int j = 0; j <= i; ++j) dot += gi[j] * pi[j];
                double* gsi = gs.data() + static_cast<size_t>(i) * t;
                for (int j = 0; j <= i; ++j) gsi[j] += pi[j] * (gi[j] - dot);
            }
        };
    });
}

Tensor rope(const Tensor& x, double theta, int pos0) {
    require_2d(x, "rope");
    const int t = x.dim(0), d = x.dim(1);
    if (d % 2 != 0)
        throw DimensionError("rope: head dimension must be even, got " + shape_str(x.shape()));
    const int half = d / 2;
    std::vector<double> cs(static_cast<size_t>(t) * half), sn(static_cast<size_t>(t) * half);
    for (int i = 0; i < t; ++i) {
        const double pos = pos0 + i;
        for (int p = 0; p < half; ++p) {
            const double freq = std::pow(theta, -2.0 * p / d);
            cs[static_cast<size_t>(i) * half + p] = std::cos(pos * freq);
            sn[static_cast<size_t>(i) * half + p] = std::sin(pos * freq);
        }
    }
    std::vector<double> out(static_cast<size_t>(t) * d);
    for (int i = 0; i < t; ++i) {
        const double* xi = x.values().data() + static_cast<size_t>(i) * d;
        double* oi = out.data() + static_cast<size_t>(i) * d;
        for (int p = 0; p < half; ++p) {
            const double c = cs[static_cast<size_t>(i) * half + p];
            const double s = sn[static_cast<size_t>(i) * half + p];
            oi[2 * p] = xi[2 * p] * c - xi[2 * p + 1] * s;
            oi[2 * p + 1] = xi[2 * p] * s + xi[2 * p + 1] * c;
        }
    }
    return OpBuilder::op("rope", {t, d}, std::move(out), {x},
                         [cs = std::move(cs), sn = std::move(sn), t, d, half](TensorImpl* o) {
        TensorImpl* ix = o->parents[0].get();
        return [o, ix, cs, sn, t, d, half] {
            if (!ix->requires_grad) return;
            const auto& g = grad_of(o);
            auto& gx = ix->grad_buf();
            for (int i = 0; i < t; ++i) {
                const double* gi = g.data() + static_cast<size_t>(i) * d;
                double* gxi = gx.data() + static_cast<size_t>(i) * d;
                for (int p = 0; p < half; ++p) {
                    const double c = cs[static_cast<size_t>(i) * half + p];
                    const double s = sn[static_cast<size_t>(i) * half + p];
                    // inverse rotation
                    gxi[2 * p] += gi[2 * p] * c + gi[2 * p + 1] * s;
                    gxi[2 * p + 1] += -gi[2 * p] * s + gi[2 * p + 1] * c;
                }
            }
        };
    });
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw ValueError("dropout: p must be in [0, 1)");
    if (p == 0.0) return scale(x, 1.0); // keeps the graph edge, no mask draw
    const double keep = 1.0 - p;
    std::vector<double> mask(x.values().size());
    for (auto& m : mask) m = rng.bernoulli(1.0 - p) ? 1.0 / keep : 0.0;
    std::vector<double> out(x.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * mask[i];
    return OpBuilder::op("dropout", x.shape(), std::move(out), {x},
                         [mask = std::move(mask)](TensorImpl* o) {
        TensorImpl* ix = o->parents[0].get();
        return [o, ix, mask] {
            if (!ix->requires_grad) return;
            const auto& g = grad_of(o);
            auto& gx = ix->grad_buf();
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * mask[i];
        };
    });
}

namespace {

// Rotation tables shared across heads: cos/sin of position * theta^(-2p/d).
struct RopeTable {
    std::vector<double> cs, sn; // [T, d/2]
    static RopeTable build(int t, int half, int d, double theta, int pos0) {
        RopeTable rt;
        rt.cs.resize(static_cast<size_t>(t) * half);
        rt.sn.resize(static_cast<size_t>(t) * half);
        std::vector<double> freq(static_cast<size_t>(half));
        for (int p = 0; p < half; ++p) freq[static_cast<size_t>(p)] = std::pow(theta, -2.0 * p / d);
        for (int i = 0; i < t; ++i) {
            const double pos = pos0 + i;
            for (int p = 0; p < half; ++p) {
                rt.cs[static_cast<size_t>(i) * half + p] = std::cos(pos * freq[static_cast<size_t>(p)]);
                rt.sn[static_cast<size_t>(i) * half + p] = std::sin(pos * freq[static_cast<size_t>(p)]);
            }
        }
        return rt;
    }
};

} // namespace

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int batch, int seq_len,
                        int n_heads, double theta) {
    require_2d(q, "causal_attention");
    const int rows = q.dim(0), d = q.dim(1);
    if (k.shape() != q.shape() || v.shape() != q.shape())
        throw DimensionError("causal_attention: q/k/v shapes differ");
    if (rows != batch * seq_len)
        throw DimensionError("causal_attention: rows " + std::to_string(rows) +
                             " != batch * seq_len");
    if (n_heads < 1 || d % n_heads != 0)
        throw DimensionError("causal_attention: d_model not divisible by heads");
    const int hd = d / n_heads;
    if (hd % 2 != 0) throw DimensionError("causal_attention: head dim must be even");
    if (hd > 256) throw DimensionError("causal_attention: head dim above 256 unsupported");
    const int t = seq_len;
    const int half = hd / 2;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    RopeTable rt = RopeTable::build(t, half, hd, theta, 0);

    // rotated q/k and softmax probabilities are kept for the backward pass
    auto qr = std::make_shared<std::vector<double>>(static_cast<size_t>(rows) * d);
    auto kr = std::make_shared<std::vector<double>>(static_cast<size_t>(rows) * d);
    auto probs = std::make_shared<std::vector<double>>(
        static_cast<size_t>(batch) * n_heads * t * t, 0.0);
    std::vector<double> out(static_cast<size_t>(rows) * d);

    const double* qv = q.values().data();
    const double* kv = k.values().data();
    const double* vv = v.values().data();

#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < n_heads; ++h) {
            const int col = h * hd;
            // rotate this head's q/k slab
            for (int i = 0; i < t; ++i) {
                const size_t row = static_cast<size_t>(b) * t + i;
                const double* qi = qv + row * d + col;
                const double* ki = kv + row * d + col;
                double* qro = qr->data() + row * d + col;
                double* kro = kr->data() + row * d + col;
                for (int p = 0; p < half; ++p) {
                    const double c = rt.cs[static_cast<size_t>(i) * half + p];
                    const double s = rt.sn[static_cast<size_t>(i) * half + p];
                    qro[2 * p] = qi[2 * p] * c - qi[2 * p + 1] * s;
                    qro[2 * p + 1] = qi[2 * p] * s + qi[2 * p + 1] * c;
                    kro[2 * p] = ki[2 * p] * c - ki[2 * p + 1] * s;
                    kro[2 * p + 1] = ki[2 * p] * s + ki[2 * p + 1] * c;
                }
            }
            // causal softmax(scale * Qr Kr^T) and the value mix
            double* pb = probs->data() +
                         (static_cast<size_t>(b) * n_heads + h) * t * t;
            for (int i = 0; i < t; ++i) {
                const double* qi = qr->data() + (static_cast<size_t>(b) * t + i) * d + col;
                double* pi = pb + static_cast<size_t>(i) * t;
                double mx = -1e300;
                for (int j = 0; j <= i; ++j) {
                    const double* kj = kr->data() + (static_cast<size_t>(b) * t + j) * d + col;
                    double acc = 0.0;
                    for (int p = 0; p < hd; ++p) acc += qi[p] * kj[p];
                    pi[j] = acc * att_scale;
                    mx = std::max(mx, pi[j]);
                }
                double z = 0.0;
                for (int j = 0; j <= i; ++j) {
                    pi[j] = std::exp(pi[j] - mx);
                    z += pi[j];
                }
                const double inv = 1.0 / z;
                for (int j = 0; j <= i; ++j) pi[j] *= inv;

                double* oi = out.data() + (static_cast<size_t>(b) * t + i) * d + col;
                std::fill(oi, oi + hd, 0.0);
                for (int j = 0; j <= i; ++j) {
                    const double pij = pi[j];
                    const double* vj = vv + (static_cast<size_t>(b) * t + j) * d + col;
                    for (int p = 0; p < hd; ++p) oi[p] += pij * vj[p];
                }
            }
        }
    }

    return OpBuilder::op(
        "causal_attention", {rows, d}, std::move(out), {q, k, v},
        [qr, kr, probs, rt = std::move(rt), batch, t, d, n_heads, hd, half,
         att_scale](TensorImpl* o) {
            TensorImpl* iq = o->parents[0].get();
            TensorImpl* ik = o->parents[1].get();
            TensorImpl* iv = o->parents[2].get();
            return [o, iq, ik, iv, qr, kr, probs, rt, batch, t, d, n_heads, hd, half, att_scale] {
                const auto& g = grad_of(o);
                const bool need_q = iq->requires_grad;
                const bool need_k = ik->requires_grad;
                const bool need_v = iv->requires_grad;
                double* gq = need_q ? iq->grad_buf().data() : nullptr;
                double* gk = need_k ? ik->grad_buf().data() : nullptr;
                double* gv = need_v ? iv->grad_buf().data() : nullptr;

#pragma omp parallel for collapse(2) schedule(static)
                for (int b = 0; b < batch; ++b) {
                    for (int h = 0; h < n_heads; ++h) {
                        const int col = h * hd;
                        const double* pb =
                            probs->data() + (static_cast<size_t>(b) * n_heads + h) * t * t;
                        std::vector<double> ds(static_cast<size_t>(t) * t, 0.0);
                        for (int i = 0; i < t; ++i) {
                            const double* gi = g.data() + (static_cast<size_t>(b) * t + i) * d + col;
                            const double* pi = pb + static_cast<size_t>(i) * t;
                            // dP_ij = g_i . v_j ; dV_j += P_ij g_i
                            double dot = 0.0;
                            double* dsi = ds.data() + static_cast<size_t>(i) * t;
                            for (int j = 0; j <= i; ++j) {
                                const double* vj =
                                    iv->values.data() + (static_cast<size_t>(b) * t + j) * d + col;
                                double dp = 0.0;
                                for (int p = 0; p < hd; ++p) dp += gi[p] * vj[p];
                                dsi[j] = dp;
                                dot += dp * pi[j];
                            }
                            for (int j = 0; j <= i; ++j) dsi[j] = pi[j] * (dsi[j] - dot) * att_scale;
                            if (need_v) {
                                for (int j = 0; j <= i; ++j) {
                                    double* gvj =
                                        gv + (static_cast<size_t>(b) * t + j) * d + col;
                                    const double pij = pi[j];
                                    for (int p = 0; p < hd; ++p) gvj[p] += pij * gi[p];
                                }
                            }
                        }
                        if (!need_q && !need_k) continue;
                        // dQr_i = sum_j ds_ij Kr_j ; dKr_j = sum_i ds_ij Qr_i,
                        // both rotated back before accumulation
                        for (int i = 0; i < t; ++i) {
                            if (need_q) {
                                double acc[256];
                                std::fill(acc, acc + hd, 0.0);
                                const double* dsi = ds.data() + static_cast<size_t>(i) * t;
                                for (int j = 0; j <= i; ++j) {
                                    const double* krj =
                                        kr->data() + (static_cast<size_t>(b) * t + j) * d + col;
                                    const double dij = dsi[j];
                                    for (int p = 0; p < hd; ++p) acc[p] += dij * krj[p];
                                }
                                double* gqi = gq + (static_cast<size_t>(b) * t + i) * d + col;
                                for (int p = 0; p < half; ++p) {
                                    const double c = rt.cs[static_cast<size_t>(i) * half + p];
                                    const double s = rt.sn[static_cast<size_t>(i) * half + p];
                                    gqi[2 * p] += acc[2 * p] * c + acc[2 * p + 1] * s;
                                    gqi[2 * p + 1] += -acc[2 * p] * s + acc[2 * p + 1] * c;
                                }
                            }
                            if (need_k) {
                                double acc[256];
                                std::fill(acc, acc + hd, 0.0);
                                for (int j = i; j < t; ++j) { // ds_ji contributes for j >= i
                                    const double* qrj =
                                        qr->data() + (static_cast<size_t>(b) * t + j) * d + col;
                                    const double dji = ds[static_cast<size_t>(j) * t + i];
                                    for (int p = 0; p < hd; ++p) acc[p] += dji * qrj[p];
                                }
                                double* gki = gk + (static_cast<size_t>(b) * t + i) * d + col;
                                for (int p = 0; p < half; ++p) {
                                    const double c = rt.cs[static_cast<size_t>(i) * half + p];
                                    const double s = rt.sn[static_cast<size_t>(i) * half + p];
                                    gki[2 * p] += acc[2 * p] * c + acc[2 * p + 1] * s;
                                    gki[2 * p + 1] += -acc[2 * p] * s + acc[2 * p + 1] * c;
                                }
                            }
                        }
                    }
                }
            };
        });
}

namespace {

// Flattens [B,T,V] or [R,V] logits to (rows, vocab).
std::pair<int64_t, int> logits_rows(const Tensor& logits, const char* who) {
    if (logits.ndim() == 2) return {logits.dim(0), logits.dim(1)};
    if (logits.ndim() == 3)
        return {static_cast<int64_t>(logits.dim(0)) * logits.dim(1), logits.dim(2)};
    throw DimensionError(std::string(who) + ": expected 2-D or 3-D logits, got " +
                         shape_str(logits.shape()));
}

} // namespace

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index) {
    auto [rows, vocab] = logits_rows(logits, "softmax_cross_entropy");
    if (static_cast<int64_t>(targets.size()) != rows)
        throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(rows) + " positions");
    int64_t n_valid = 0;
    for (int tgt : targets) {
        if (tgt == ignore_index) continue;
        if (tgt < 0 || tgt >= vocab)
            throw ValueError("softmax_cross_entropy: target " + std::to_string(tgt) +
                             " out of range [0, " + std::to_string(vocab) + ")");
        ++n_valid;
    }
    if (n_valid == 0) throw ValueError("softmax_cross_entropy: empty loss (all positions ignored)");

    // softmax probabilities are kept for the backward pass; the scalar
    // reduction runs serially afterwards so the sum order is fixed
    std::vector<double> probs(static_cast<size_t>(rows) * vocab);
    const bool par = rows * vocab >= kParElems;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < rows; ++i) {
        const double* li = logits.values().data() + i * vocab;
        double* pi = probs.data() + i * vocab;
        double mx = li[0];
        for (int j = 1; j < vocab; ++j) mx = std::max(mx, li[j]);
        double z = 0.0;
        for (int j = 0; j < vocab; ++j) {
            pi[j] = std::exp(li[j] - mx);
            z += pi[j];
        }
        const double inv = 1.0 / z;
        for (int j = 0; j < vocab; ++j) pi[j] *= inv;
    }
    double loss = 0.0;
    for (int64_t i = 0; i < rows; ++i)
        if (targets[static_cast<size_t>(i)] != ignore_index)
            loss -= std::log(probs[static_cast<size_t>(i * vocab + targets[static_cast<size_t>(i)])]);
    loss /= static_cast<double>(n_valid);

    std::vector<int> tgt(targets.begin(), targets.end());
    return OpBuilder::op("softmax_cross_entropy", {}, {loss}, {logits},
                         [probs = std::move(probs), tgt = std::move(tgt), rows = rows,
                          vocab = vocab, ignore_index, n_valid, par](TensorImpl* o) {
        TensorImpl* il = o->parents[0].get();
        return [o, il, probs, tgt, rows, vocab, ignore_index, n_valid, par] {
            if (!il->requires_grad) return;
            const double g = grad_of(o)[0] / static_cast<double>(n_valid);
            auto& gl = il->grad_buf();
#pragma omp parallel for schedule(static) if (par)
            for (int64_t i = 0; i < rows; ++i) {
                if (tgt[static_cast<size_t>(i)] == ignore_index) continue;
                const double* pi = probs.data() + i * vocab;
                double* gi = gl.data() + i * vocab;
                for (int j = 0; j < vocab; ++j) gi[j] += g * pi[j];
                gi[tgt[static_cast<size_t>(i)]] -= g;
            }
        };
    });
}

Tensor kl_divergence_logits(const Tensor& teacher_logits, const Tensor& student_logits,
                            std::span<const uint8_t> include) {
    if (teacher_logits.shape() != student_logits.shape())
        throw DimensionError("kl_divergence_logits: shape mismatch, " +
                             shape_str(teacher_logits.shape()) + " vs " +
                             shape_str(student_logits.shape()));
    auto [rows, vocab] = logits_rows(student_logits, "kl_divergence_logits");
    if (!include.empty() && static_cast<int64_t>(include.size()) != rows)
        throw DimensionError("kl_divergence_logits: include mask length " +
                             std::to_string(include.size()) + " for " + std::to_string(rows) +
                             " positions");

    auto row_softmax = [vocab = vocab](const double* l, double* p) {
        double mx = l[0];
        for (int j = 1; j < vocab; ++j) mx = std::max(mx, l[j]);
        double z = 0.0;
        for (int j = 0; j < vocab; ++j) {
            p[j] = std::exp(l[j] - mx);
            z += p[j];
        }
        const double inv = 1.0 / z;
        for (int j = 0; j < vocab; ++j) p[j] *= inv;
    };

    int64_t n_inc = 0;
    for (int64_t i = 0; i < rows; ++i)
        if (include.empty() || include[static_cast<size_t>(i)]) ++n_inc;
    if (n_inc == 0) throw ValueError("kl_divergence_logits: empty loss (all positions masked)");

    std::vector<double> pt(static_cast<size_t>(rows) * vocab), ps(static_cast<size_t>(rows) * vocab);
    std::vector<double> row_kl(static_cast<size_t>(rows), 0.0);
    const bool par = rows * vocab >= kParElems;
#pragma omp parallel for schedule(static) if (par)
    for (int64_t i = 0; i < rows; ++i) {
        if (!include.empty() && !include[static_cast<size_t>(i)]) continue;
        row_softmax(teacher_logits.values().data() + i * vocab, pt.data() + i * vocab);
        row_softmax(student_logits.values().data() + i * vocab, ps.data() + i * vocab);
        const double* t = pt.data() + i * vocab;
        const double* s = ps.data() + i * vocab;
        double acc = 0.0;
        for (int j = 0; j < vocab; ++j)
            if (t[j] > 0.0) acc += t[j] * (std::log(t[j]) - std::log(s[j]));
        row_kl[static_cast<size_t>(i)] = acc;
    }
    double loss = 0.0;
    for (double v : row_kl) loss += v;
    loss /= static_cast<double>(n_inc);

    std::vector<uint8_t> inc(include.begin(), include.end());
    // gradient flows into the student only; the teacher enters as data
    return OpBuilder::op("kl_divergence_logits", {}, {loss}, {student_logits},
                         [pt = std::move(pt), ps = std::move(ps), inc = std::move(inc),
                          rows = rows, vocab = vocab, n_inc, par](TensorImpl* o) {
        TensorImpl* is = o->parents[0].get();
        return [o, is, pt, ps, inc, rows, vocab, n_inc, par] {
            if (!is->requires_grad) return;
            const double g = grad_of(o)[0] / static_cast<double>(n_inc);
            auto& gs = is->grad_buf();
#pragma omp parallel for schedule(static) if (par)
            for (int64_t i = 0; i < rows; ++i) {
                if (!inc.empty() && !inc[static_cast<size_t>(i)]) continue;
                const double* t = pt.data() + i * vocab;
                const double* s = ps.data() + i * vocab;
                double* gi = gs.data() + i * vocab;
                for (int j = 0; j < vocab; ++j) gi[j] += g * (s[j] - t[j]);
            }
        };
    });
}

} // namespace deltac
