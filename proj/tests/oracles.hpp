// Test-only oracles, independent of the library paths they check:
// finite-difference gradients, a two-sided Jacobi eigensolver for Gram
// matrices, and a bisection normal-quantile solver.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "deltacomp/tensor.hpp"

namespace oracles {

// Central finite differences against autograd. Returns the worst
// rel-ish error over (sampled) coordinates of every input.
inline double fd_max_err(std::vector<deltac::Tensor> inputs,
                         const std::function<deltac::Tensor()>& loss_fn, double eps = 1e-5,
                         int max_coords_per_input = 64, uint64_t seed = 123) {
    using deltac::Tensor;
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    Tensor loss = loss_fn();
    loss.backward();
    std::vector<std::vector<double>> grads;
    for (auto& t : inputs) grads.push_back(t.grad());

    deltac::Rng rng(seed);
    double worst = 0.0;
    for (size_t ti = 0; ti < inputs.size(); ++ti) {
        auto& t = inputs[ti];
        const int64_t n = t.numel();
        std::vector<int64_t> coords;
        if (n <= max_coords_per_input) {
            for (int64_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            for (int i = 0; i < max_coords_per_input; ++i)
                coords.push_back(static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(n))));
        }
        for (int64_t c : coords) {
            auto& vals = t.values_mut();
            const double keep = vals[static_cast<size_t>(c)];
            double lp, lm;
            {
                deltac::NoGradGuard ng;
                vals[static_cast<size_t>(c)] = keep + eps;
                lp = loss_fn().item();
                vals[static_cast<size_t>(c)] = keep - eps;
                lm = loss_fn().item();
                vals[static_cast<size_t>(c)] = keep;
            }
            const double fd = (lp - lm) / (2.0 * eps);
            const double g = grads[ti][static_cast<size_t>(c)];
            const double err = std::abs(g - fd) / (std::abs(fd) + 1e-6);
            worst = std::max(worst, err);
        }
    }
    for (auto& t : inputs) {
        t.zero_grad();
        t.set_requires_grad(false);
    }
    return worst;
}

// Eigenvalues of a symmetric matrix by classic two-sided cyclic Jacobi,
// descending. Used to cross-check singular values via W^T W.
inline std::vector<double> symmetric_eigenvalues(std::vector<double> a, int n) {
    auto at = [&](int i, int j) -> double& { return a[static_cast<size_t>(i) * n + j]; };
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) off += at(i, j) * at(i, j);
        if (off < 1e-26) break;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                if (std::abs(at(p, q)) < 1e-300) continue;
                const double theta = (at(q, q) - at(p, p)) / (2.0 * at(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(1.0 + theta * theta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = at(k, p), akq = at(k, q);
                    at(k, p) = c * akp - s * akq;
                    at(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = at(p, k), aqk = at(q, k);
                    at(p, k) = c * apk - s * aqk;
                    at(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> eig(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) eig[static_cast<size_t>(i)] = at(i, i);
    std::sort(eig.begin(), eig.end(), std::greater<double>());
    return eig;
}

// Singular values of W (descending) through the Gram matrix W^T W.
inline std::vector<double> gram_singular_values(const deltac::Tensor& w) {
    const int m = w.dim(0), n = w.dim(1);
    std::vector<double> gram(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int k = 0; k < m; ++k)
                acc += w.values()[static_cast<size_t>(k) * n + i] *
                       w.values()[static_cast<size_t>(k) * n + j];
            gram[static_cast<size_t>(i) * n + j] = acc;
        }
    std::vector<double> eig = symmetric_eigenvalues(std::move(gram), n);
    std::vector<double> sv;
    for (double e : eig) sv.push_back(std::sqrt(std::max(0.0, e)));
    return sv;
}

// Standard-normal quantile by bisection on 0.5 * (1 + erf(x / sqrt(2))).
inline double normal_quantile(double p) {
    double lo = -12.0, hi = 12.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        const double cdf = 0.5 * (1.0 + std::erf(mid / std::sqrt(2.0)));
        if (cdf < p)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

inline double frobenius_sq(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return s;
}

} // namespace oracles
