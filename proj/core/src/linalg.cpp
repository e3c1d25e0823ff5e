#include "deltacomp/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace deltac {

namespace {

constexpr double kJacobiTol = 1e-12;
constexpr int kMaxSweeps = 60;

void require_finite_2d(const Tensor& w, const char* who) {
    if (w.ndim() != 2)
        throw DimensionError(std::string(who) + ": expected 2-D matrix, got " +
                             shape_str(w.shape()));
    for (double v : w.values())
        if (!std::isfinite(v))
            throw ValueError(std::string(who) + ": input contains non-finite values");
}

// Column-major working copy so Jacobi rotations touch contiguous memory.
struct ColMat {
    int rows = 0, cols = 0;
    std::vector<double> a; // column-major

    ColMat(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}

    double* col(int j) { return a.data() + static_cast<size_t>(j) * rows; }
    const double* col(int j) const { return a.data() + static_cast<size_t>(j) * rows; }

    static ColMat from_row_major(const std::vector<double>& v, int r, int c) {
        ColMat m(r, c);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                m.col(j)[i] = v[static_cast<size_t>(i) * c + j];
        return m;
    }
};

double col_dot(const double* x, const double* y, int n) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += x[i] * y[i];
    return acc;
}

// One-sided Jacobi on a tall (rows >= cols) matrix: orthogonalizes the
// columns of `a` while accumulating rotations into `v` (cols x cols).
void jacobi_orthogonalize(ColMat& a, ColMat& v) {
    const int n = a.cols;
    for (int j = 0; j < n; ++j) v.col(j)[j] = 1.0;

    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        double worst = 0.0;
        for (int i = 0; i < n - 1; ++i) {
            for (int j = i + 1; j < n; ++j) {
                double* ci = a.col(i);
                double* cj = a.col(j);
                const double alpha = col_dot(ci, ci, a.rows);
                const double beta = col_dot(cj, cj, a.rows);
                const double gamma = col_dot(ci, cj, a.rows);
                const double denom = std::sqrt(alpha * beta);
                if (denom == 0.0) continue;
                const double off = std::abs(gamma) / denom;
                worst = std::max(worst, off);
                if (off <= kJacobiTol) continue;

                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (int k = 0; k < a.rows; ++k) {
                    const double x = ci[k], y = cj[k];
                    ci[k] = c * x - s * y;
                    cj[k] = s * x + c * y;
                }
                double* vi = v.col(i);
                double* vj = v.col(j);
                for (int k = 0; k < n; ++k) {
                    const double x = vi[k], y = vj[k];
                    vi[k] = c * x - s * y;
                    vj[k] = s * x + c * y;
                }
            }
        }
        if (worst <= kJacobiTol) break;
    }
}

// Replaces zero-norm columns of `u` with basis vectors orthogonalized
// against the existing columns, keeping U orthonormal even for
// rank-deficient input.
void complete_orthonormal(ColMat& u, const std::vector<int>& zero_cols) {
    if (zero_cols.empty()) return;
    const int m = u.rows;
    int next_basis = 0;
    for (int jz : zero_cols) {
        double* cz = u.col(jz);
        while (true) {
            if (next_basis >= m)
                throw ValueError("svd: unable to complete orthonormal basis");
            std::fill(cz, cz + m, 0.0);
            cz[next_basis++] = 1.0;
            for (int j = 0; j < u.cols; ++j) {
                if (j == jz) continue;
                const double d = col_dot(cz, u.col(j), m);
                if (d != 0.0) {
                    const double* cj = u.col(j);
                    for (int k = 0; k < m; ++k) cz[k] -= d * cj[k];
                }
            }
            const double nrm = std::sqrt(col_dot(cz, cz, m));
            if (nrm > 0.5) {
                for (int k = 0; k < m; ++k) cz[k] /= nrm;
                break;
            }
        }
    }
}

} // namespace

SvdResult truncated_svd(const Tensor& w, int rank) {
    require_finite_2d(w, "truncated_svd");
    const int m = w.dim(0), n = w.dim(1);
    const int kmin = std::min(m, n);
    if (rank < 1 || rank > kmin)
        throw ValueError("truncated_svd: rank " + std::to_string(rank) + " out of range [1, " +
                         std::to_string(kmin) + "] for " + shape_str(w.shape()));

    // Work on the tall orientation; swap factors back afterwards.
    const bool transposed = m < n;
    const int tm = transposed ? n : m; // rows of the tall matrix
    const int tn = transposed ? m : n;

    ColMat a(tm, tn);
    if (!transposed) {
        a = ColMat::from_row_major(w.values(), m, n);
    } else {
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                a.col(i)[j] = w.values()[static_cast<size_t>(i) * n + j];
    }

    ColMat v(tn, tn);
    jacobi_orthogonalize(a, v);

    std::vector<double> sigma(static_cast<size_t>(tn));
    std::vector<int> zero_cols;
    for (int j = 0; j < tn; ++j) {
        const double nrm = std::sqrt(col_dot(a.col(j), a.col(j), tm));
        sigma[static_cast<size_t>(j)] = nrm;
        if (nrm > 0.0) {
            double* cj = a.col(j);
            for (int k = 0; k < tm; ++k) cj[k] /= nrm;
        }
    }

    // Stable sort by value descending keeps column order on ties.
    std::vector<int> order(static_cast<size_t>(tn));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
        return sigma[static_cast<size_t>(x)] > sigma[static_cast<size_t>(y)];
    });

    ColMat us(tm, tn), vs(tn, tn);
    std::vector<double> ss(static_cast<size_t>(tn));
    for (int j = 0; j < tn; ++j) {
        const int src = order[static_cast<size_t>(j)];
        ss[static_cast<size_t>(j)] = sigma[static_cast<size_t>(src)];
        std::copy_n(a.col(src), tm, us.col(j));
        std::copy_n(v.col(src), tn, vs.col(j));
        if (ss[static_cast<size_t>(j)] == 0.0) zero_cols.push_back(j);
    }
    complete_orthonormal(us, zero_cols);

    auto to_tensor = [](const ColMat& c, int cols) {
        Tensor t = Tensor::zeros({c.rows, cols});
        auto& out = t.values_mut();
        for (int i = 0; i < c.rows; ++i)
            for (int j = 0; j < cols; ++j)
                out[static_cast<size_t>(i) * cols + j] = c.col(j)[i];
        return t;
    };

    SvdResult r;
    r.s = Tensor::from_data({rank}, std::vector<double>(ss.begin(), ss.begin() + rank));
    if (!transposed) {
        r.u = to_tensor(us, rank);
        r.v = to_tensor(vs, rank);
    } else {
        r.u = to_tensor(vs, rank);
        r.v = to_tensor(us, rank);
    }
    return r;
}

QrResult qr_decompose(const Tensor& w) {
    require_finite_2d(w, "qr_decompose");
    const int m = w.dim(0), n = w.dim(1);
    const int k = std::min(m, n);

    // Row-major working copy; Householder vectors stored per column.
    std::vector<double> a = w.values();
    std::vector<std::vector<double>> hh(static_cast<size_t>(k));
    auto at = [&](int i, int j) -> double& { return a[static_cast<size_t>(i) * n + j]; };

    for (int j = 0; j < k; ++j) {
        double norm2 = 0.0;
        for (int i = j; i < m; ++i) norm2 += at(i, j) * at(i, j);
        const double norm = std::sqrt(norm2);
        if (norm == 0.0) continue; // column already zero below and at the diagonal

        const double x0 = at(j, j);
        const double alpha = x0 >= 0.0 ? -norm : norm;
        std::vector<double> vvec(static_cast<size_t>(m - j));
        vvec[0] = x0 - alpha;
        for (int i = j + 1; i < m; ++i) vvec[static_cast<size_t>(i - j)] = at(i, j);
        double vnorm2 = 0.0;
        for (double vv : vvec) vnorm2 += vv * vv;
        if (vnorm2 == 0.0) continue;
        const double beta = 2.0 / vnorm2;

        // apply H = I - beta v v^T to the trailing block
        for (int jj = j; jj < n; ++jj) {
            double dot = 0.0;
            for (int i = j; i < m; ++i) dot += vvec[static_cast<size_t>(i - j)] * at(i, jj);
            dot *= beta;
            for (int i = j; i < m; ++i) at(i, jj) -= dot * vvec[static_cast<size_t>(i - j)];
        }
        hh[static_cast<size_t>(j)] = std::move(vvec);
    }

    // Thin Q: apply the reflectors to the first k columns of I, in reverse.
    Tensor q = Tensor::zeros({m, k});
    auto& qv = q.values_mut();
    for (int j = 0; j < k; ++j) qv[static_cast<size_t>(j) * k + j] = 1.0;
    for (int j = k - 1; j >= 0; --j) {
        const auto& vvec = hh[static_cast<size_t>(j)];
        if (vvec.empty()) continue;
        double vnorm2 = 0.0;
        for (double vv : vvec) vnorm2 += vv * vv;
        const double beta = 2.0 / vnorm2;
        for (int jj = 0; jj < k; ++jj) {
            double dot = 0.0;
            for (int i = j; i < m; ++i)
                dot += vvec[static_cast<size_t>(i - j)] * qv[static_cast<size_t>(i) * k + jj];
            dot *= beta;
            for (int i = j; i < m; ++i)
                qv[static_cast<size_t>(i) * k + jj] -= dot * vvec[static_cast<size_t>(i - j)];
        }
    }

    Tensor r = Tensor::zeros({k, n});
    auto& rv = r.values_mut();
    for (int i = 0; i < k; ++i)
        for (int j = i; j < n; ++j) rv[static_cast<size_t>(i) * n + j] = at(i, j);

    // fix signs so the R diagonal is non-negative
    for (int j = 0; j < k; ++j) {
        if (rv[static_cast<size_t>(j) * n + j] >= 0.0) continue;
        for (int jj = j; jj < n; ++jj) rv[static_cast<size_t>(j) * n + jj] = -rv[static_cast<size_t>(j) * n + jj];
        for (int i = 0; i < m; ++i) qv[static_cast<size_t>(i) * k + j] = -qv[static_cast<size_t>(i) * k + j];
    }

    return {q, r};
}

} // namespace deltac
