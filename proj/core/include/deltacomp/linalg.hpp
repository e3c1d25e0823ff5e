#pragma once

#include "deltacomp/tensor.hpp"

namespace deltac {

struct SvdResult {
    Tensor u; // [M, r], orthonormal columns
    Tensor s; // [r], non-negative, non-increasing
    Tensor v; // [N, r], orthonormal columns
};

struct QrResult {
    Tensor q; // [M, k], orthonormal columns, k = min(M, N)
    Tensor r; // [k, N], upper triangular
};

// Best rank-r approximation factors of a finite 2-D matrix via one-sided
// Jacobi (sweep tolerance 1e-12, at most 60 sweeps). Ties in singular values
// are resolved by a final stable sort on (value, column index).
SvdResult truncated_svd(const Tensor& w, int rank);

// Householder QR. Rank-deficient input is fine; R may carry zero diagonal.
QrResult qr_decompose(const Tensor& w);

} // namespace deltac
