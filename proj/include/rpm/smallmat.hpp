#pragma once

#include <cmath>

#include "rpm/tensor.hpp"

// Dense helpers for the small (<= 9x9) matrices of the GP machinery.
namespace rpm::la {

// In-place Cholesky of the lower triangle of a[n,n]; strictly-upper entries
// are ignored and zeroed in the result. Returns false on a nonpositive pivot.
inline bool cholesky_lower_inplace(Tensor& a) {
    const int n = a.dim(0);
    for (int j = 0; j < n; ++j) {
        double s = a.at2(j, j);
        for (int k = 0; k < j; ++k) s -= a.at2(j, k) * a.at2(j, k);
        if (!(s > 0.0) || !std::isfinite(s)) return false;
        const double d = std::sqrt(s);
        a.at2(j, j) = d;
        for (int i = j + 1; i < n; ++i) {
            double v = a.at2(i, j);
            for (int k = 0; k < j; ++k) v -= a.at2(i, k) * a.at2(j, k);
            a.at2(i, j) = v / d;
        }
        for (int i = 0; i < j; ++i) a.at2(i, j) = 0.0;
    }
    return true;
}

// Solves L x = b (lower triangular) for each of the m columns of b[n,m].
inline void trisolve_lower_mat(const Tensor& l, Tensor& b) {
    const int n = l.dim(0);
    const int m = b.dim(1);
    for (int i = 0; i < n; ++i) {
        for (int c = 0; c < m; ++c) {
            double v = b.at2(i, c);
            for (int k = 0; k < i; ++k) v -= l.at2(i, k) * b.at2(k, c);
            b.at2(i, c) = v / l.at2(i, i);
        }
    }
}

// Solves L^T x = b for each column of b[n,m].
inline void trisolve_lower_transposed_mat(const Tensor& l, Tensor& b) {
    const int n = l.dim(0);
    const int m = b.dim(1);
    for (int i = n - 1; i >= 0; --i) {
        for (int c = 0; c < m; ++c) {
            double v = b.at2(i, c);
            for (int k = i + 1; k < n; ++k) v -= l.at2(k, i) * b.at2(k, c);
            b.at2(i, c) = v / l.at2(i, i);
        }
    }
}

// x = A b for a[n,m], b[m].
inline void matvec(const Tensor& a, const double* b, double* x) {
    const int n = a.dim(0);
    const int m = a.dim(1);
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < m; ++j) s += a.at2(i, j) * b[j];
        x[i] = s;
    }
}

}  // namespace rpm::la
