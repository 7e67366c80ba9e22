#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>
#include <vector>

#include "dba/tensor.hpp"

namespace dba {

struct SvdResult {
    Tensor u;                       // m x n, columns are left singular vectors
    std::vector<double> singular;   // n values, descending
    Tensor v;                       // n x n, columns are right singular vectors
};

/// One-sided Jacobi SVD for small matrices (m >= n). Columns of a working
/// copy are rotated pairwise until all are mutually orthogonal within tol.
inline SvdResult jacobi_svd(const Tensor& a, double tol = 1e-12, int max_sweeps = 100) {
    require_rank2(a, "jacobi_svd");
    const std::size_t m = a.rows(), n = a.cols();
    if (m < n) throw DimensionError("jacobi_svd: expected rows >= cols, got " + a.shape_string());

    Tensor w = a;
    Tensor v = Tensor::identity(n);

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    alpha += w(i, p) * w(i, p);
                    beta += w(i, q) * w(i, q);
                    gamma += w(i, p) * w(i, q);
                }
                if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double wp = w(i, p);
                    w(i, p) = c * wp - s * w(i, q);
                    w(i, q) = s * wp + c * w(i, q);
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vp = v(i, p);
                    v(i, p) = c * vp - s * v(i, q);
                    v(i, q) = s * vp + c * v(i, q);
                }
            }
        }
        if (!rotated) break;
    }

    SvdResult out;
    out.singular.assign(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        double ss = 0.0;
        for (std::size_t i = 0; i < m; ++i) ss += w(i, j) * w(i, j);
        out.singular[j] = std::sqrt(ss);
    }

    // Sort descending, carrying columns of W and V along.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t x, std::size_t y) { return out.singular[x] > out.singular[y]; });

    Tensor u(m, n);
    Tensor vs(n, n);
    std::vector<double> sv(n);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = order[k];
        sv[k] = out.singular[j];
        const double inv = sv[k] > 0.0 ? 1.0 / sv[k] : 0.0;
        for (std::size_t i = 0; i < m; ++i) u(i, k) = w(i, j) * inv;
        for (std::size_t i = 0; i < n; ++i) vs(i, k) = v(i, j);
    }
    out.u = std::move(u);
    out.v = std::move(vs);
    out.singular = std::move(sv);
    return out;
}

inline std::vector<double> singular_values(const Tensor& a) {
    if (a.rows() >= a.cols()) return jacobi_svd(a).singular;
    return jacobi_svd(transpose(a)).singular;
}

/// Count of singular values above 1e-10 * sigma_max.
inline std::size_t numeric_rank(const Tensor& a) {
    const std::vector<double> sv = singular_values(a);
    if (sv.empty() || sv[0] <= 0.0) return 0;
    const double cutoff = 1e-10 * sv[0];
    std::size_t r = 0;
    for (double s : sv)
        if (s > cutoff) ++r;
    return r;
}

/// Best rank-r factorization of a square matrix: (U_r, S_r, V_r^T) with
/// U_r n x r, S_r r x r diagonal, V_r^T r x n.
inline std::tuple<Tensor, Tensor, Tensor> svd_lowrank_factor(const Tensor& m, std::size_t r) {
    require_rank2(m, "svd_lowrank_factor");
    if (m.rows() != m.cols())
        throw DimensionError("svd_lowrank_factor: expected square input, got " + m.shape_string());
    const std::size_t n = m.rows();
    if (r > n) throw DimensionError("svd_lowrank_factor: rank " + std::to_string(r) + " exceeds size " + std::to_string(n));
    if (r == 0) throw DimensionError("svd_lowrank_factor: rank must be >= 1");

    const SvdResult svd = jacobi_svd(m);
    Tensor ur(n, r);
    Tensor sr(r, r);
    Tensor vrt(r, n);
    for (std::size_t k = 0; k < r; ++k) {
        sr(k, k) = svd.singular[k];
        for (std::size_t i = 0; i < n; ++i) {
            ur(i, k) = svd.u(i, k);
            vrt(k, i) = svd.v(i, k);
        }
    }
    return {std::move(ur), std::move(sr), std::move(vrt)};
}

/// Relative Frobenius error of the rank-r truncation of m.
inline double lowrank_relative_error(const Tensor& m, std::size_t r) {
    auto [u, s, vt] = svd_lowrank_factor(m, r);
    const Tensor rec = matmul(matmul(u, s), vt);
    const double denom = frobenius_norm(m);
    if (denom == 0.0) return 0.0;
    return frobenius_norm(sub(m, rec)) / denom;
}

}  // namespace dba
