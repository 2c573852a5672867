#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "ape/common.hpp"

namespace ape {

/// Dense row-major matrix, just big enough for N x N distance tables.
template <typename T>
struct Mat {
    int rows = 0, cols = 0;
    std::vector<T> v;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), v(std::size_t(r) * c, T(0)) {}

    T& at(int i, int j) { return v[std::size_t(i) * cols + j]; }
    T at(int i, int j) const { return v[std::size_t(i) * cols + j]; }
};

using MatF = Mat<float>;
using MatD = Mat<double>;

/// d_ij = ||A_i - B_j||. The squared term is clamped at zero before the root
/// so rounding can never produce NaN.
template <typename T>
Mat<T> pairwise_distances(const std::vector<vec3<T>>& A, const std::vector<vec3<T>>& B) {
    if (A.size() != B.size())
        throw std::invalid_argument("pairwise_distances: row counts differ");
    const int n = int(A.size());
    Mat<T> d(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const vec3<T> diff = A[i] - B[j];
            const T s = std::max(T(0), dot(diff, diff));
            d.at(i, j) = std::sqrt(s);
        }
    return d;
}

/// (1/N^2) sum_ij (d_pred_ij - d_true_ij)^2, diagonal included.
template <typename T>
T loss_dist(const Mat<T>& d_pred, const Mat<T>& d_true) {
    if (d_pred.rows != d_true.rows || d_pred.cols != d_true.cols)
        throw std::invalid_argument("loss_dist: shape mismatch");
    T acc = 0;
    for (std::size_t i = 0; i < d_pred.v.size(); ++i) {
        const T e = d_pred.v[i] - d_true.v[i];
        acc += e * e;
    }
    return acc / (T(d_pred.rows) * T(d_pred.cols));
}

/// loss_dist + lambda * (1/N) * sum_i d_pred_ii^2.
template <typename T>
T loss_total(const Mat<T>& d_pred, const Mat<T>& d_true, T lambda) {
    if (lambda < T(0)) throw std::invalid_argument("loss_total: lambda must be >= 0");
    if (d_pred.rows != d_pred.cols)
        throw std::invalid_argument("loss_total: matrix must be square");
    T equiv = 0;
    for (int i = 0; i < d_pred.rows; ++i) {
        const T d = d_pred.at(i, i);
        equiv += d * d;
    }
    return loss_dist(d_pred, d_true) + lambda * equiv / T(d_pred.rows);
}

enum class PairingMode { naive, positive };

template <typename T>
struct LossResult {
    T total = 0;
    T dist = 0;
    T equiv = 0; // unweighted (1/N) sum_i d_ii^2; 0 in naive mode
    T mean_dpred_ii = 0;
    std::vector<vec3<T>> grad_a;
    std::vector<vec3<T>> grad_b; // empty in naive mode
};

/// Forward + analytic gradient of the full objective.
/// Forward distances use the exact (clamped) root; the backward pass divides by
/// sqrt(s + 1e-12) instead, which realizes subgradient 0 at coincident points
/// without bending the loss value itself.
template <typename T>
LossResult<T> loss_with_grad(const std::vector<vec3<T>>& A, const std::vector<vec3<T>>& B,
                             const Mat<T>& d_true, T lambda, PairingMode mode) {
    if (lambda < T(0)) throw std::invalid_argument("loss_with_grad: lambda must be >= 0");
    const bool naive = mode == PairingMode::naive;
    const std::vector<vec3<T>>& Bv = naive ? A : B;
    if (A.size() != Bv.size())
        throw std::invalid_argument("loss_with_grad: row counts differ");
    const int n = int(A.size());
    if (n < 2) throw std::invalid_argument("loss_with_grad: need N >= 2");
    if (d_true.rows != n || d_true.cols != n)
        throw std::invalid_argument("loss_with_grad: d_true shape mismatch");

    LossResult<T> out;
    out.grad_a.assign(std::size_t(n), vec3<T>{0, 0, 0});
    if (!naive) out.grad_b.assign(std::size_t(n), vec3<T>{0, 0, 0});

    const T inv_n2 = T(1) / (T(n) * T(n));
    const T inv_n = T(1) / T(n);
    const T eps = T(1e-12);

    T dist_acc = 0, equiv_acc = 0, diag_acc = 0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const vec3<T> diff = A[i] - Bv[j];
            const T s = std::max(T(0), dot(diff, diff));
            const T d = std::sqrt(s);
            const T e = d - d_true.at(i, j);
            dist_acc += e * e;

            // w = dL/dd for this entry
            T w = T(2) * inv_n2 * e;
            if (!naive && i == j) {
                equiv_acc += s;
                diag_acc += d;
            }
            const T inv_d = T(1) / std::sqrt(s + eps);
            const vec3<T> g = diff * (w * inv_d);
            out.grad_a[std::size_t(i)] = out.grad_a[std::size_t(i)] + g;
            if (naive)
                out.grad_a[std::size_t(j)] = out.grad_a[std::size_t(j)] - g;
            else
                out.grad_b[std::size_t(j)] = out.grad_b[std::size_t(j)] - g;
        }
        if (!naive) {
            // the equivariance term differentiates the squared distance, which
            // is smooth, so no epsilon is needed here
            const vec3<T> diff = A[i] - Bv[i];
            const vec3<T> g = diff * (T(2) * lambda * inv_n);
            out.grad_a[std::size_t(i)] = out.grad_a[std::size_t(i)] + g;
            out.grad_b[std::size_t(i)] = out.grad_b[std::size_t(i)] - g;
        }
    }

    out.dist = dist_acc * inv_n2;
    out.equiv = naive ? T(0) : equiv_acc * inv_n;
    out.mean_dpred_ii = naive ? T(0) : diag_acc * inv_n;
    out.total = out.dist + (naive ? T(0) : lambda * out.equiv);
    return out;
}

/// Target distance table from (normalized) coordinates.
template <typename T>
Mat<T> distance_targets(const std::vector<vec3<T>>& points) {
    return pairwise_distances(points, points);
}

} // namespace ape
