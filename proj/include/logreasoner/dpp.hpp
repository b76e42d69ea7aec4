#pragma once
// Cosine-Gram DPP kernel construction and fast greedy MAP subset selection.
//
// The kernel is the Gram matrix of L2-normalized embedding rows plus a small
// diagonal jitter, so it is symmetric PSD by construction. Greedy MAP picks,
// at each step, the item with the largest marginal log-determinant gain,
// maintained through incremental Cholesky-style residual updates instead of
// recomputing determinants.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace logreasoner {

struct ZeroVectorError : std::runtime_error {
    explicit ZeroVectorError(const std::string& what) : std::runtime_error(what) {}
};
struct DimensionMismatchError : std::runtime_error {
    explicit DimensionMismatchError(const std::string& what) : std::runtime_error(what) {}
};
struct BudgetExceededError : std::runtime_error {
    explicit BudgetExceededError(const std::string& what) : std::runtime_error(what) {}
};
// A pivot fell below the floor before the budget was filled; the caller may
// lower k or raise the jitter.
struct NumericalBreakdownError : std::runtime_error {
    explicit NumericalBreakdownError(const std::string& what) : std::runtime_error(what) {}
};

struct Kernel {
    std::size_t n = 0;
    std::vector<double> entries;  // dense row-major n x n, symmetric

    double at(std::size_t i, std::size_t j) const { return entries[i * n + j]; }
    double& at(std::size_t i, std::size_t j) { return entries[i * n + j]; }
};

struct Selection {
    std::vector<std::size_t> indices;  // selection order, all distinct
    std::vector<double> gains;         // per-step marginal log-det gains, non-increasing
};

inline Kernel build_kernel(const std::vector<std::vector<double>>& vectors, double jitter) {
    if (vectors.empty()) throw DimensionMismatchError("build_kernel: empty vector list");
    if (jitter < 0.0) throw std::invalid_argument("build_kernel: negative jitter");
    const std::size_t n = vectors.size();
    const std::size_t dim = vectors.front().size();
    if (dim == 0) throw DimensionMismatchError("build_kernel: zero-dimensional vectors");

    std::vector<std::vector<double>> unit(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (vectors[i].size() != dim)
            throw DimensionMismatchError("build_kernel: vector " + std::to_string(i) + " has dimension " +
                                         std::to_string(vectors[i].size()) + ", expected " +
                                         std::to_string(dim));
        double norm_sq = 0.0;
        for (double x : vectors[i]) norm_sq += x * x;
        if (norm_sq <= 0.0)
            throw ZeroVectorError("build_kernel: vector " + std::to_string(i) + " has zero norm");
        double inv = 1.0 / std::sqrt(norm_sq);
        unit[i].resize(dim);
        for (std::size_t d = 0; d < dim; ++d) unit[i][d] = vectors[i][d] * inv;
    }

    Kernel kernel;
    kernel.n = n;
    kernel.entries.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double dot = 0.0;
            for (std::size_t d = 0; d < dim; ++d) dot += unit[i][d] * unit[j][d];
            kernel.at(i, j) = dot;
            kernel.at(j, i) = dot;
        }
        kernel.at(i, i) += jitter;
    }
    return kernel;
}

namespace detail {
constexpr double kPivotFloor = 1e-12;
}

inline Selection dpp_select(const Kernel& kernel, std::size_t k) {
    const std::size_t n = kernel.n;
    if (k == 0) throw std::invalid_argument("dpp_select: k must be positive");
    if (k > n)
        throw BudgetExceededError("dpp_select: budget " + std::to_string(k) + " exceeds item count " +
                                  std::to_string(n));

    // residual[i] is the squared Cholesky pivot item i would contribute if
    // selected next; its log is exactly the marginal log-det gain.
    std::vector<double> residual(n);
    for (std::size_t i = 0; i < n; ++i) residual[i] = kernel.at(i, i);
    std::vector<std::vector<double>> factor(n);  // per-item Cholesky row, one entry per step
    std::vector<char> picked(n, 0);

    Selection sel;
    sel.indices.reserve(k);
    sel.gains.reserve(k);

    for (std::size_t step = 0; step < k; ++step) {
        std::size_t best = n;
        for (std::size_t i = 0; i < n; ++i) {
            if (picked[i]) continue;
            if (best == n || residual[i] > residual[best]) best = i;  // ties keep lowest index
        }
        if (residual[best] < detail::kPivotFloor)
            throw NumericalBreakdownError("dpp_select: pivot " + std::to_string(residual[best]) +
                                          " below floor at step " + std::to_string(step + 1) +
                                          " of " + std::to_string(k));
        sel.indices.push_back(best);
        sel.gains.push_back(std::log(residual[best]));
        picked[best] = 1;
        if (step + 1 == k) break;

        const double pivot_root = std::sqrt(residual[best]);
        const std::vector<double>& row_best = factor[best];
        for (std::size_t i = 0; i < n; ++i) {
            if (picked[i]) continue;
            double dot = 0.0;
            for (std::size_t t = 0; t < row_best.size(); ++t) dot += row_best[t] * factor[i][t];
            double e = (kernel.at(best, i) - dot) / pivot_root;
            factor[i].push_back(e);
            residual[i] -= e * e;
        }
    }
    return sel;
}

}  // namespace logreasoner
