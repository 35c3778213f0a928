#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "erelab/errors.hpp"
#include "erelab/matrix.hpp"
#include "erelab/problem.hpp"
#include "erelab/time_grid.hpp"

namespace erelab {
namespace mollify {

/// The standard compactly supported bump on [-1, 1] (unnormalized).
inline double bump(double u) {
    if (std::abs(u) >= 1.0) return 0.0;
    return std::exp(1.0 / (u * u - 1.0));
}

/// Quadrature nodes/weights for convolution against the normalized bump;
/// weights sum to one (exactly up to round-off; the difference form below
/// removes even that).
struct Quad {
    std::vector<double> u, w;

    static Quad make(int points = 129) {
        if (points < 9) throw DomainError("mollify::Quad: too few quadrature points");
        Quad q;
        q.u.resize(static_cast<size_t>(points));
        q.w.resize(static_cast<size_t>(points));
        double total = 0.0;
        for (int i = 0; i < points; ++i) {
            q.u[static_cast<size_t>(i)] = -1.0 + 2.0 * i / (points - 1);
            q.w[static_cast<size_t>(i)] = bump(q.u[static_cast<size_t>(i)]);
            total += q.w[static_cast<size_t>(i)];
        }
        for (auto& wi : q.w) wi /= total;
        return q;
    }
};

namespace detail {

/// Convolution value at t of the boundary-extended path (frozen outside
/// [lo, hi]) against the eps-scaled bump. Written as g(t) plus a convex
/// combination of differences so constants are reproduced exactly and the
/// [min, max] envelope is preserved to round-off.
template <class EvalFn>
Mat smoothed_value(EvalFn&& g, double t, double eps, double lo, double hi, const Quad& q) {
    auto clamp = [&](double x) { return x < lo ? lo : (x > hi ? hi : x); };
    Mat base = g(clamp(t));
    Mat acc = base;
    for (size_t i = 0; i < q.u.size(); ++i) {
        const double x = clamp(t - eps * q.u[i]);
        acc += q.w[i] * (g(x) - base);
    }
    return acc;
}

} // namespace detail

/// Mollify a (monotone, bounded) symmetric matrix path by convolving its
/// frozen-boundary extension with the bump, sampled onto the refined grid.
/// Preserves the delta*I..cap envelope and monotonicity; constants map to
/// themselves exactly.
inline TimeEntry mollify_matrix_path(const TimeEntry& g, double eps, const TimeGrid& grid,
                                     int quad_points = 129) {
    if (!(eps > 0.0)) throw DomainError("mollify_matrix_path: eps must be positive");
    const Quad q = Quad::make(quad_points);
    const int refined = 2 * grid.steps;
    const double hh = grid.T / refined;
    std::vector<double> nodes(static_cast<size_t>(refined + 1));
    std::vector<Mat> vals(static_cast<size_t>(refined + 1));
    for (int i = 0; i <= refined; ++i) {
        const double t = i == refined ? grid.T : i * hh;
        nodes[static_cast<size_t>(i)] = t;
        vals[static_cast<size_t>(i)] = mat::sym(detail::smoothed_value(
            [&](double x) { return g(x); }, t, eps, 0.0, grid.T, q));
    }
    return TimeEntry::table(std::move(nodes), std::move(vals));
}

/// Mollify a two-time kernel in its first argument: for each fixed s the
/// extension freezes at q(0, s) below t = 0 and at q(s, s) above t = s, then
/// convolves in t. Order in t and the caps survive; t-independent kernels are
/// reproduced exactly.
inline KernelEntry mollify_kernel(const KernelEntry& k, double eps, const TimeGrid& grid,
                                  int quad_points = 129) {
    if (!(eps > 0.0)) throw DomainError("mollify_kernel: eps must be positive");
    const Quad q = Quad::make(quad_points);
    // refined tabulation; at large N fall back to node resolution to bound
    // the triangle's footprint
    const int steps = grid.steps <= 300 ? 2 * grid.steps : grid.steps;
    const TimeGrid tab_grid(grid.T, steps);
    const int cnt = tab_grid.nodes();
    std::vector<Mat> tri;
    tri.reserve(static_cast<size_t>(cnt) * (cnt + 1) / 2);
    for (int i = 0; i < cnt; ++i) {
        const double t = tab_grid.node(i);
        for (int j = i; j < cnt; ++j) {
            const double s = tab_grid.node(j);
            tri.push_back(mat::sym(detail::smoothed_value(
                [&](double x) { return k(x, s); }, t, eps, 0.0, s, q)));
        }
    }
    // table2 stores the full row-major triangle indexed (i, j >= i)
    return KernelEntry::table2(tab_grid, std::move(tri));
}

/// Apply the smoothing pipeline to the weight data of an instance (kernels in
/// t, terminal weight paths); coefficients are left as supplied.
inline ProblemInstance mollify_instance(const ProblemInstance& p, double eps,
                                        int quad_points = 129) {
    ProblemInstance out = p;
    out.weights.Q = mollify_kernel(p.weights.Q, eps, p.grid, quad_points);
    out.weights.R = mollify_kernel(p.weights.R, eps, p.grid, quad_points);
    out.weights.M = mollify_kernel(p.weights.M, eps, p.grid, quad_points);
    out.weights.N = mollify_kernel(p.weights.N, eps, p.grid, quad_points);
    out.weights.G1 = mollify_matrix_path(p.weights.G1, eps, p.grid, quad_points);
    out.weights.G2 = mollify_matrix_path(p.weights.G2, eps, p.grid, quad_points);
    return out;
}

} // namespace mollify
} // namespace erelab
