#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "erelab/errors.hpp"
#include "erelab/matrix.hpp"
#include "erelab/time_grid.hpp"

namespace erelab {

/// A matrix-valued field sampled on (a suffix of) the time grid: one matrix of
/// fixed shape per node, nodes first_node..grid.steps. Off-node evaluation uses
/// 4-point Lagrange interpolation (exact at nodes), which keeps the RK4
/// integrators fourth-order when they sample tabulated fields at stage times.
struct MatrixPath {
    TimeGrid grid;
    int first_node = 0;
    std::vector<Mat> values;

    MatrixPath() = default;
    MatrixPath(const TimeGrid& g, int first, std::vector<Mat> vals)
        : grid(g), first_node(first), values(std::move(vals)) {
        if (first_node < 0 || first_node > grid.steps)
            throw DomainError("MatrixPath: first node out of range");
        if (static_cast<int>(values.size()) != grid.steps - first_node + 1)
            throw DomainError("MatrixPath: node count mismatch");
    }

    static MatrixPath zero(const TimeGrid& g, int rows, int cols, int first = 0) {
        std::vector<Mat> vals(g.steps - first + 1, Mat::Zero(rows, cols));
        return MatrixPath(g, first, std::move(vals));
    }

    int last_node() const { return grid.steps; }
    int rows() const { return values.empty() ? 0 : static_cast<int>(values.front().rows()); }
    int cols() const { return values.empty() ? 0 : static_cast<int>(values.front().cols()); }

    /// Value at absolute node index i (i >= first_node).
    const Mat& at(int i) const { return values[static_cast<size_t>(i - first_node)]; }
    Mat& at(int i) { return values[static_cast<size_t>(i - first_node)]; }

    /// Interpolated value at time s (clamped to the path's span).
    Mat eval(double s) const {
        const double h = grid.h();
        double u = s / h;
        const int lo = first_node, hi = grid.steps;
        if (u <= lo) return values.front();
        if (u >= hi) return values.back();

        const int nearest = static_cast<int>(std::lround(u));
        if (std::abs(u - nearest) < 1e-9 && nearest >= lo && nearest <= hi)
            return at(nearest);

        const int span = hi - lo + 1;
        const int pts = span >= 4 ? 4 : span;
        if (pts == 2) {
            const double w = u - lo;
            return (1.0 - w) * at(lo) + w * at(lo + 1);
        }
        int j0 = static_cast<int>(std::floor(u)) - (pts == 4 ? 1 : 0);
        if (j0 < lo) j0 = lo;
        if (j0 + pts - 1 > hi) j0 = hi - (pts - 1);

        Mat out = Mat::Zero(rows(), cols());
        for (int a = 0; a < pts; ++a) {
            double w = 1.0;
            for (int b = 0; b < pts; ++b) {
                if (a == b) continue;
                w *= (u - (j0 + b)) / static_cast<double>(a - b);
            }
            out += w * at(j0 + a);
        }
        return out;
    }

    double max_norm() const {
        double worst = 0.0;
        for (const Mat& v : values) worst = std::max(worst, mat::spectral_norm(v));
        return worst;
    }
};

/// Closed-loop feedback gain Theta sampled on the grid: one k-by-n matrix per
/// node, u(s) = Theta(s) x(s).
struct Strategy {
    MatrixPath gains;

    Strategy() = default;
    explicit Strategy(MatrixPath g) : gains(std::move(g)) {}
    Strategy(const TimeGrid& grid, std::vector<Mat> values)
        : gains(grid, 0, std::move(values)) {}

    static Strategy constant(const TimeGrid& grid, const Mat& g) {
        return Strategy(grid, std::vector<Mat>(static_cast<size_t>(grid.nodes()), g));
    }

    const Mat& at(int i) const { return gains.at(i); }
    Mat& at(int i) { return gains.at(i); }
    Mat operator()(double s) const { return gains.eval(s); }
    const TimeGrid& grid() const { return gains.grid; }

    double sup_norm() const { return gains.max_norm(); }
};

/// Sup over nodes of the spectral norm of the difference; both paths must
/// share grid and span.
inline double sup_distance(const MatrixPath& a, const MatrixPath& b) {
    double worst = 0.0;
    for (int i = a.first_node; i <= a.last_node(); ++i)
        worst = std::max(worst, mat::spectral_norm(a.at(i) - b.at(i)));
    return worst;
}

inline double sup_distance(const Strategy& a, const Strategy& b) {
    return sup_distance(a.gains, b.gains);
}

} // namespace erelab
