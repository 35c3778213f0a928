#pragma once

#include <cmath>
#include <string>

#include "erelab/errors.hpp"

namespace erelab {

/// Uniform discretization of [0, T]. All paths, fields and quadratures in the
/// library live on this grid; node i sits at i*T/N with node N pinned to T.
struct TimeGrid {
    double T = 1.0;
    int steps = 2;

    TimeGrid() = default;
    TimeGrid(double horizon, int n_steps) : T(horizon), steps(n_steps) {
        if (!(T > 0.0) || !std::isfinite(T))
            throw DomainError("TimeGrid: horizon must be positive and finite");
        if (steps < 2) throw DomainError("TimeGrid: need at least 2 steps");
    }

    double h() const { return T / steps; }
    int nodes() const { return steps + 1; }

    double node(int i) const { return i >= steps ? T : i * h(); }

    /// Nearest node index for a time value; snaps within a relative tolerance
    /// so evaluating at a node never falls into the neighbouring interval.
    int nearest_node(double t) const {
        double u = t / h();
        int i = static_cast<int>(std::lround(u));
        if (i < 0) i = 0;
        if (i > steps) i = steps;
        return i;
    }

    bool operator==(const TimeGrid& other) const {
        return T == other.T && steps == other.steps;
    }
};

} // namespace erelab
