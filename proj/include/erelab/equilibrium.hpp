#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "erelab/errors.hpp"
#include "erelab/matrix.hpp"
#include "erelab/matrix_path.hpp"
#include "erelab/ode_kernel.hpp"
#include "erelab/problem.hpp"

namespace erelab {

/// A priori bound certificates and the observed suprema they dominate.
struct Certificates {
    double cv_bound = 0.0;     // bound on sup |P1(t,t) + P2' G2 P2|
    double cstar_bound = 0.0;  // bound on sup |Theta|
    double sup_value = 0.0;    // observed sup |V(t)|
    double sup_theta = 0.0;    // observed sup |Theta(t)|

    bool value_sound(double slack = 1e-6) const { return sup_value <= cv_bound + slack; }
    bool theta_sound(double slack = 1e-6) const { return sup_theta <= cstar_bound + slack; }
};

struct RiccatiSolution {
    Strategy theta;
    MatrixPath p1_diag; // n*n symmetric per node
    MatrixPath p2;      // m*n per node
    MatrixPath value;   // V(t) = P1(t,t) + P2' G2 P2, symmetric
    double residual = 0.0;
    Certificates certificates;
};

struct WindowDiagnostics {
    int index = 0;
    double t_lo = 0.0, t_hi = 0.0;
    int iterations = 0;
    bool accepted = false;
    int halvings = 0;
    double seed_distance = 0.0; // max distance of iterates from the window seed
    std::vector<double> residual_history;
    std::vector<double> contraction_ratios;
};

struct SolveDiagnostics {
    std::vector<WindowDiagnostics> windows;
    int total_gamma_evaluations = 0;
    int polish_iterations = 0;
    std::vector<double> polish_residuals;

    std::string to_string() const {
        std::ostringstream os;
        for (const auto& w : windows) {
            os << "window " << w.index << " [" << w.t_lo << ", " << w.t_hi << "]"
               << " iters=" << w.iterations << (w.accepted ? " accepted" : " rejected")
               << " halvings=" << w.halvings << " seed_dist=" << w.seed_distance
               << " ratios=";
            for (double r : w.contraction_ratios) os << r << " ";
            os << "\n";
        }
        os << "gamma evaluations: " << total_gamma_evaluations << "\n";
        os << "polish iterations: " << polish_iterations << " residuals=";
        for (double r : polish_residuals) os << r << " ";
        os << "\n";
        return os.str();
    }
};

struct SolveOptions {
    double tol = 1e-9;
    int max_iters = 4000;               // total Gamma evaluations budget
    double window_fraction = 1.0 / 8;   // initial window width as a fraction of T
    double min_window_fraction = 1.0 / 1024;
    int max_window_iters = 200;
    int polish_iters = 5;
    double overflow = ode::kOverflowThreshold;
    // Observer invoked when a window is accepted (used by tests to check the
    // frozen-tail property); receives the accepted left node and the field.
    std::function<void(int left_node, const Strategy&)> on_window_accepted;
};

/// Terminal gain built from the terminal data (G1(T), H, weights at (T,T)).
/// This is both the fixed point's value at T and the Picard seed.
inline Mat terminal_gain(const ProblemInstance& p) {
    const double T = p.grid.T;
    const Mat D = p.coeffs.D(T), B = p.coeffs.B(T), C = p.coeffs.C(T);
    const Mat Bh = p.coeffs.Bhat(T), Dh = p.coeffs.Dhat(T);
    const Mat& H = p.coeffs.H;
    const Mat G1 = mat::sym(p.weights.G1(T));
    const Mat G2 = mat::sym(p.weights.G2(T));
    const Mat N = mat::sym(p.weights.N(T, T));
    const Mat R = mat::sym(p.weights.R(T, T));
    const Mat core = G1 + H.transpose() * N * H;
    const Mat bracket = R + D.transpose() * core * D;
    Mat rhs = B.transpose() * G1 + D.transpose() * core * C +
              (Bh.transpose() + B.transpose() * H.transpose() +
               D.transpose() * H.transpose() * Dh.transpose()) *
                  G2 * H;
    return -mat::spd_solve(bracket, rhs);
}

namespace detail {

/// Feedback gain at node i from the diagonal P1 value and P2:
///   -(R + D'(P1 + P2'NP2)D)^{-1} (B'P1 + D'(P1 + P2'NP2)C
///     + (Bhat' + B'P2' + D'P2'Dhat') G2 P2).
inline Mat gamma_gain_at(const ProblemInstance& p, double s, const Mat& P1, const Mat& P2) {
    const Mat D = p.coeffs.D(s), B = p.coeffs.B(s), C = p.coeffs.C(s);
    const Mat Bh = p.coeffs.Bhat(s), Dh = p.coeffs.Dhat(s);
    const Mat N = mat::sym(p.weights.N(s, s));
    const Mat R = mat::sym(p.weights.R(s, s));
    const Mat G2 = mat::sym(p.weights.G2(s));
    const Mat core = P1 + P2.transpose() * N * P2;
    const Mat bracket = R + D.transpose() * core * D;
    Mat rhs = B.transpose() * P1 + D.transpose() * core * C +
              (Bh.transpose() + B.transpose() * P2.transpose() +
               D.transpose() * P2.transpose() * Dh.transpose()) *
                  G2 * P2;
    return -mat::spd_solve(bracket, rhs);
}

struct GammaEval {
    Strategy theta;        // full-grid field; entries in [lo, hi) updated
    MatrixPath p2;         // nodes [lo, N]
    std::vector<Mat> diag; // P1(t_i, t_i) for i in [lo, hi)
};

/// One Gamma evaluation: integrate P2 on [lo, T], the P1 diagonal for nodes
/// [lo, hi), and map through the gain formula. Nodes outside [lo, hi) keep
/// their current (frozen) values.
inline GammaEval gamma_eval_range(const ProblemInstance& p, const Strategy& cur, int lo_node,
                                  int hi_node, double overflow) {
    ode::Workspace w = ode::make_workspace(p, [&cur](double s) { return cur(s); }, overflow);
    MatrixPath p2 = ode::integrate_p2_ws(w, lo_node);
    ode::attach_p2(w, p2);

    std::vector<Mat> diag(static_cast<size_t>(hi_node - lo_node));
    parallel_for(lo_node, hi_node, [&](int i) {
        diag[static_cast<size_t>(i - lo_node)] = ode::integrate_p1_slice_ws(w, i).at(i);
    });

    GammaEval out{cur, std::move(p2), std::move(diag)};
    for (int i = lo_node; i < hi_node; ++i)
        out.theta.at(i) = gamma_gain_at(p, p.grid.node(i),
                                        out.diag[static_cast<size_t>(i - lo_node)],
                                        out.p2.at(i));
    return out;
}

} // namespace detail

/// The Gamma map: Theta -> new Theta through (P1 diagonal, P2).
inline Strategy gamma_map(const ProblemInstance& p, const Strategy& theta,
                          double overflow = ode::kOverflowThreshold) {
    return detail::gamma_eval_range(p, theta, 0, p.grid.steps + 1, overflow).theta;
}

/// Explicit a priori bound on sup_t |P1(t,t) + P2(t)' G2(t) P2(t)|:
///   [Ghat + Ghat|H|^2 + int_0^T (|Qhat| + Ghat^2 |Ahat(s)|^2) ds]
///   * exp(int_0^T [2|A| + |C|^2
///        + (n/delta)(1 + |Mhat| + |Nhat||C|^2 + 2 Ghat|Chat| + 2 Ghat|C||Dhat|)] ds)
/// with Ghat = max(|G1hat|, |G2hat|); integrals by trapezoid on the grid.
inline double cv_bound(const ProblemInstance& p) {
    const double Ghat = std::max(mat::spectral_norm(p.weights.caps.G1hat),
                                 mat::spectral_norm(p.weights.caps.G2hat));
    const double Qhat = mat::spectral_norm(p.weights.caps.Qhat);
    const double Mhat = mat::spectral_norm(p.weights.caps.Mhat);
    const double Nhat = mat::spectral_norm(p.weights.caps.Nhat);
    const double Hn = mat::spectral_norm(p.coeffs.H);
    const double delta = p.weights.delta;
    const double n = static_cast<double>(p.dims.n);

    const TimeGrid& g = p.grid;
    double lead_int = 0.0, exp_int = 0.0;
    double prev_lead = 0.0, prev_exp = 0.0;
    for (int i = 0; i <= g.steps; ++i) {
        const double s = g.node(i);
        const double An = mat::spectral_norm(p.coeffs.A(s));
        const double Cn = mat::spectral_norm(p.coeffs.C(s));
        const double Ahn = mat::spectral_norm(p.coeffs.Ahat(s));
        const double Chn = mat::spectral_norm(p.coeffs.Chat(s));
        const double Dhn = mat::spectral_norm(p.coeffs.Dhat(s));
        const double lead = Qhat + Ghat * Ghat * Ahn * Ahn;
        const double expo = 2.0 * An + Cn * Cn +
                            (n / delta) * (1.0 + Mhat + Nhat * Cn * Cn + 2.0 * Ghat * Chn +
                                           2.0 * Ghat * Cn * Dhn);
        if (i > 0) {
            lead_int += 0.5 * g.h() * (prev_lead + lead);
            exp_int += 0.5 * g.h() * (prev_exp + expo);
        }
        prev_lead = lead;
        prev_exp = expo;
    }
    return (Ghat + Ghat * Hn * Hn + lead_int) * std::exp(exp_int);
}

/// Explicit a priori bound on sup_t |Theta(t)|:
///   (Cv/delta)(|B| + |C||D|)
///   + (n Cv/delta^2)(1 + |Nhat||C||D| + Ghat|B| + Ghat|D||Dhat|)
///   + (Ghat^2/delta)|Bhat|^2,
/// where |X| are sup-over-time spectral norms sampled on the grid.
inline double cstar_bound(const ProblemInstance& p) {
    const double Cv = cv_bound(p);
    const double Ghat = std::max(mat::spectral_norm(p.weights.caps.G1hat),
                                 mat::spectral_norm(p.weights.caps.G2hat));
    const double Nhat = mat::spectral_norm(p.weights.caps.Nhat);
    const double delta = p.weights.delta;
    const double n = static_cast<double>(p.dims.n);

    double Bn = 0.0, Cn = 0.0, Dn = 0.0, Bhn = 0.0, Dhn = 0.0;
    for (int i = 0; i <= p.grid.steps; ++i) {
        const double s = p.grid.node(i);
        Bn = std::max(Bn, mat::spectral_norm(p.coeffs.B(s)));
        Cn = std::max(Cn, mat::spectral_norm(p.coeffs.C(s)));
        Dn = std::max(Dn, mat::spectral_norm(p.coeffs.D(s)));
        Bhn = std::max(Bhn, mat::spectral_norm(p.coeffs.Bhat(s)));
        Dhn = std::max(Dhn, mat::spectral_norm(p.coeffs.Dhat(s)));
    }
    return (Cv / delta) * (Bn + Cn * Dn) +
           (n * Cv / (delta * delta)) *
               (1.0 + Nhat * Cn * Dn + Ghat * Bn + Ghat * Dn * Dhn) +
           (Ghat * Ghat / delta) * Bhn * Bhn;
}

/// Equilibrium value field V(t) = P1(t,t) + P2(t)' G2(t) P2(t); the
/// equilibrium value functional is x -> 0.5 <V(t)x, x>.
inline MatrixPath equilibrium_value(const MatrixPath& p1_diag, const MatrixPath& p2,
                                    const TimeEntry& G2) {
    std::vector<Mat> vals;
    vals.reserve(p1_diag.values.size());
    for (int i = p1_diag.first_node; i <= p1_diag.last_node(); ++i) {
        const double t = p1_diag.grid.node(i);
        vals.push_back(
            mat::sym(p1_diag.at(i) + p2.at(i).transpose() * mat::sym(G2(t)) * p2.at(i)));
    }
    return MatrixPath(p1_diag.grid, p1_diag.first_node, std::move(vals));
}

/// Backward-windowed Picard iteration for the equilibrium fixed point.
/// The last window is seeded with the constant terminal gain; each accepted
/// window freezes its values bitwise and the next window seeds with the value
/// at the accepted left edge. Windows halve when the residuals stop decaying
/// geometrically, down to a floor; a full-interval polish pass tightens the
/// final fixed-point residual.
inline std::pair<RiccatiSolution, SolveDiagnostics> solve_equilibrium(
    const ProblemInstance& p, const SolveOptions& opt = {}) {
    p.check_shapes();
    const TimeGrid& g = p.grid;
    const int N = g.steps;

    const Mat seed_gain = terminal_gain(p);
    Strategy cur = Strategy::constant(g, seed_gain);

    SolveDiagnostics diag;
    int gamma_budget = opt.max_iters;
    auto spend_gamma = [&](int accepted_left) {
        if (--gamma_budget < 0) {
            std::ostringstream os;
            os << "solve_equilibrium: Gamma evaluation budget (" << opt.max_iters
               << ") exhausted with accepted region [" << g.node(accepted_left) << ", " << g.T
               << "]";
            throw NoContraction(os.str() + "\n" + diag.to_string());
        }
    };

    int window_nodes = std::max(1, static_cast<int>(std::lround(N * opt.window_fraction)));
    const int window_floor =
        std::max(1, static_cast<int>(std::lround(N * opt.min_window_fraction)));

    int accepted_left = N; // nothing accepted yet; node N is the terminal value
    int window_index = 0;
    int halvings_so_far = 0;

    while (accepted_left > 0) {
        const int win_lo = std::max(0, accepted_left - window_nodes);

        WindowDiagnostics wd;
        wd.index = window_index;
        wd.t_lo = g.node(win_lo);
        wd.t_hi = g.node(accepted_left);
        wd.halvings = halvings_so_far;

        // Seed: constant extension of the accepted boundary value.
        const Mat boundary = cur.at(accepted_left);
        for (int i = win_lo; i < accepted_left; ++i) cur.at(i) = boundary;

        bool accepted = false;
        for (int it = 0; it < opt.max_window_iters; ++it) {
            spend_gamma(accepted_left);
            detail::GammaEval ge =
                detail::gamma_eval_range(p, cur, win_lo, accepted_left, opt.overflow);
            ++diag.total_gamma_evaluations;

            double change = 0.0;
            double seed_dist = 0.0;
            for (int i = win_lo; i < accepted_left; ++i) {
                change = std::max(change, mat::spectral_norm(ge.theta.at(i) - cur.at(i)));
                seed_dist = std::max(seed_dist, mat::spectral_norm(ge.theta.at(i) - boundary));
                cur.at(i) = ge.theta.at(i);
            }
            // Per Step-4 freezing, nodes >= accepted_left are never rewritten.
            wd.iterations = it + 1;
            wd.residual_history.push_back(change);
            wd.seed_distance = std::max(wd.seed_distance, seed_dist);
            if (wd.residual_history.size() >= 2) {
                const double prev = wd.residual_history[wd.residual_history.size() - 2];
                if (prev > 0.0) wd.contraction_ratios.push_back(change / prev);
            }

            if (change <= opt.tol) {
                accepted = true;
                break;
            }
            // Geometric-decay test: after 10 iterations a median ratio near or
            // above one means the window is too wide, not merely slow.
            if (wd.contraction_ratios.size() >= 10) {
                std::vector<double> tail(wd.contraction_ratios.end() - 10,
                                         wd.contraction_ratios.end());
                std::nth_element(tail.begin(), tail.begin() + 5, tail.end());
                if (tail[5] >= 0.97) break;
            }
        }

        if (accepted) {
            wd.accepted = true;
            diag.windows.push_back(wd);
            accepted_left = win_lo;
            if (opt.on_window_accepted) opt.on_window_accepted(accepted_left, cur);
            ++window_index;
            continue;
        }

        wd.accepted = false;
        diag.windows.push_back(wd);
        if (window_nodes <= window_floor) {
            std::ostringstream os;
            os << "solve_equilibrium: no contraction; window of " << window_nodes
               << " node(s) at t in [" << g.node(win_lo) << ", " << g.node(accepted_left)
               << "] failed to decay geometrically and the floor (" << window_floor
               << " node(s)) is reached";
            throw NoContraction(os.str() + "\n" + diag.to_string());
        }
        window_nodes = std::max(window_floor, window_nodes / 2);
        ++halvings_so_far;
        ++window_index;
    }

    // Full-interval polish: a few global Gamma iterations to remove
    // tol-scale window seams; the reported residual is exact for the
    // returned iterate.
    const int full_hi = N + 1;
    spend_gamma(0);
    detail::GammaEval ge = detail::gamma_eval_range(p, cur, 0, full_hi, opt.overflow);
    ++diag.total_gamma_evaluations;
    double residual = sup_distance(ge.theta, cur);
    diag.polish_residuals.push_back(residual);
    while (residual > opt.tol && diag.polish_iterations < opt.polish_iters) {
        cur = ge.theta;
        spend_gamma(0);
        ge = detail::gamma_eval_range(p, cur, 0, full_hi, opt.overflow);
        ++diag.total_gamma_evaluations;
        ++diag.polish_iterations;
        residual = sup_distance(ge.theta, cur);
        diag.polish_residuals.push_back(residual);
    }
    if (residual > opt.tol) {
        std::ostringstream os;
        os << "solve_equilibrium: polish could not reach tol=" << opt.tol
           << " (residual " << residual << " after " << diag.polish_iterations
           << " global iterations)";
        throw NoContraction(os.str() + "\n" + diag.to_string());
    }

    RiccatiSolution sol;
    sol.theta = cur;
    sol.p2 = std::move(ge.p2);
    sol.p1_diag = MatrixPath(g, 0, std::move(ge.diag));
    sol.value = equilibrium_value(sol.p1_diag, sol.p2, p.weights.G2);
    sol.residual = residual;
    sol.certificates.cv_bound = cv_bound(p);
    sol.certificates.cstar_bound = cstar_bound(p);
    sol.certificates.sup_value = sol.value.max_norm();
    sol.certificates.sup_theta = sol.theta.sup_norm();
    return {std::move(sol), std::move(diag)};
}

} // namespace erelab
