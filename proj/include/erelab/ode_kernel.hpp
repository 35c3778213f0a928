#pragma once

#include <cmath>
#include <sstream>
#include <utility>
#include <vector>

#include "erelab/errors.hpp"
#include "erelab/matrix.hpp"
#include "erelab/matrix_path.hpp"
#include "erelab/parallel.hpp"
#include "erelab/problem.hpp"

namespace erelab {
namespace ode {

/// Entries above this are treated as finite-time escape; integration stops
/// with the first bad node instead of producing Inf.
inline constexpr double kOverflowThreshold = 1e12;

/// Closed-loop coefficient samples on the half grid (index q = 0..2N at time
/// q*h/2). RK4 stages read these directly, so tabulated gains cost no
/// accuracy beyond their own interpolation error.
struct Workspace {
    const ProblemInstance* p = nullptr;
    TimeGrid grid;
    double overflow = kOverflowThreshold;
    std::vector<Mat> Atheta, Ctheta, AhatTheta, Chat, Dhat, theta_half;
    std::vector<Mat> p2_half, p2c_half;

    int half_count() const { return 2 * grid.steps + 1; }
    double half_time(int q) const { return q >= 2 * grid.steps ? grid.T : q * grid.h() / 2.0; }
    bool has_p2() const { return !p2_half.empty(); }
};

template <class GainF>
Workspace make_workspace(const ProblemInstance& p, GainF&& gain,
                         double overflow = kOverflowThreshold) {
    Workspace w;
    w.p = &p;
    w.grid = p.grid;
    w.overflow = overflow;
    const int H = w.half_count();
    w.Atheta.reserve(H);
    w.Ctheta.reserve(H);
    w.AhatTheta.reserve(H);
    w.Chat.reserve(H);
    w.Dhat.reserve(H);
    w.theta_half.reserve(H);
    for (int q = 0; q < H; ++q) {
        const double s = w.half_time(q);
        Mat th = gain(s);
        Mat A = p.coeffs.A(s), B = p.coeffs.B(s), C = p.coeffs.C(s), D = p.coeffs.D(s);
        w.Atheta.push_back(A + B * th);
        w.Ctheta.push_back(C + D * th);
        w.AhatTheta.push_back(p.coeffs.Ahat(s) + p.coeffs.Bhat(s) * th);
        w.Chat.push_back(p.coeffs.Chat(s));
        w.Dhat.push_back(p.coeffs.Dhat(s));
        w.theta_half.push_back(std::move(th));
    }
    return w;
}

/// Record P2 samples (and P2*Ctheta) on the half grid for slice integration.
inline void attach_p2(Workspace& w, const MatrixPath& p2) {
    const int H = w.half_count();
    w.p2_half.assign(H, Mat());
    w.p2c_half.assign(H, Mat());
    const int q_lo = 2 * p2.first_node;
    for (int q = q_lo; q < H; ++q) {
        w.p2_half[q] = (q % 2 == 0) ? p2.at(q / 2) : p2.eval(w.half_time(q));
        w.p2c_half[q] = w.p2_half[q] * w.Ctheta[q];
    }
}

namespace detail {

inline void check_finite(const Mat& v, double threshold, double time, int node,
                         const char* what) {
    if (!v.allFinite() || mat::max_abs(v) > threshold) {
        std::ostringstream os;
        os << what << ": entry escaped past " << threshold << " at s=" << time
           << " (node " << node << ")";
        throw OverflowError(os.str(), time, node);
    }
}

} // namespace detail

/// Backward RK4 for dP2/ds = -(P2 A_T + Ahat_T + Chat P2 + Dhat P2 C_T) from
/// P2(T) = H, down to lo_node.
inline MatrixPath integrate_p2_ws(const Workspace& w, int lo_node = 0) {
    const ProblemInstance& p = *w.p;
    const int N = w.grid.steps;
    const double h = w.grid.h();
    std::vector<Mat> vals(static_cast<size_t>(N - lo_node + 1));
    Mat P = p.coeffs.H;
    vals.back() = P;
    auto f = [&](int q, const Mat& X) -> Mat {
        return -(X * w.Atheta[q] + w.AhatTheta[q] + w.Chat[q] * X + w.Dhat[q] * X * w.Ctheta[q]);
    };
    for (int j = N; j > lo_node; --j) {
        const Mat k1 = f(2 * j, P);
        const Mat k2 = f(2 * j - 1, P - 0.5 * h * k1);
        const Mat k3 = f(2 * j - 1, P - 0.5 * h * k2);
        const Mat k4 = f(2 * j - 2, P - h * k3);
        P -= (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        detail::check_finite(P, w.overflow, w.grid.node(j - 1), j - 1, "integrate_p2");
        vals[static_cast<size_t>(j - 1 - lo_node)] = P;
    }
    return MatrixPath(w.grid, lo_node, std::move(vals));
}

template <class GainF>
MatrixPath integrate_p2(const ProblemInstance& p, GainF&& gain,
                        double overflow = kOverflowThreshold) {
    return integrate_p2_ws(make_workspace(p, gain, overflow));
}

inline MatrixPath integrate_p2(const ProblemInstance& p, const Strategy& theta,
                               double overflow = kOverflowThreshold) {
    return integrate_p2(p, [&theta](double s) { return theta(s); }, overflow);
}

namespace detail {

/// Weight integrand of the P1(t, .) slice on the half grid starting at
/// q0 = 2*t_idx: Q(t,s) + T'RT + P2'MP2 + (P2 C_T)'N(P2 C_T), symmetrized.
inline std::vector<Mat> slice_weights(const Workspace& w, int t_idx) {
    const ProblemInstance& p = *w.p;
    const double t = w.grid.node(t_idx);
    const int q0 = 2 * t_idx;
    const int H = w.half_count();
    std::vector<Mat> W(static_cast<size_t>(H - q0));
    for (int q = q0; q < H; ++q) {
        const double s = w.half_time(q);
        const Mat& th = w.theta_half[q];
        const Mat& p2 = w.p2_half[q];
        const Mat& p2c = w.p2c_half[q];
        Mat acc = p.weights.Q(t, s);
        acc += th.transpose() * p.weights.R(t, s) * th;
        acc += p2.transpose() * p.weights.M(t, s) * p2;
        acc += p2c.transpose() * p.weights.N(t, s) * p2c;
        W[static_cast<size_t>(q - q0)] = mat::sym(acc);
    }
    return W;
}

} // namespace detail

/// Backward RK4 for the Lyapunov-type slice equation
///   dP1(t,.)/ds = -(P1 A_T + A_T' P1 + C_T' P1 C_T + W(t, s)),
/// terminal P1(t, T) = G1(t); symmetrized after every step. Requires
/// attach_p2 to have covered [t_idx, T].
inline MatrixPath integrate_p1_slice_ws(const Workspace& w, int t_idx) {
    const ProblemInstance& p = *w.p;
    const int N = w.grid.steps;
    const double h = w.grid.h();
    const int q0 = 2 * t_idx;
    const std::vector<Mat> W = detail::slice_weights(w, t_idx);
    std::vector<Mat> vals(static_cast<size_t>(N - t_idx + 1));
    Mat P = mat::sym(p.weights.G1(w.grid.node(t_idx)));
    vals.back() = P;
    auto f = [&](int q, const Mat& X) -> Mat {
        return -(X * w.Atheta[q] + w.Atheta[q].transpose() * X +
                 w.Ctheta[q].transpose() * X * w.Ctheta[q] + W[static_cast<size_t>(q - q0)]);
    };
    for (int j = N; j > t_idx; --j) {
        const Mat k1 = f(2 * j, P);
        const Mat k2 = f(2 * j - 1, P - 0.5 * h * k1);
        const Mat k3 = f(2 * j - 1, P - 0.5 * h * k2);
        const Mat k4 = f(2 * j - 2, P - h * k3);
        P = mat::sym(P - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
        detail::check_finite(P, w.overflow, w.grid.node(j - 1), j - 1, "integrate_p1_slice");
        vals[static_cast<size_t>(j - 1 - t_idx)] = P;
    }
    return MatrixPath(w.grid, t_idx, std::move(vals));
}

template <class GainF>
MatrixPath integrate_p1_slice(const ProblemInstance& p, GainF&& gain, const MatrixPath& p2,
                              int t_idx, double overflow = kOverflowThreshold) {
    Workspace w = make_workspace(p, gain, overflow);
    attach_p2(w, p2);
    return integrate_p1_slice_ws(w, t_idx);
}

inline MatrixPath integrate_p1_slice(const ProblemInstance& p, const Strategy& theta,
                                     const MatrixPath& p2, int t_idx,
                                     double overflow = kOverflowThreshold) {
    return integrate_p1_slice(p, [&theta](double s) { return theta(s); }, p2, t_idx, overflow);
}

/// Diagonal field {P1(t_i, t_i)}: one backward slice per node, in parallel.
/// Slices are independent; the result is bitwise independent of the schedule.
inline MatrixPath diag_p1_ws(const Workspace& w, int lo_node = 0) {
    const int N = w.grid.steps;
    std::vector<Mat> vals(static_cast<size_t>(N - lo_node + 1));
    parallel_for(lo_node, N + 1, [&](int i) {
        try {
            MatrixPath slice = integrate_p1_slice_ws(w, i);
            vals[static_cast<size_t>(i - lo_node)] = slice.at(i);
        } catch (const OverflowError& e) {
            std::ostringstream os;
            os << "diag_p1: slice t_idx=" << i << " overflowed: " << e.what();
            throw OverflowError(os.str(), e.time(), e.node());
        }
    });
    return MatrixPath(w.grid, lo_node, std::move(vals));
}

template <class GainF>
MatrixPath diag_p1(const ProblemInstance& p, GainF&& gain, const MatrixPath& p2,
                   double overflow = kOverflowThreshold) {
    Workspace w = make_workspace(p, gain, overflow);
    attach_p2(w, p2);
    return diag_p1_ws(w);
}

inline MatrixPath diag_p1(const ProblemInstance& p, const Strategy& theta, const MatrixPath& p2,
                          double overflow = kOverflowThreshold) {
    return diag_p1(p, [&theta](double s) { return theta(s); }, p2, overflow);
}

namespace detail {

/// Composite Simpson over node samples f_0..f_cnt spaced h (3/8 rule absorbs
/// an odd tail, single interval falls back to the trapezoid).
inline Mat simpson(const std::vector<Mat>& f, double h) {
    const int cnt = static_cast<int>(f.size()) - 1;
    if (cnt <= 0) return Mat::Zero(f.front().rows(), f.front().cols());
    if (cnt == 1) return Mat(0.5 * h * (f[0] + f[1]));
    Mat acc = Mat::Zero(f.front().rows(), f.front().cols());
    int even_part = cnt;
    if (cnt % 2 == 1) even_part = cnt - 3;
    for (int j = 0; j + 2 <= even_part; j += 2)
        acc += (h / 3.0) * (f[j] + 4.0 * f[j + 1] + f[j + 2]);
    if (cnt % 2 == 1) {
        const int j = even_part;
        acc += (3.0 * h / 8.0) * (f[j] + 3.0 * f[j + 1] + 3.0 * f[j + 2] + f[j + 3]);
    }
    return acc;
}

} // namespace detail

/// Cross-check of P1(t,t) by the expectation representation
///   P1(t,t) = E[Phi(t,T)' G1(t) Phi(t,T) + int_t^T Phi' W(t,s) Phi ds],
/// realized through the deterministic second moment K(s) = E[Phi x Phi]
/// (Kronecker form), which solves the forward ODE
///   K' = (A_T x I + I x A_T + C_T x C_T) K, K(t) = I.
/// Per-node contraction: vec(E[Phi' X Phi]) = K' vec(X); the time integral is
/// done with Simpson on the nodes.
inline Mat lyapunov_forward_check_ws(const Workspace& w, int t_idx) {
    const ProblemInstance& p = *w.p;
    const int n = p.dims.n;
    const int N = w.grid.steps;
    const double h = w.grid.h();
    const Mat I = Mat::Identity(n, n);

    std::vector<Mat> K(static_cast<size_t>(N - t_idx + 1));
    Mat Kc = Mat::Identity(n * n, n * n);
    K.front() = Kc;
    auto gen = [&](int q) -> Mat {
        return mat::kron(w.Atheta[q], I) + mat::kron(I, w.Atheta[q]) +
               mat::kron(w.Ctheta[q], w.Ctheta[q]);
    };
    for (int j = t_idx; j < N; ++j) {
        const Mat k1 = gen(2 * j) * Kc;
        const Mat k2 = gen(2 * j + 1) * (Kc + 0.5 * h * k1);
        const Mat k3 = gen(2 * j + 1) * (Kc + 0.5 * h * k2);
        const Mat k4 = gen(2 * j + 2) * (Kc + h * k3);
        Kc += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        detail::check_finite(Kc, w.overflow, w.grid.node(j + 1), j + 1,
                             "lyapunov_forward_check");
        K[static_cast<size_t>(j + 1 - t_idx)] = Kc;
    }

    const std::vector<Mat> W = detail::slice_weights(w, t_idx);
    auto contract = [&](const Mat& Ks, const Mat& X) -> Mat {
        Eigen::Map<const Vec> vx(X.data(), n * n);
        Vec vy = Ks.transpose() * vx;
        return Eigen::Map<const Mat>(vy.data(), n, n);
    };
    std::vector<Mat> integrand(static_cast<size_t>(N - t_idx + 1));
    for (int j = t_idx; j <= N; ++j)
        integrand[static_cast<size_t>(j - t_idx)] =
            contract(K[static_cast<size_t>(j - t_idx)], W[static_cast<size_t>(2 * (j - t_idx))]);

    const Mat G1 = mat::sym(p.weights.G1(w.grid.node(t_idx)));
    Mat out = contract(K.back(), G1) + detail::simpson(integrand, h);
    return mat::sym(out);
}

template <class GainF>
Mat lyapunov_forward_check(const ProblemInstance& p, GainF&& gain, int t_idx,
                           const MatrixPath* p2 = nullptr,
                           double overflow = kOverflowThreshold) {
    Workspace w = make_workspace(p, gain, overflow);
    if (p2 != nullptr) {
        attach_p2(w, *p2);
    } else {
        attach_p2(w, integrate_p2_ws(w));
    }
    return lyapunov_forward_check_ws(w, t_idx);
}

inline Mat lyapunov_forward_check(const ProblemInstance& p, const Strategy& theta, int t_idx,
                                  const MatrixPath* p2 = nullptr,
                                  double overflow = kOverflowThreshold) {
    return lyapunov_forward_check(p, [&theta](double s) { return theta(s); }, t_idx, p2,
                                  overflow);
}

} // namespace ode
} // namespace erelab
