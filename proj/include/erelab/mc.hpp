#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "erelab/errors.hpp"
#include "erelab/matrix.hpp"
#include "erelab/matrix_path.hpp"
#include "erelab/ode_kernel.hpp"
#include "erelab/parallel.hpp"
#include "erelab/problem.hpp"

namespace erelab {
namespace mc {

struct McConfig {
    long long paths = 10000;
    std::uint64_t seed = 42;
    bool antithetic = false;
    double overflow = 1e12;
    double exclusion_budget = 0.01; // fraction of samples that may blow up
};

/// Monte Carlo estimate with per-entry standard errors; z-scores are filled
/// against a comparison target when one is known.
struct McReport {
    Mat estimate, stderror;
    long long samples = 0;
    long long excluded = 0;
    Mat target, z;
    double max_abs_z = 0.0;
    // spike-test extras: the epsilon ladder and per-rung statistics
    std::vector<double> ladder_eps, ladder_mean, ladder_se;

    void set_target(const Mat& tgt) {
        target = tgt;
        z = Mat::Zero(estimate.rows(), estimate.cols());
        max_abs_z = 0.0;
        for (Eigen::Index i = 0; i < estimate.rows(); ++i)
            for (Eigen::Index j = 0; j < estimate.cols(); ++j) {
                const double diff = estimate(i, j) - tgt(i, j);
                const double se = stderror(i, j);
                double zz = 0.0;
                if (se > 0.0)
                    zz = diff / se;
                else if (std::abs(diff) > 1e-12)
                    zz = std::numeric_limits<double>::infinity();
                z(i, j) = zz;
                max_abs_z = std::max(max_abs_z, std::abs(zz));
            }
    }

    double scalar() const { return estimate(0, 0); }
    double scalar_se() const { return stderror(0, 0); }
};

/// splitmix64 finalizer; decorrelates per-path streams derived from
/// (seed, path index) so results are schedule-independent.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// Standard normal stream (Box-Muller, cosine branch), one stream per path.
class NormalStream {
public:
    NormalStream(std::uint64_t seed, std::uint64_t path)
        : state_(mix64(seed ^ mix64(path + 0x632BE59BD9B4E019ULL))) {}

    double uniform() {
        state_ = mix64(state_);
        return (state_ >> 11) * 0x1.0p-53 + 0x1.0p-54;
    }

    double normal() {
        const double u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
    }

private:
    std::uint64_t state_;
};

namespace detail {

struct ChunkStats {
    Vec sum, sumsq;
    long long used = 0, excluded = 0;
};

/// Deterministic chunked reduction. sample_fn(q, out) fills a flat sample of
/// fixed dimension (returning false excludes the sample); chunks have a fixed
/// size and are merged in index order, so the result is bitwise independent
/// of the worker count. Each chunk works on its own copy of the functor, so
/// samplers may keep mutable scratch buffers.
template <class SampleFn>
std::pair<Vec, Vec> run_samples(long long samples, int dim, const McConfig& cfg,
                                SampleFn&& sample_fn, long long& used_out,
                                long long& excluded_out) {
    constexpr long long kChunk = 4096;
    const long long chunks = (samples + kChunk - 1) / kChunk;
    std::vector<ChunkStats> stats(static_cast<size_t>(chunks));
    parallel_for(0, static_cast<int>(chunks), [&](int c) {
        auto fn = sample_fn; // chunk-local scratch state
        ChunkStats st;
        st.sum = Vec::Zero(dim);
        st.sumsq = Vec::Zero(dim);
        Vec sample(dim);
        const long long lo = c * kChunk;
        const long long hi = std::min(samples, lo + kChunk);
        for (long long q = lo; q < hi; ++q) {
            if (!fn(q, sample)) {
                ++st.excluded;
                continue;
            }
            st.sum += sample;
            st.sumsq += sample.cwiseProduct(sample);
            ++st.used;
        }
        stats[static_cast<size_t>(c)] = std::move(st);
    });

    Vec sum = Vec::Zero(dim), sumsq = Vec::Zero(dim);
    long long used = 0, excluded = 0;
    for (const auto& st : stats) {
        sum += st.sum;
        sumsq += st.sumsq;
        used += st.used;
        excluded += st.excluded;
    }
    if (excluded > cfg.exclusion_budget * static_cast<double>(samples) || used == 0) {
        std::ostringstream os;
        os << "Monte Carlo run excluded " << excluded << " of " << samples
           << " samples (budget " << cfg.exclusion_budget * 100 << "%)";
        throw TooManyExclusions(os.str());
    }
    used_out = used;
    excluded_out = excluded;

    Vec mean = sum / static_cast<double>(used);
    Vec se = Vec::Zero(dim);
    if (used > 1) {
        for (int i = 0; i < dim; ++i) {
            double var = (sumsq(i) - static_cast<double>(used) * mean(i) * mean(i)) /
                         static_cast<double>(used - 1);
            se(i) = std::sqrt(std::max(var, 0.0) / static_cast<double>(used));
        }
    }
    return {mean, se};
}

inline McReport report_from(const Vec& mean, const Vec& se, int rows, int cols,
                            long long used, long long excluded) {
    McReport r;
    r.estimate = Eigen::Map<const Mat>(mean.data(), rows, cols);
    r.stderror = Eigen::Map<const Mat>(se.data(), rows, cols);
    r.samples = used;
    r.excluded = excluded;
    return r;
}

/// Node-sampled closed-loop coefficients for Euler stepping.
struct EulerTables {
    std::vector<Mat> Atheta, Ctheta, Theta; // at nodes t_idx..N
    std::vector<Mat> B, D;                  // raw, for spike drift
    std::vector<Mat> AhatTheta, Chat, Dhat; // backward driver pieces

    template <class GainF>
    static EulerTables build(const ProblemInstance& p, GainF&& gain, int t_idx) {
        EulerTables t;
        const int N = p.grid.steps;
        t.Atheta.reserve(N - t_idx + 1);
        for (int j = t_idx; j <= N; ++j) {
            const double s = p.grid.node(j);
            Mat th = gain(s);
            Mat B = p.coeffs.B(s), D = p.coeffs.D(s);
            t.Atheta.push_back(p.coeffs.A(s) + B * th);
            t.Ctheta.push_back(p.coeffs.C(s) + D * th);
            t.AhatTheta.push_back(p.coeffs.Ahat(s) + p.coeffs.Bhat(s) * th);
            t.Chat.push_back(p.coeffs.Chat(s));
            t.Dhat.push_back(p.coeffs.Dhat(s));
            t.B.push_back(std::move(B));
            t.D.push_back(std::move(D));
            t.Theta.push_back(std::move(th));
        }
        return t;
    }
};

inline bool bad(const Mat& x, double threshold) {
    return !x.allFinite() || mat::max_abs(x) > threshold;
}

inline bool bad(const Vec& x, double threshold) {
    return !x.allFinite() || x.cwiseAbs().maxCoeff() > threshold;
}

} // namespace detail

/// Euler-Maruyama simulation of the closed-loop fundamental matrix
///   Phi(t, s_{j+1}) = Phi_j + h A_T(s_j) Phi_j + sqrt(h) xi_j C_T(s_j) Phi_j,
/// one shared scalar Brownian increment stream per path. Returns the terminal
/// matrices Phi(t, T), one per path; antithetic pairs sit at (2q, 2q+1).
/// `visit(path, node, Phi)` is called at every node when provided (it must be
/// thread-safe; intended for small diagnostic runs).
template <class GainF, class Visit>
std::vector<Mat> simulate_phi_visit(const ProblemInstance& p, GainF&& gain, int t_idx,
                                    const McConfig& cfg, Visit&& visit) {
    const int N = p.grid.steps;
    const double h = p.grid.h();
    const double sqh = std::sqrt(h);
    const int n = p.dims.n;
    const auto tables = detail::EulerTables::build(p, gain, t_idx);

    const long long total = cfg.antithetic ? ((cfg.paths + 1) / 2) * 2 : cfg.paths;
    std::vector<Mat> terminal(static_cast<size_t>(total));
    std::atomic<long long> excluded{0};
    parallel_for(0, static_cast<int>(cfg.antithetic ? total / 2 : total), [&](int q) {
        const int reps = cfg.antithetic ? 2 : 1;
        for (int r = 0; r < reps; ++r) {
            NormalStream rng(cfg.seed, static_cast<std::uint64_t>(q));
            const double sign = r == 0 ? 1.0 : -1.0;
            const long long path = cfg.antithetic ? 2 * q + r : q;
            Mat Phi = Mat::Identity(n, n);
            visit(path, t_idx, Phi);
            bool ok = true;
            for (int j = t_idx; j < N; ++j) {
                const double xi = sign * rng.normal();
                Phi = Phi + h * (tables.Atheta[j - t_idx] * Phi) +
                      (sqh * xi) * (tables.Ctheta[j - t_idx] * Phi);
                if (detail::bad(Phi, cfg.overflow)) {
                    ok = false;
                    break;
                }
                visit(path, j + 1, Phi);
            }
            if (!ok) {
                terminal[static_cast<size_t>(path)] =
                    Mat::Constant(n, n, std::numeric_limits<double>::quiet_NaN());
                ++excluded;
            } else {
                terminal[static_cast<size_t>(path)] = Phi;
            }
        }
    });
    if (excluded > cfg.exclusion_budget * static_cast<double>(total)) {
        std::ostringstream os;
        os << "simulate_phi: " << excluded << " of " << total << " paths overflowed";
        throw TooManyExclusions(os.str());
    }
    return terminal;
}

template <class GainF>
std::vector<Mat> simulate_phi(const ProblemInstance& p, GainF&& gain, int t_idx,
                              const McConfig& cfg) {
    return simulate_phi_visit(p, gain, t_idx, cfg, [](long long, int, const Mat&) {});
}

/// Monte Carlo estimate of the P1 diagonal representation
///   P1(t,t) = E[Phi' G1(t) Phi (T) + int_t^T Phi' W(t,s) Phi ds]
/// (trapezoid along each path), reported with z-scores against the backward
/// ODE value. At t = T the estimate is exactly G1(T) with zero stderr.
template <class GainF>
McReport mc_p1_diag(const ProblemInstance& p, GainF&& gain, const MatrixPath& p2, int t_idx,
                    const McConfig& cfg) {
    const int N = p.grid.steps;
    const double h = p.grid.h();
    const double sqh = std::sqrt(h);
    const int n = p.dims.n;
    const double t = p.grid.node(t_idx);
    const auto tables = detail::EulerTables::build(p, gain, t_idx);

    // weight integrand at nodes (t fixed)
    std::vector<Mat> W(static_cast<size_t>(N - t_idx + 1));
    for (int j = t_idx; j <= N; ++j) {
        const double s = p.grid.node(j);
        const Mat& th = tables.Theta[j - t_idx];
        const Mat& P2 = p2.at(j);
        const Mat p2c = P2 * tables.Ctheta[j - t_idx];
        Mat acc = p.weights.Q(t, s);
        acc += th.transpose() * p.weights.R(t, s) * th;
        acc += P2.transpose() * p.weights.M(t, s) * P2;
        acc += p2c.transpose() * p.weights.N(t, s) * p2c;
        W[static_cast<size_t>(j - t_idx)] = mat::sym(acc);
    }
    const Mat G1 = mat::sym(p.weights.G1(t));

    const long long samples = cfg.antithetic ? (cfg.paths + 1) / 2 : cfg.paths;
    const int reps = cfg.antithetic ? 2 : 1;
    auto sample_fn = [&, acc = Mat(n, n), Phi = Mat(n, n), tmp = Mat(n, n), wphi = Mat(n, n),
                      quad = Mat(n, n)](long long q, Vec& out) mutable -> bool {
        acc.setZero();
        for (int r = 0; r < reps; ++r) {
            NormalStream rng(cfg.seed, static_cast<std::uint64_t>(q));
            const double sign = r == 0 ? 1.0 : -1.0;
            Phi.setIdentity();
            Mat run = t_idx == N ? Mat(Mat::Zero(n, n)) : Mat(0.5 * h * W[0]);
            for (int j = t_idx; j < N; ++j) {
                const double xi = sign * rng.normal();
                tmp.noalias() = h * (tables.Atheta[j - t_idx] * Phi);
                tmp.noalias() += (sqh * xi) * (tables.Ctheta[j - t_idx] * Phi);
                Phi += tmp;
                if (detail::bad(Phi, cfg.overflow)) return false;
                const double wq = (j + 1 == N) ? 0.5 * h : h;
                wphi.noalias() = W[static_cast<size_t>(j + 1 - t_idx)] * Phi;
                quad.noalias() = Phi.transpose() * wphi;
                run += wq * quad;
            }
            wphi.noalias() = G1 * Phi;
            quad.noalias() = Phi.transpose() * wphi;
            acc += run + quad;
        }
        acc /= static_cast<double>(reps);
        out = Eigen::Map<const Vec>(acc.data(), n * n);
        return true;
    };

    long long used = 0, excluded = 0;
    auto [mean, se] = detail::run_samples(samples, n * n, cfg, sample_fn, used, excluded);
    McReport rep = detail::report_from(mean, se, n, n, used, excluded);

    ode::Workspace w = ode::make_workspace(p, gain, cfg.overflow);
    ode::attach_p2(w, p2);
    rep.set_target(ode::integrate_p1_slice_ws(w, t_idx).at(t_idx));
    return rep;
}

/// Forward/backward consistency of the closed-loop BSDE: simulate X forward,
/// evaluate Y once as P2(s)X(s) and once by the backward discrete scheme from
/// the terminal H X(T) with Z = P2 C_T X, and report the largest-over-s mean
/// square mismatch (estimate) together with the mean square size of Y itself
/// (target slot) so callers can normalize.
template <class GainF>
McReport simulate_closed_loop(const ProblemInstance& p, GainF&& gain, const MatrixPath& p2,
                              const Vec& x0, int t_idx, const McConfig& cfg) {
    const int N = p.grid.steps;
    const double h = p.grid.h();
    const double sqh = std::sqrt(h);
    const auto tables = detail::EulerTables::build(p, gain, t_idx);
    const int cnt = N - t_idx + 1;

    const long long samples = cfg.antithetic ? (cfg.paths + 1) / 2 : cfg.paths;
    const int reps = cfg.antithetic ? 2 : 1;
    const int n = p.dims.n, m = p.dims.m;
    struct Scratch {
        std::vector<double> dw;
        std::vector<Vec> X;
        Vec Y, Ya, Z, tn, tm;
    };
    // per-sample flat layout: [mismatch^2 at nodes..., |Ya|^2 at nodes...]
    auto sample_fn = [&, sc = Scratch{std::vector<double>(static_cast<size_t>(N - t_idx)),
                                      std::vector<Vec>(static_cast<size_t>(cnt), Vec(n)),
                                      Vec(m), Vec(m), Vec(m), Vec(n), Vec(m)}](
                         long long q, Vec& out) mutable -> bool {
        out.setZero();
        for (int r = 0; r < reps; ++r) {
            NormalStream rng(cfg.seed, static_cast<std::uint64_t>(q));
            const double sign = r == 0 ? 1.0 : -1.0;
            sc.X[0] = x0;
            for (int j = t_idx; j < N; ++j) {
                const double inc = sign * sqh * rng.normal();
                sc.dw[static_cast<size_t>(j - t_idx)] = inc;
                const Vec& xj = sc.X[static_cast<size_t>(j - t_idx)];
                Vec& xn = sc.X[static_cast<size_t>(j + 1 - t_idx)];
                sc.tn.noalias() = tables.Atheta[j - t_idx] * xj;
                xn = xj;
                xn += h * sc.tn;
                sc.tn.noalias() = tables.Ctheta[j - t_idx] * xj;
                xn += inc * sc.tn;
                if (detail::bad(xn, cfg.overflow)) return false;
            }
            // backward pass
            sc.Y.noalias() = p.coeffs.H * sc.X[static_cast<size_t>(N - t_idx)];
            for (int j = N; j >= t_idx; --j) {
                const Vec& xj = sc.X[static_cast<size_t>(j - t_idx)];
                sc.Ya.noalias() = p2.at(j) * xj;
                if (j < N) {
                    sc.tn.noalias() = tables.Ctheta[j - t_idx] * xj;
                    sc.Z.noalias() = p2.at(j) * sc.tn;
                    sc.tm.noalias() = tables.AhatTheta[j - t_idx] * xj;
                    sc.tm.noalias() += tables.Chat[j - t_idx] * sc.Y;
                    sc.tm.noalias() += tables.Dhat[j - t_idx] * sc.Z;
                    sc.Y += h * sc.tm;
                    sc.Y -= sc.dw[static_cast<size_t>(j - t_idx)] * sc.Z;
                    if (detail::bad(sc.Y, cfg.overflow)) return false;
                }
                const double msq = (sc.Y - sc.Ya).squaredNorm();
                out(j - t_idx) += msq / reps;
                out(cnt + j - t_idx) += sc.Ya.squaredNorm() / reps;
            }
        }
        return true;
    };

    long long used = 0, excluded = 0;
    auto [mean, se] = detail::run_samples(samples, 2 * cnt, cfg, sample_fn, used, excluded);

    int arg = 0;
    for (int j = 0; j < cnt; ++j)
        if (mean(j) > mean(arg)) arg = j;
    double scale = 0.0;
    for (int j = 0; j < cnt; ++j) scale = std::max(scale, mean(cnt + j));

    McReport rep;
    rep.estimate = Mat::Constant(1, 1, mean(arg));
    rep.stderror = Mat::Constant(1, 1, se(arg));
    rep.target = Mat::Constant(1, 1, scale); // size reference, not a z target
    rep.samples = used;
    rep.excluded = excluded;
    return rep;
}

/// Monte Carlo estimate of the full cost J(t, x0; u) for the feedback control
/// u = theta_used * X, with the backward pair evaluated exactly through the
/// theta_used-dependent decoupling field (Y = P2~ X, Z = P2~ C_T X). Includes
/// the <G2(t) Y(t), Y(t)> term, which is deterministic from (t, x0).
template <class GainF>
McReport mc_cost(const ProblemInstance& p, GainF&& gain, int t_idx, const Vec& x0,
                 const McConfig& cfg) {
    const int N = p.grid.steps;
    const double h = p.grid.h();
    const double sqh = std::sqrt(h);
    const double t = p.grid.node(t_idx);
    const auto tables = detail::EulerTables::build(p, gain, t_idx);
    const MatrixPath p2 = ode::integrate_p2(p, gain, cfg.overflow);

    // kernels along the path for fixed t
    std::vector<Mat> Qt(static_cast<size_t>(N - t_idx + 1)), Rt = Qt, Mt = Qt, Nt = Qt;
    for (int j = t_idx; j <= N; ++j) {
        const double s = p.grid.node(j);
        Qt[j - t_idx] = mat::sym(p.weights.Q(t, s));
        Rt[j - t_idx] = mat::sym(p.weights.R(t, s));
        Mt[j - t_idx] = mat::sym(p.weights.M(t, s));
        Nt[j - t_idx] = mat::sym(p.weights.N(t, s));
    }
    const Mat G1 = mat::sym(p.weights.G1(t));
    const Mat G2 = mat::sym(p.weights.G2(t));
    const Vec y0 = p2.at(t_idx) * x0;
    const double fixed_term = 0.5 * y0.dot(G2 * y0);

    const long long samples = cfg.antithetic ? (cfg.paths + 1) / 2 : cfg.paths;
    const int reps = cfg.antithetic ? 2 : 1;
    const int n = p.dims.n, m = p.dims.m, k = p.dims.k;
    auto sample_fn = [&, X = Vec(n), u = Vec(k), y = Vec(m), z = Vec(m), cx = Vec(n),
                      tn = Vec(n), tk = Vec(k), tm = Vec(m)](long long q,
                                                            Vec& out) mutable -> bool {
        double acc = 0.0;
        for (int r = 0; r < reps; ++r) {
            NormalStream rng(cfg.seed, static_cast<std::uint64_t>(q));
            const double sign = r == 0 ? 1.0 : -1.0;
            X = x0;
            double run = 0.0;
            for (int j = t_idx; j <= N; ++j) {
                const int a = j - t_idx;
                cx.noalias() = tables.Ctheta[a] * X;
                u.noalias() = tables.Theta[a] * X;
                y.noalias() = p2.at(j) * X;
                z.noalias() = p2.at(j) * cx;
                tn.noalias() = Qt[a] * X;
                tk.noalias() = Rt[a] * u;
                double integrand = X.dot(tn) + u.dot(tk);
                tm.noalias() = Mt[a] * y;
                integrand += y.dot(tm);
                tm.noalias() = Nt[a] * z;
                integrand += z.dot(tm);
                run += ((j == t_idx || j == N) ? 0.5 * h : h) * integrand;
                if (j < N) {
                    const double inc = sign * sqh * rng.normal();
                    tn.noalias() = tables.Atheta[a] * X;
                    X += h * tn;
                    X += inc * cx;
                    if (detail::bad(X, cfg.overflow)) return false;
                }
            }
            tn.noalias() = G1 * X;
            acc += 0.5 * (run + X.dot(tn)) + fixed_term;
        }
        out(0) = acc / reps;
        return true;
    };

    long long used = 0, excluded = 0;
    auto [mean, se] = detail::run_samples(samples, 1, cfg, sample_fn, used, excluded);
    return detail::report_from(mean, se, 1, 1, used, excluded);
}

/// Spike-variation equilibrium test. For each epsilon in the ladder (snapped
/// to whole grid steps, at least 2), the perturbed control v*chi_[t,t+eps) is
/// laid on top of the equilibrium feedback with common random numbers across
/// the two arms; Delta(eps) = (J_eps - J_bar)/eps. The backward pair of the
/// spiked arm is Y = P2 X + phi with a deterministic correction phi solving
///   phi' = -(Chat phi + (P2 B + Bhat + Dhat P2 D) v chi), phi(T) = 0.
/// The report's estimate is the per-path least-squares extrapolation of
/// Delta(eps) to eps -> 0; the rungs are attached as ladder_* fields.
template <class GainF>
McReport spike_test(const ProblemInstance& p, GainF&& gain, const MatrixPath& p2, int t_idx,
                    const Vec& x0, const Vec& v, const std::vector<double>& eps_ladder,
                    const McConfig& cfg) {
    const int N = p.grid.steps;
    const double h = p.grid.h();
    const double sqh = std::sqrt(h);
    const double t = p.grid.node(t_idx);
    const auto tables = detail::EulerTables::build(p, gain, t_idx);

    if (eps_ladder.empty()) throw DomainError("spike_test: empty epsilon ladder");
    std::vector<int> ksteps;
    std::vector<double> eps_actual;
    for (double e : eps_ladder) {
        const int k = static_cast<int>(std::lround(e / h));
        if (k < 2) {
            std::ostringstream os;
            os << "spike_test: ladder too coarse, eps=" << e << " is below 2h=" << 2 * h;
            throw DomainError(os.str());
        }
        if (t_idx + k > N) throw DomainError("spike_test: eps exceeds the remaining horizon");
        ksteps.push_back(k);
        eps_actual.push_back(k * h);
    }
    const int L = static_cast<int>(ksteps.size());

    // kernels along the path for fixed t
    std::vector<Mat> Qt(static_cast<size_t>(N - t_idx + 1)), Rt = Qt, Mt = Qt, Nt = Qt;
    for (int j = t_idx; j <= N; ++j) {
        const double s = p.grid.node(j);
        Qt[j - t_idx] = mat::sym(p.weights.Q(t, s));
        Rt[j - t_idx] = mat::sym(p.weights.R(t, s));
        Mt[j - t_idx] = mat::sym(p.weights.M(t, s));
        Nt[j - t_idx] = mat::sym(p.weights.N(t, s));
    }
    const Mat G1 = mat::sym(p.weights.G1(t));
    const Mat G2 = mat::sym(p.weights.G2(t));

    // deterministic backward correction phi per rung; RK4 on the grid (the
    // spike edge is node-aligned so stages never straddle the jump)
    std::vector<std::vector<Vec>> phi(static_cast<size_t>(L));
    {
        ode::Workspace w = ode::make_workspace(p, gain, cfg.overflow);
        for (int e = 0; e < L; ++e) {
            std::vector<Vec> ph(static_cast<size_t>(N - t_idx + 1), Vec::Zero(p.dims.m));
            auto forcing = [&](int q) -> Vec {
                const double s = w.half_time(q);
                const Mat P2s = p2.eval(s);
                return (P2s * p.coeffs.B(s) + p.coeffs.Bhat(s) +
                        p.coeffs.Dhat(s) * P2s * p.coeffs.D(s)) *
                       v;
            };
            auto f = [&](int q, const Vec& x, bool on) -> Vec {
                Vec drift = -(w.Chat[q] * x);
                if (on) drift -= forcing(q);
                return drift;
            };
            Vec cur = Vec::Zero(p.dims.m);
            for (int j = N; j > t_idx; --j) {
                const bool on = (j - 1) >= t_idx && (j - 1) < t_idx + ksteps[e];
                const Vec k1 = f(2 * j, cur, on);
                const Vec k2 = f(2 * j - 1, cur - 0.5 * h * k1, on);
                const Vec k3 = f(2 * j - 1, cur - 0.5 * h * k2, on);
                const Vec k4 = f(2 * j - 2, cur - h * k3, on);
                cur = cur - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                ph[static_cast<size_t>(j - 1 - t_idx)] = cur;
            }
            phi[static_cast<size_t>(e)] = std::move(ph);
        }
    }

    const long long samples = cfg.antithetic ? (cfg.paths + 1) / 2 : cfg.paths;
    const int reps = cfg.antithetic ? 2 : 1;

    // flat sample layout: [Delta(eps_0) ... Delta(eps_{L-1}), intercept]
    const int dim = L + 1;
    double ex_mean = 0.0;
    for (double e : eps_actual) ex_mean += e;
    ex_mean /= L;
    double sxx = 0.0;
    for (double e : eps_actual) sxx += (e - ex_mean) * (e - ex_mean);

    // per-node spike injections bv = B v, dv = D v, p2dv = P2 D v
    const int n = p.dims.n, m = p.dims.m;
    std::vector<Vec> bv(static_cast<size_t>(N - t_idx + 1)), dv = bv, p2dv = bv;
    for (int j = t_idx; j <= N; ++j) {
        bv[j - t_idx] = tables.B[j - t_idx] * v;
        dv[j - t_idx] = tables.D[j - t_idx] * v;
        p2dv[j - t_idx] = p2.at(j) * dv[j - t_idx];
    }

    struct Scratch {
        Vec X, u, y, z, cx, tn, tk, tm;
        std::vector<double> dw;
        std::vector<double> deltas;
    };
    auto path_cost = [&](Scratch& sc, int kspike, const std::vector<Vec>* ph,
                         double& cost) -> bool {
        sc.X = x0;
        double run = 0.0;
        double g2term = 0.0;
        for (int j = t_idx; j <= N; ++j) {
            const int a = j - t_idx;
            const bool on = kspike > 0 && j < t_idx + kspike;
            sc.cx.noalias() = tables.Ctheta[a] * sc.X;
            sc.u.noalias() = tables.Theta[a] * sc.X;
            if (on) sc.u += v;
            sc.y.noalias() = p2.at(j) * sc.X;
            sc.z.noalias() = p2.at(j) * sc.cx;
            if (ph != nullptr) sc.y += (*ph)[static_cast<size_t>(a)];
            if (on) sc.z += p2dv[a];
            sc.tn.noalias() = Qt[a] * sc.X;
            sc.tk.noalias() = Rt[a] * sc.u;
            double integrand = sc.X.dot(sc.tn) + sc.u.dot(sc.tk);
            sc.tm.noalias() = Mt[a] * sc.y;
            integrand += sc.y.dot(sc.tm);
            sc.tm.noalias() = Nt[a] * sc.z;
            integrand += sc.z.dot(sc.tm);
            run += ((j == t_idx || j == N) ? 0.5 * h : h) * integrand;
            if (j == t_idx) {
                sc.tm.noalias() = G2 * sc.y;
                g2term = sc.y.dot(sc.tm);
            }
            if (j < N) {
                sc.tn.noalias() = tables.Atheta[a] * sc.X;
                if (on) {
                    sc.tn += bv[a];
                    sc.cx += dv[a];
                }
                sc.X += h * sc.tn;
                sc.X += sc.dw[static_cast<size_t>(a)] * sc.cx;
                if (detail::bad(sc.X, cfg.overflow)) return false;
            }
        }
        sc.tn.noalias() = G1 * sc.X;
        cost = 0.5 * (run + sc.X.dot(sc.tn) + g2term);
        return true;
    };

    auto sample_fn = [&, sc = Scratch{Vec(n), Vec(p.dims.k), Vec(m), Vec(m), Vec(n), Vec(n),
                                      Vec(p.dims.k), Vec(m),
                                      std::vector<double>(static_cast<size_t>(N - t_idx)),
                                      std::vector<double>(static_cast<size_t>(L))}](
                         long long q, Vec& out) mutable -> bool {
        out.setZero();
        for (int r = 0; r < reps; ++r) {
            NormalStream rng(cfg.seed, static_cast<std::uint64_t>(q));
            const double sign = r == 0 ? 1.0 : -1.0;
            for (auto& d : sc.dw) d = sign * sqh * rng.normal();

            double base_cost = 0.0;
            if (!path_cost(sc, 0, nullptr, base_cost)) return false;
            double ymean = 0.0, slope_acc = 0.0;
            for (int e = 0; e < L; ++e) {
                double ce = 0.0;
                if (!path_cost(sc, ksteps[e], &phi[static_cast<size_t>(e)], ce)) return false;
                sc.deltas[static_cast<size_t>(e)] =
                    (ce - base_cost) / eps_actual[static_cast<size_t>(e)];
            }
            for (int e = 0; e < L; ++e) {
                ymean += sc.deltas[static_cast<size_t>(e)] / L;
                slope_acc += (eps_actual[static_cast<size_t>(e)] - ex_mean) *
                             sc.deltas[static_cast<size_t>(e)];
            }
            const double slope = L >= 2 && sxx > 0 ? slope_acc / sxx : 0.0;
            const double intercept = ymean - slope * ex_mean;
            for (int e = 0; e < L; ++e) out(e) += sc.deltas[static_cast<size_t>(e)] / reps;
            out(L) += (L >= 2 ? intercept : sc.deltas[0]) / reps;
        }
        return true;
    };

    long long used = 0, excluded = 0;
    auto [mean, se] = detail::run_samples(samples, dim, cfg, sample_fn, used, excluded);

    McReport rep;
    rep.estimate = Mat::Constant(1, 1, mean(L));
    rep.stderror = Mat::Constant(1, 1, se(L));
    rep.samples = used;
    rep.excluded = excluded;
    for (int e = 0; e < L; ++e) {
        rep.ladder_eps.push_back(eps_actual[static_cast<size_t>(e)]);
        rep.ladder_mean.push_back(mean(e));
        rep.ladder_se.push_back(se(e));
    }
    rep.set_target(Mat::Zero(1, 1));
    return rep;
}

} // namespace mc
} // namespace erelab
