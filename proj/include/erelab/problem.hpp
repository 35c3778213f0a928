#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "erelab/errors.hpp"
#include "erelab/matrix.hpp"
#include "erelab/time_grid.hpp"

namespace erelab {

struct Dims {
    int n = 1; // state
    int m = 1; // backward pair
    int k = 1; // control
};

/// Time-dependent matrix coefficient t -> Mat with a fixed shape. Closed-form
/// evaluators and interpolated tables share this interface.
class TimeEntry {
public:
    TimeEntry() = default;
    TimeEntry(int rows, int cols, std::function<Mat(double)> f)
        : rows_(rows), cols_(cols), f_(std::move(f)) {}

    static TimeEntry constant(const Mat& value) {
        return TimeEntry(static_cast<int>(value.rows()), static_cast<int>(value.cols()),
                         [value](double) { return value; });
    }

    /// Piecewise-linear table; evaluation at a stored node reproduces the
    /// tabulated value exactly, outside the node range the ends are held.
    static TimeEntry table(std::vector<double> nodes, std::vector<Mat> values) {
        if (nodes.size() != values.size() || nodes.size() < 2)
            throw DomainError("TimeEntry::table: need matching node/value lists (>= 2)");
        for (size_t i = 1; i < nodes.size(); ++i)
            if (!(nodes[i] > nodes[i - 1]))
                throw DomainError("TimeEntry::table: nodes must be strictly increasing");
        const int r = static_cast<int>(values.front().rows());
        const int c = static_cast<int>(values.front().cols());
        auto nod = std::make_shared<std::vector<double>>(std::move(nodes));
        auto val = std::make_shared<std::vector<Mat>>(std::move(values));
        return TimeEntry(r, c, [nod, val](double t) {
            const auto& ts = *nod;
            const auto& vs = *val;
            if (t <= ts.front()) return vs.front();
            if (t >= ts.back()) return vs.back();
            size_t j = 1;
            while (ts[j] < t) ++j;
            const double span = ts[j] - ts[j - 1];
            double w = (t - ts[j - 1]) / span;
            if (w < 1e-12) w = 0.0;
            if (w > 1.0 - 1e-12) w = 1.0;
            if (w == 0.0) return vs[j - 1];
            if (w == 1.0) return vs[j];
            return Mat((1.0 - w) * vs[j - 1] + w * vs[j]);
        });
    }

    /// Matrix polynomial coeffs[0] + t*coeffs[1] + ... (Horner).
    static TimeEntry poly(std::vector<Mat> coeffs) {
        if (coeffs.empty()) throw DomainError("TimeEntry::poly: no coefficients");
        const int r = static_cast<int>(coeffs.front().rows());
        const int c = static_cast<int>(coeffs.front().cols());
        auto cf = std::make_shared<std::vector<Mat>>(std::move(coeffs));
        return TimeEntry(r, c, [cf](double t) {
            const auto& a = *cf;
            Mat acc = a.back();
            for (size_t i = a.size() - 1; i-- > 0;) acc = a[i] + t * acc;
            return acc;
        });
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    bool valid() const { return static_cast<bool>(f_); }

    Mat operator()(double t) const {
        Mat v = f_(t);
        if (!mat::is_finite(v)) {
            std::ostringstream os;
            os << "TimeEntry: non-finite value at t=" << t;
            throw DomainError(os.str());
        }
        return v;
    }

private:
    int rows_ = 0, cols_ = 0;
    std::function<Mat(double)> f_;
};

/// Two-time weighting kernel (t, s) -> Mat on the triangle t <= s.
class KernelEntry {
public:
    KernelEntry() = default;
    KernelEntry(int rows, int cols, std::function<Mat(double, double)> f)
        : rows_(rows), cols_(cols), f_(std::move(f)) {}

    static KernelEntry constant(const Mat& value) {
        return KernelEntry(static_cast<int>(value.rows()), static_cast<int>(value.cols()),
                           [value](double, double) { return value; });
    }

    /// t-independent kernel K(t, s) = base(s).
    static KernelEntry of_s(const TimeEntry& base) {
        return KernelEntry(base.rows(), base.cols(),
                           [base](double, double s) { return base(s); });
    }

    /// Separable discounted kernel K(t, s) = lam(s - t) * base(s).
    static KernelEntry discounted(std::function<double(double)> lam, const TimeEntry& base,
                                  double horizon) {
        return KernelEntry(base.rows(), base.cols(),
                           [lam, base, horizon](double t, double s) {
                               const double u = s - t;
                               if (u < -1e-9 || u > horizon + 1e-9) {
                                   std::ostringstream os;
                                   os << "discounted kernel: lag " << u << " outside [0, "
                                      << horizon << "]";
                                   throw DomainError(os.str());
                               }
                               return Mat(lam(std::max(u, 0.0)) * base(s));
                           });
    }

    /// Triangular table on a uniform grid: values[idx(i,j)] = K(t_i, t_j) for
    /// i <= j, bilinear interpolation inside cells, diagonal-frozen below t=s.
    static KernelEntry table2(const TimeGrid& grid, std::vector<Mat> tri_values) {
        const int cnt = grid.nodes();
        if (static_cast<int>(tri_values.size()) != cnt * (cnt + 1) / 2)
            throw DomainError("KernelEntry::table2: triangle size mismatch");
        const int r = static_cast<int>(tri_values.front().rows());
        const int c = static_cast<int>(tri_values.front().cols());
        auto vals = std::make_shared<std::vector<Mat>>(std::move(tri_values));
        auto value_at = [cnt](const std::vector<Mat>& v, int i, int j) -> const Mat& {
            if (i > j) i = j; // freeze below the diagonal
            const int idx = i * (2 * cnt - i - 1) / 2 + j;
            return v[static_cast<size_t>(idx)];
        };
        return KernelEntry(r, c, [grid, vals, value_at](double t, double s) {
            const double h = grid.h();
            auto locate = [&](double x, int& j, double& w) {
                double u = x / h;
                if (u <= 0) { j = 0; w = 0.0; return; }
                if (u >= grid.steps) { j = grid.steps; w = 0.0; return; }
                j = static_cast<int>(std::floor(u));
                w = u - j;
                if (w < 1e-9) w = 0.0;
                if (w > 1.0 - 1e-9) { j += 1; w = 0.0; }
            };
            int it = 0, is = 0;
            double wt = 0.0, ws = 0.0;
            locate(t, it, wt);
            locate(s, is, ws);
            const auto& v = *vals;
            Mat out = (1 - wt) * (1 - ws) * value_at(v, it, is);
            if (ws > 0.0) out += (1 - wt) * ws * value_at(v, it, is + 1);
            if (wt > 0.0) out += wt * (1 - ws) * value_at(v, it + 1, is);
            if (wt > 0.0 && ws > 0.0) out += wt * ws * value_at(v, it + 1, is + 1);
            return out;
        });
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    bool valid() const { return static_cast<bool>(f_); }

    Mat operator()(double t, double s) const {
        Mat v = f_(t, s);
        if (!mat::is_finite(v)) {
            std::ostringstream os;
            os << "KernelEntry: non-finite value at (t,s)=(" << t << "," << s << ")";
            throw DomainError(os.str());
        }
        return v;
    }

private:
    int rows_ = 0, cols_ = 0;
    std::function<Mat(double, double)> f_;
};

/// Kernel K(t, s) = lam(s - t) * base(s) with lam positive and nonincreasing;
/// satisfies the H3 monotonicity in t by construction.
inline KernelEntry discounted_kernel(std::function<double(double)> lam, const TimeEntry& base,
                                     double horizon) {
    return KernelEntry::discounted(std::move(lam), base, horizon);
}

/// Coefficients of the state pair: forward dX = (AX+Bu)ds + (CX+Du)dW and
/// backward dY = -(Ahat X + Bhat u + Chat Y + Dhat Z)ds + Z dW, Y(T) = H X(T).
struct CoefficientSet {
    TimeEntry A, B, C, D;          // n*n, n*k, n*n, n*k
    TimeEntry Ahat, Bhat;          // m*n, m*k
    TimeEntry Chat, Dhat;          // m*m, m*m
    Mat H;                         // m*n
};

struct WeightCaps {
    Mat Qhat, Rhat, Mhat, Nhat, G1hat, G2hat;
};

/// Two-time weighting kernels, terminal weights and the H2 constant delta.
struct WeightKernelSet {
    KernelEntry Q, R, M, N;        // n*n, k*k, m*m, m*m
    TimeEntry G1, G2;              // n*n, m*m
    double delta = 0.0;
    WeightCaps caps;
};

struct SmoothnessFlags {
    bool h4 = true;
    bool h5 = true;
};

struct ProblemInstance {
    std::string name;
    Dims dims;
    TimeGrid grid;
    CoefficientSet coeffs;
    WeightKernelSet weights;
    SmoothnessFlags smoothness;

    void check_shapes() const {
        auto want = [&](const char* field, int r, int c, int er, int ec) {
            if (r != er || c != ec) {
                std::ostringstream os;
                os << "ProblemInstance: " << field << " has shape " << r << "x" << c
                   << ", expected " << er << "x" << ec;
                throw DomainError(os.str());
            }
        };
        const int n = dims.n, m = dims.m, k = dims.k;
        want("A", coeffs.A.rows(), coeffs.A.cols(), n, n);
        want("B", coeffs.B.rows(), coeffs.B.cols(), n, k);
        want("C", coeffs.C.rows(), coeffs.C.cols(), n, n);
        want("D", coeffs.D.rows(), coeffs.D.cols(), n, k);
        want("Ahat", coeffs.Ahat.rows(), coeffs.Ahat.cols(), m, n);
        want("Bhat", coeffs.Bhat.rows(), coeffs.Bhat.cols(), m, k);
        want("Chat", coeffs.Chat.rows(), coeffs.Chat.cols(), m, m);
        want("Dhat", coeffs.Dhat.rows(), coeffs.Dhat.cols(), m, m);
        want("H", static_cast<int>(coeffs.H.rows()), static_cast<int>(coeffs.H.cols()), m, n);
        want("Q", weights.Q.rows(), weights.Q.cols(), n, n);
        want("R", weights.R.rows(), weights.R.cols(), k, k);
        want("M", weights.M.rows(), weights.M.cols(), m, m);
        want("N", weights.N.rows(), weights.N.cols(), m, m);
        want("G1", weights.G1.rows(), weights.G1.cols(), n, n);
        want("G2", weights.G2.rows(), weights.G2.cols(), m, m);
        want("caps.Qhat", static_cast<int>(weights.caps.Qhat.rows()),
             static_cast<int>(weights.caps.Qhat.cols()), n, n);
        want("caps.Rhat", static_cast<int>(weights.caps.Rhat.rows()),
             static_cast<int>(weights.caps.Rhat.cols()), k, k);
        want("caps.Mhat", static_cast<int>(weights.caps.Mhat.rows()),
             static_cast<int>(weights.caps.Mhat.cols()), m, m);
        want("caps.Nhat", static_cast<int>(weights.caps.Nhat.rows()),
             static_cast<int>(weights.caps.Nhat.cols()), m, m);
        want("caps.G1hat", static_cast<int>(weights.caps.G1hat.rows()),
             static_cast<int>(weights.caps.G1hat.cols()), n, n);
        want("caps.G2hat", static_cast<int>(weights.caps.G2hat.rows()),
             static_cast<int>(weights.caps.G2hat.cols()), m, m);
        if (!(weights.delta > 0.0))
            throw DomainError("ProblemInstance: delta must be positive");
    }
};

/// One validation sub-check with its worst margin and witness point. A failed
/// check always carries the offending (t, s).
struct CheckResult {
    std::string name;
    bool passed = true;
    double margin = 0.0; // smallest eigenvalue margin seen (>= -tol passes)
    double t = 0.0, s = 0.0;
    int violations = 0;
    std::string detail;
};

struct ValidationReport {
    bool h1_ok = true, h2_ok = true, h3_ok = true;
    std::vector<CheckResult> checks;
    std::vector<std::string> smoothness_warnings;

    const CheckResult* find(const std::string& name) const {
        for (const auto& c : checks)
            if (c.name == name) return &c;
        return nullptr;
    }

    std::string to_string() const {
        std::ostringstream os;
        os << "H1 boundedness: " << (h1_ok ? "PASS" : "FAIL") << "\n";
        os << "H2 definiteness: " << (h2_ok ? "PASS" : "FAIL") << "\n";
        os << "H3 monotonicity/caps: " << (h3_ok ? "PASS" : "FAIL") << "\n";
        for (const auto& c : checks) {
            os << (c.passed ? "  [ok]   " : "  [FAIL] ") << c.name
               << "  margin=" << c.margin << "  at (t,s)=(" << c.t << "," << c.s << ")";
            if (c.violations > 0) os << "  violations=" << c.violations;
            if (!c.detail.empty()) os << "  " << c.detail;
            os << "\n";
        }
        for (const auto& w : smoothness_warnings) os << "  [warn] " << w << "\n";
        return os.str();
    }
};

namespace detail {

/// Track the worst (smallest) margin with its witness.
struct MarginTracker {
    double margin = std::numeric_limits<double>::infinity();
    double t = 0.0, s = 0.0;
    int violations = 0;

    void observe(double value, double at_t, double at_s, double tol) {
        if (value < margin) {
            margin = value;
            t = at_t;
            s = at_s;
        }
        if (value < -tol) ++violations;
    }

    CheckResult result(const std::string& name, double tol) const {
        CheckResult c;
        c.name = name;
        c.margin = std::isfinite(margin) ? margin : 0.0;
        c.t = t;
        c.s = s;
        c.violations = violations;
        c.passed = violations == 0;
        (void)tol;
        return c;
    }
};

inline double kink_score(const std::vector<Mat>& samples, double h) {
    double max_slope = 0.0, max_second = 0.0;
    for (size_t i = 1; i < samples.size(); ++i)
        max_slope = std::max(max_slope, mat::max_abs(samples[i] - samples[i - 1]) / h);
    for (size_t i = 1; i + 1 < samples.size(); ++i)
        max_second = std::max(
            max_second, mat::max_abs(samples[i + 1] - 2.0 * samples[i] + samples[i - 1]));
    if (max_slope <= 1e-14) return 0.0;
    return max_second / (h * max_slope);
}

} // namespace detail

/// Sample-check H1 (boundedness), H2 (definiteness margins) and H3
/// (t-monotonicity and caps) on the grid plus midpoints. Violations are data,
/// not errors; each failed check carries a witness point. H4/H5 smoothness is
/// only ever a warning (finite-difference kink heuristic plus user flags).
inline ValidationReport validate_assumptions(const ProblemInstance& p) {
    constexpr double kPsdTol = 1e-10;
    p.check_shapes();

    ValidationReport rep;
    const TimeGrid& g = p.grid;
    const int half = 2 * g.steps; // half-grid index range 0..half
    const double hh = g.h() / 2.0;
    auto tq = [&](int q) { return q >= half ? g.T : q * hh; };

    // --- H1: sup norms over the grid, finite evaluations.
    {
        struct Named {
            const char* name;
            const TimeEntry* e;
        };
        const Named coeffs[] = {{"A", &p.coeffs.A},       {"B", &p.coeffs.B},
                                {"C", &p.coeffs.C},       {"D", &p.coeffs.D},
                                {"Ahat", &p.coeffs.Ahat}, {"Bhat", &p.coeffs.Bhat},
                                {"Chat", &p.coeffs.Chat}, {"Dhat", &p.coeffs.Dhat}};
        for (const auto& nc : coeffs) {
            CheckResult c;
            c.name = std::string("H1: ") + nc.name + " bounded";
            double sup = 0.0;
            bool finite = true;
            double bad_t = 0.0;
            for (int q = 0; q <= half; ++q) {
                Mat v;
                try {
                    v = (*nc.e)(tq(q));
                } catch (const DomainError&) {
                    finite = false;
                    bad_t = tq(q);
                    break;
                }
                sup = std::max(sup, mat::spectral_norm(v));
            }
            c.passed = finite;
            c.margin = sup;
            c.t = finite ? 0.0 : bad_t;
            c.detail = "sup |" + std::string(nc.name) + "| = " + std::to_string(sup);
            if (!finite) rep.h1_ok = false;
            rep.checks.push_back(std::move(c));
        }
    }

    // --- H2 on all half-grid pairs t <= s.
    {
        detail::MarginTracker r_def, q_psd, m_psd, n_psd;
        for (int qt = 0; qt <= half; ++qt) {
            const double t = tq(qt);
            for (int qs = qt; qs <= half; ++qs) {
                const double s = tq(qs);
                r_def.observe(mat::min_eigenvalue_sym(p.weights.R(t, s)) - p.weights.delta, t,
                              s, kPsdTol);
                q_psd.observe(mat::min_eigenvalue_sym(p.weights.Q(t, s)), t, s, kPsdTol);
                m_psd.observe(mat::min_eigenvalue_sym(p.weights.M(t, s)), t, s, kPsdTol);
                n_psd.observe(mat::min_eigenvalue_sym(p.weights.N(t, s)), t, s, kPsdTol);
            }
        }
        detail::MarginTracker g2_def, g1_psd;
        for (int q = 0; q <= half; ++q) {
            const double t = tq(q);
            g2_def.observe(mat::min_eigenvalue_sym(p.weights.G2(t)) - p.weights.delta, t, t,
                           kPsdTol);
            g1_psd.observe(mat::min_eigenvalue_sym(p.weights.G1(t)), t, t, kPsdTol);
        }
        rep.checks.push_back(r_def.result("H2: R(t,s) >= delta I", kPsdTol));
        rep.checks.push_back(g2_def.result("H2: G2(t) >= delta I", kPsdTol));
        rep.checks.push_back(q_psd.result("H2: Q(t,s) >= 0", kPsdTol));
        rep.checks.push_back(m_psd.result("H2: M(t,s) >= 0", kPsdTol));
        rep.checks.push_back(n_psd.result("H2: N(t,s) >= 0", kPsdTol));
        rep.checks.push_back(g1_psd.result("H2: G1(t) >= 0", kPsdTol));
        for (size_t i = rep.checks.size() - 6; i < rep.checks.size(); ++i)
            if (!rep.checks[i].passed) rep.h2_ok = false;
    }

    // --- H3: adjacent-pair monotonicity in t (transitivity gives all pairs)
    // and caps by the hat matrices.
    {
        struct KernelCheck {
            const char* name;
            const KernelEntry* k;
            const Mat* cap;
        };
        const KernelCheck ks[] = {{"Q", &p.weights.Q, &p.weights.caps.Qhat},
                                  {"R", &p.weights.R, &p.weights.caps.Rhat},
                                  {"M", &p.weights.M, &p.weights.caps.Mhat},
                                  {"N", &p.weights.N, &p.weights.caps.Nhat}};
        for (const auto& kc : ks) {
            detail::MarginTracker mono, cap;
            for (int qs = 0; qs <= half; ++qs) {
                const double s = tq(qs);
                Mat prev = (*kc.k)(tq(0), s);
                cap.observe(mat::min_eigenvalue_sym(*kc.cap - prev), tq(0), s, kPsdTol);
                for (int qt = 1; qt <= qs; ++qt) {
                    const double t = tq(qt);
                    Mat curr = (*kc.k)(t, s);
                    mono.observe(mat::min_eigenvalue_sym(curr - prev), t, s, kPsdTol);
                    cap.observe(mat::min_eigenvalue_sym(*kc.cap - curr), t, s, kPsdTol);
                    prev = std::move(curr);
                }
            }
            rep.checks.push_back(
                mono.result(std::string("H3: ") + kc.name + " nondecreasing in t", kPsdTol));
            rep.checks.push_back(
                cap.result(std::string("H3: ") + kc.name + " <= cap", kPsdTol));
        }
        struct PathCheck {
            const char* name;
            const TimeEntry* e;
            const Mat* cap;
        };
        const PathCheck ps[] = {{"G1", &p.weights.G1, &p.weights.caps.G1hat},
                                {"G2", &p.weights.G2, &p.weights.caps.G2hat}};
        for (const auto& pc : ps) {
            detail::MarginTracker mono, cap;
            Mat prev = (*pc.e)(tq(0));
            cap.observe(mat::min_eigenvalue_sym(*pc.cap - prev), tq(0), tq(0), kPsdTol);
            for (int q = 1; q <= half; ++q) {
                const double t = tq(q);
                Mat curr = (*pc.e)(t);
                mono.observe(mat::min_eigenvalue_sym(curr - prev), t, t, kPsdTol);
                cap.observe(mat::min_eigenvalue_sym(*pc.cap - curr), t, t, kPsdTol);
                prev = std::move(curr);
            }
            rep.checks.push_back(
                mono.result(std::string("H3: ") + pc.name + " nondecreasing", kPsdTol));
            rep.checks.push_back(
                cap.result(std::string("H3: ") + pc.name + " <= cap", kPsdTol));
        }
        for (size_t i = rep.checks.size() - 12; i < rep.checks.size(); ++i)
            if (!rep.checks[i].passed) rep.h3_ok = false;
    }

    // --- H4/H5 heuristics: kink score from second differences; warn only.
    {
        auto sample_path = [&](const TimeEntry& e) {
            std::vector<Mat> out;
            out.reserve(static_cast<size_t>(g.nodes()));
            for (int i = 0; i < g.nodes(); ++i) out.push_back(e(g.node(i)));
            return out;
        };
        struct Named {
            const char* name;
            const TimeEntry* e;
            bool h4;
        };
        const Named entries[] = {{"A", &p.coeffs.A, true},       {"B", &p.coeffs.B, true},
                                 {"C", &p.coeffs.C, true},       {"D", &p.coeffs.D, true},
                                 {"Ahat", &p.coeffs.Ahat, true}, {"Bhat", &p.coeffs.Bhat, true},
                                 {"Chat", &p.coeffs.Chat, true}, {"Dhat", &p.coeffs.Dhat, true},
                                 {"G1", &p.weights.G1, false},   {"G2", &p.weights.G2, false}};
        for (const auto& ne : entries) {
            const double score = detail::kink_score(sample_path(*ne.e), g.h());
            if (score > 0.5) {
                std::ostringstream os;
                os << (ne.h4 ? "H4" : "H5") << " heuristic: " << ne.name
                   << " looks non-smooth (kink score " << score << ")";
                rep.smoothness_warnings.push_back(os.str());
            }
        }
        if (!p.smoothness.h4)
            rep.smoothness_warnings.push_back("H4 declared false by the instance");
        if (!p.smoothness.h5)
            rep.smoothness_warnings.push_back("H5 declared false by the instance");
    }

    return rep;
}

} // namespace erelab
