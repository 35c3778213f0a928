#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "erelab/builtin.hpp"
#include "erelab/csv.hpp"
#include "erelab/equilibrium.hpp"
#include "erelab/mc.hpp"
#include "erelab/mollify.hpp"
#include "erelab/problem_io.hpp"

namespace erelab {
namespace app {

enum ExitCode : int {
    kOk = 0,
    kUsage = 1,
    kValidationFailed = 2,
    kNoContraction = 3,
    kBlowUp = 4,
    kVerifyFailed = 5,
    kExportCap = 6,
};

struct RunConfig {
    std::string input;       // problem file path or built-in name
    std::string out_dir = ".";
    int grid_override = 0;   // 0 = use the file's grid
    double tol = 1e-9;
    int max_iters = 4000;
    long long paths = 100000;
    std::uint64_t seed = 20240801;
    bool antithetic = false;
    bool override_assumptions = false;
    double mollify_eps = 0.0;
    long long triangle_cap = 20000000; // cells (rows * matrix entries)
    std::ostream* log = &std::cout;
};

namespace detail {

inline std::ostream& log(const RunConfig& cfg) { return *cfg.log; }

inline ProblemConfig load_config(const RunConfig& cfg) {
    if (cfg.input.empty()) throw ParseError("no --input given");
    if (builtin::is_builtin(cfg.input)) return builtin::get(cfg.input);
    return load_problem_file(cfg.input);
}

inline ProblemInstance make_instance(const RunConfig& cfg) {
    ProblemInstance p = load_config(cfg).build(cfg.grid_override);
    if (cfg.mollify_eps > 0.0) p = mollify::mollify_instance(p, cfg.mollify_eps);
    return p;
}

inline void ensure_out_dir(const RunConfig& cfg) {
    std::filesystem::create_directories(cfg.out_dir);
}

inline std::string artifact(const RunConfig& cfg, const std::string& name) {
    return (std::filesystem::path(cfg.out_dir) / name).string();
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    out << text;
}

struct Artifacts {
    ProblemInstance instance;
    Strategy theta;
    MatrixPath p1_diag, p2, value;
};

inline Artifacts load_artifacts(const RunConfig& cfg) {
    Artifacts a;
    a.instance = make_instance(cfg);
    const Dims d = a.instance.dims;
    const TimeGrid& g = a.instance.grid;
    a.theta = Strategy(csv::read_matrix_path(artifact(cfg, "theta.csv"), g, d.k, d.n));
    a.p1_diag = csv::read_matrix_path(artifact(cfg, "p1_diag.csv"), g, d.n, d.n);
    a.p2 = csv::read_matrix_path(artifact(cfg, "p2.csv"), g, d.m, d.n);
    a.value = csv::read_matrix_path(artifact(cfg, "value.csv"), g, d.n, d.n);
    return a;
}

} // namespace detail

inline int cmd_validate(const RunConfig& cfg) {
    detail::ensure_out_dir(cfg);
    ProblemConfig pc = detail::load_config(cfg);
    ProblemInstance p = pc.build(cfg.grid_override);
    ValidationReport rep = validate_assumptions(p);
    detail::write_text(detail::artifact(cfg, "validation.txt"),
                       "instance: " + p.name + "\n" + rep.to_string());
    detail::log(cfg) << rep.to_string();
    if (!rep.h2_ok) {
        detail::log(cfg) << "H2 failed; refusing instance (use --override-assumptions on "
                            "solve to proceed anyway)\n";
        return kValidationFailed;
    }
    if (!rep.h3_ok) detail::log(cfg) << "warning: H3 failed; solver guarantees do not apply\n";
    return kOk;
}

inline int cmd_solve(const RunConfig& cfg) {
    detail::ensure_out_dir(cfg);
    ProblemConfig pc = detail::load_config(cfg);
    ProblemInstance p = pc.build(cfg.grid_override);

    ValidationReport rep = validate_assumptions(p);
    detail::write_text(detail::artifact(cfg, "validation.txt"),
                       "instance: " + p.name + "\n" + rep.to_string());
    if (!rep.h2_ok && !cfg.override_assumptions) {
        detail::log(cfg) << "H2 failed; not solving (see validation.txt, or pass "
                            "--override-assumptions)\n";
        return kValidationFailed;
    }
    if (!rep.h3_ok)
        detail::log(cfg) << "warning: H3 failed or was not verifiable; continuing\n";

    if (cfg.mollify_eps > 0.0) p = mollify::mollify_instance(p, cfg.mollify_eps);

    SolveOptions opt;
    opt.tol = cfg.tol;
    opt.max_iters = cfg.max_iters;

    RiccatiSolution sol;
    SolveDiagnostics diag;
    try {
        auto [s, d] = solve_equilibrium(p, opt);
        sol = std::move(s);
        diag = std::move(d);
    } catch (const NoContraction& e) {
        detail::write_text(detail::artifact(cfg, "diagnostics.txt"), e.what());
        detail::log(cfg) << "no contraction: " << e.what() << "\n";
        return kNoContraction;
    } catch (const NotPositiveDefinite& e) {
        detail::write_text(detail::artifact(cfg, "diagnostics.txt"), e.what());
        detail::log(cfg) << "Riccati bracket lost positive definiteness: " << e.what() << "\n";
        return kNoContraction;
    } catch (const OverflowError& e) {
        detail::write_text(detail::artifact(cfg, "diagnostics.txt"), e.what());
        detail::log(cfg) << "blow-up detected at s=" << e.time() << " (node " << e.node()
                         << ")\n";
        return kBlowUp;
    }

    csv::write_matrix_path(detail::artifact(cfg, "theta.csv"), sol.theta.gains, "theta");
    csv::write_matrix_path(detail::artifact(cfg, "p1_diag.csv"), sol.p1_diag, "p1");
    csv::write_matrix_path(detail::artifact(cfg, "p2.csv"), sol.p2, "p2");
    csv::write_matrix_path(detail::artifact(cfg, "value.csv"), sol.value, "v");

    std::ostringstream cert;
    cert << "cv_bound (C*_V):   " << csv::num(sol.certificates.cv_bound) << "\n"
         << "cstar_bound (C*):  " << csv::num(sol.certificates.cstar_bound) << "\n"
         << "sup |V(t)|:        " << csv::num(sol.certificates.sup_value) << "  ["
         << (sol.certificates.value_sound() ? "OK" : "VIOLATED") << "]\n"
         << "sup |Theta(t)|:    " << csv::num(sol.certificates.sup_theta) << "  ["
         << (sol.certificates.theta_sound() ? "OK" : "VIOLATED") << "]\n"
         << "fixed-point residual: " << csv::num(sol.residual) << "\n";
    detail::write_text(detail::artifact(cfg, "certificates.txt"), cert.str());
    detail::write_text(detail::artifact(cfg, "diagnostics.txt"), diag.to_string());

    detail::log(cfg) << "solved " << p.name << ": residual " << sol.residual << ", sup|Theta| "
                     << sol.certificates.sup_theta << " (C* " << sol.certificates.cstar_bound
                     << "), sup|V| " << sol.certificates.sup_value << " (C*_V "
                     << sol.certificates.cv_bound << ")\n";
    return kOk;
}

struct VerifyRow {
    std::string check;
    double t = 0.0;
    double estimate = 0.0, target = 0.0, se = 0.0, z = 0.0;
    bool pass = true;
};

struct VerifyOutcome {
    bool all_pass = true;
    std::vector<VerifyRow> rows;
};

/// The statistical cross-checks behind `verify`: P1 diagonal representation
/// at 5 nodes, the closed-loop BSDE identity, cost vs. the equilibrium value
/// at 3 nodes, and the spike-variation test (two opposite random directions)
/// at 3 nodes.
inline VerifyOutcome verify_core(const ProblemInstance& p, const Strategy& theta,
                                 const MatrixPath& value, const mc::McConfig& mcfg) {
    VerifyOutcome out;
    const int N = p.grid.steps;
    const double h = p.grid.h();
    auto gain = [&theta](double s) { return theta(s); };
    const MatrixPath p2 = ode::integrate_p2(p, gain);
    const Vec x0 = Vec::Ones(p.dims.n);

    auto push = [&](VerifyRow row) {
        out.all_pass = out.all_pass && row.pass;
        out.rows.push_back(std::move(row));
    };

    // P1 diagonal representation, z against the backward ODE value
    for (int j = 1; j <= 5; ++j) {
        const int idx = j * N / 6;
        mc::McReport rep = mc::mc_p1_diag(p, gain, p2, idx, mcfg);
        VerifyRow row;
        row.check = "mc_p1_diag";
        row.t = p.grid.node(idx);
        row.estimate = mat::spectral_norm(rep.estimate);
        row.target = mat::spectral_norm(rep.target);
        row.se = rep.stderror.maxCoeff();
        row.z = rep.max_abs_z;
        row.pass = rep.max_abs_z <= 3.0;
        push(row);
    }

    // closed-loop BSDE identity: sup-s mean-square mismatch is O(h) + noise
    {
        const int idx = N / 4;
        mc::McReport rep = mc::simulate_closed_loop(p, gain, p2, x0, idx, mcfg);
        const double scale = std::max(rep.target(0, 0), 1e-12);
        VerifyRow row;
        row.check = "bsde_identity";
        row.t = p.grid.node(idx);
        row.estimate = rep.scalar();
        row.target = scale;
        row.se = rep.scalar_se();
        row.z = rep.scalar() / std::max(5.0 * h * scale + 3.0 * rep.scalar_se(), 1e-300);
        row.pass = rep.scalar() <= 5.0 * h * scale + 3.0 * rep.scalar_se();
        push(row);
    }

    // closed-loop cost vs. the quadratic value field
    for (int j = 1; j <= 3; ++j) {
        const int idx = j * N / 4;
        mc::McReport rep = mc::mc_cost(p, gain, idx, x0, mcfg);
        const double target = 0.5 * x0.dot(value.at(idx) * x0);
        rep.set_target(Mat::Constant(1, 1, target));
        VerifyRow row;
        row.check = "mc_cost_vs_value";
        row.t = p.grid.node(idx);
        row.estimate = rep.scalar();
        row.target = target;
        row.se = rep.scalar_se();
        row.z = rep.max_abs_z;
        row.pass = rep.max_abs_z <= 3.0;
        push(row);
    }

    // spike variation in two opposite random directions
    {
        mc::NormalStream dir_rng(mcfg.seed ^ 0xD1CEF00DULL, 7);
        Vec v(p.dims.k);
        for (int i = 0; i < p.dims.k; ++i) v(i) = dir_rng.normal();
        v.normalize();
        const std::vector<double> ladder = {0.2 * p.grid.T, 0.1 * p.grid.T, 0.05 * p.grid.T};
        for (int j = 1; j <= 3; ++j) {
            const int idx = j * N / 4;
            for (int s = 0; s < 2; ++s) {
                const Vec dir = s == 0 ? v : Vec(-v);
                mc::McReport rep = mc::spike_test(p, gain, p2, idx, x0, dir, ladder, mcfg);
                VerifyRow row;
                row.check = s == 0 ? "spike_test(+v)" : "spike_test(-v)";
                row.t = p.grid.node(idx);
                row.estimate = rep.scalar();
                row.target = -(3.0 * rep.scalar_se() + 2.0 * h);
                row.se = rep.scalar_se();
                row.z = rep.scalar_se() > 0 ? rep.scalar() / rep.scalar_se() : 0.0;
                row.pass = rep.scalar() >= -(3.0 * rep.scalar_se() + 2.0 * h);
                push(row);
            }
        }
    }
    return out;
}

inline int cmd_verify(const RunConfig& cfg) {
    detail::ensure_out_dir(cfg);
    detail::Artifacts art = detail::load_artifacts(cfg);
    mc::McConfig mcfg;
    mcfg.paths = cfg.paths;
    mcfg.seed = cfg.seed;
    mcfg.antithetic = cfg.antithetic;

    VerifyOutcome out = verify_core(art.instance, art.theta, art.value, mcfg);

    std::ostringstream osv;
    osv << "check,t,estimate,target,se,z,pass\n";
    for (const auto& r : out.rows)
        osv << r.check << "," << csv::num(r.t) << "," << csv::num(r.estimate) << ","
            << csv::num(r.target) << "," << csv::num(r.se) << "," << csv::num(r.z) << ","
            << (r.pass ? 1 : 0) << "\n";
    detail::write_text(detail::artifact(cfg, "verify.csv"), osv.str());

    for (const auto& r : out.rows)
        detail::log(cfg) << (r.pass ? "[ok]   " : "[FAIL] ") << r.check << " at t=" << r.t
                         << "  estimate=" << r.estimate << " target=" << r.target
                         << " se=" << r.se << " z=" << r.z << "\n";
    if (!out.all_pass) {
        for (const auto& r : out.rows)
            if (!r.pass) {
                detail::log(cfg) << "verification failed: " << r.check << " at t=" << r.t
                                 << "\n";
                break;
            }
        return kVerifyFailed;
    }
    return kOk;
}

struct Example1Result {
    bool blew_up = false;
    double blowup_time = 0.0;
    int dominance_violations = 0; // nodes in (1+h, 2) with P1 <= 1/(s-1)
    int dominance_checked = 0;
    double p1_at_0 = 0.0, p2_at_0 = 0.0;
};

/// Integrate the paper's scalar reduced system
///   dP1/ds = P1^2 - 2e P2^2,  dP2/ds = P2 P1,  P1(2) = P2(2) = 1
/// backward on [0, 2] and compare P1 against the auxiliary curve
/// P(s) = 1/(s-1). Writes example1.csv (s, P1, P2, comparison).
inline Example1Result run_example1(int steps, const std::string& csv_path) {
    const double T = 2.0;
    const TimeGrid g(T, steps);
    const double h = g.h();
    const double e = std::exp(1.0);

    std::vector<double> P1(static_cast<size_t>(g.nodes()),
                           std::numeric_limits<double>::quiet_NaN());
    std::vector<double> P2 = P1;
    P1.back() = 1.0;
    P2.back() = 1.0;

    Example1Result res;
    auto f1 = [&](double p1, double p2) { return p1 * p1 - 2.0 * e * p2 * p2; };
    auto f2 = [&](double p1, double p2) { return p2 * p1; };
    double y1 = 1.0, y2 = 1.0;
    int first_node = 0;
    for (int j = g.steps; j > 0; --j) {
        const double k11 = f1(y1, y2), k12 = f2(y1, y2);
        const double a1 = y1 - 0.5 * h * k11, a2 = y2 - 0.5 * h * k12;
        const double k21 = f1(a1, a2), k22 = f2(a1, a2);
        const double b1 = y1 - 0.5 * h * k21, b2 = y2 - 0.5 * h * k22;
        const double k31 = f1(b1, b2), k32 = f2(b1, b2);
        const double c1 = y1 - h * k31, c2 = y2 - h * k32;
        const double k41 = f1(c1, c2), k42 = f2(c1, c2);
        y1 -= (h / 6.0) * (k11 + 2 * k21 + 2 * k31 + k41);
        y2 -= (h / 6.0) * (k12 + 2 * k22 + 2 * k32 + k42);
        if (!std::isfinite(y1) || !std::isfinite(y2) || std::abs(y1) > 1e12 ||
            std::abs(y2) > 1e12) {
            res.blew_up = true;
            res.blowup_time = g.node(j - 1);
            first_node = j;
            break;
        }
        P1[static_cast<size_t>(j - 1)] = y1;
        P2[static_cast<size_t>(j - 1)] = y2;
    }
    if (!res.blew_up) {
        res.p1_at_0 = P1.front();
        res.p2_at_0 = P2.front();
    }

    for (int i = first_node; i <= g.steps; ++i) {
        const double s = g.node(i);
        if (s > 1.0 + h && s < T && std::isfinite(P1[static_cast<size_t>(i)])) {
            ++res.dominance_checked;
            if (!(P1[static_cast<size_t>(i)] > 1.0 / (s - 1.0))) ++res.dominance_violations;
        }
    }

    if (!csv_path.empty()) {
        std::ofstream out(csv_path);
        if (!out) throw Error("cannot write " + csv_path);
        out << "s,p1,p2,comparison\n";
        for (int i = 0; i <= g.steps; ++i) {
            const double s = g.node(i);
            out << csv::num(s) << "," << csv::num(P1[static_cast<size_t>(i)]) << ","
                << csv::num(P2[static_cast<size_t>(i)]) << ",";
            if (s > 1.0)
                out << csv::num(1.0 / (s - 1.0));
            else
                out << "nan";
            out << "\n";
        }
    }
    return res;
}

inline int cmd_example1(const RunConfig& cfg) {
    detail::ensure_out_dir(cfg);
    const int steps = cfg.grid_override > 0 ? cfg.grid_override : 800;
    Example1Result res = run_example1(steps, detail::artifact(cfg, "example1.csv"));
    detail::log(cfg) << "example1: N=" << steps
                     << " dominance P1(s) > 1/(s-1) on (1+h,2): " << res.dominance_violations
                     << " violation(s) out of " << res.dominance_checked << " nodes\n";
    if (res.blew_up) {
        detail::log(cfg) << "example1: blow-up (entry > 1e12) at s=" << res.blowup_time << "\n";
        return kBlowUp;
    }
    detail::log(cfg) << "example1: no blow-up; P1(0)=" << res.p1_at_0
                     << " P2(0)=" << res.p2_at_0 << " (bounded solution)\n";
    return kOk;
}

inline int cmd_export_triangle(const RunConfig& cfg) {
    detail::ensure_out_dir(cfg);
    detail::Artifacts art = detail::load_artifacts(cfg);
    const ProblemInstance& p = art.instance;
    const int N = p.grid.steps;
    const long long rows = static_cast<long long>(N + 1) * (N + 2) / 2;
    const long long cells = rows * p.dims.n * p.dims.n;
    if (cells > cfg.triangle_cap) {
        detail::log(cfg) << "triangle export would write " << cells << " cells, above cap "
                         << cfg.triangle_cap << "\n";
        return kExportCap;
    }

    ode::Workspace w =
        ode::make_workspace(p, [&art](double s) { return art.theta(s); });
    ode::attach_p2(w, art.p2);

    std::vector<MatrixPath> slices;
    slices.reserve(static_cast<size_t>(N + 1));
    for (int i = 0; i <= N; ++i) slices.push_back(MatrixPath());
    parallel_for(0, N + 1, [&](int i) { slices[static_cast<size_t>(i)] =
                                            ode::integrate_p1_slice_ws(w, i); });

    std::ofstream out(detail::artifact(cfg, "triangle.csv"));
    if (!out) throw Error("cannot write triangle.csv");
    out << "t,s";
    for (int r = 0; r < p.dims.n; ++r)
        for (int c = 0; c < p.dims.n; ++c) out << ",p1_" << r << "_" << c;
    out << "\n";
    for (int i = 0; i <= N; ++i) {
        for (int j = i; j <= N; ++j) {
            out << csv::num(p.grid.node(i)) << "," << csv::num(p.grid.node(j));
            const Mat& v = slices[static_cast<size_t>(i)].at(j);
            for (int r = 0; r < p.dims.n; ++r)
                for (int c = 0; c < p.dims.n; ++c) out << "," << csv::num(v(r, c));
            out << "\n";
        }
    }
    detail::log(cfg) << "wrote triangle.csv (" << rows << " rows)\n";
    return kOk;
}

/// Map library errors onto the documented exit codes.
template <class Fn>
int run_mapped(Fn&& fn, std::ostream& err = std::cerr) {
    try {
        return fn();
    } catch (const ParseError& e) {
        err << "parse error: " << e.what() << "\n";
        return kUsage;
    } catch (const NoContraction& e) {
        err << "no contraction: " << e.what() << "\n";
        return kNoContraction;
    } catch (const NotPositiveDefinite& e) {
        err << "positivity failure: " << e.what() << "\n";
        return kNoContraction;
    } catch (const OverflowError& e) {
        err << "blow-up: " << e.what() << "\n";
        return kBlowUp;
    } catch (const TooManyExclusions& e) {
        err << "verification failed: " << e.what() << "\n";
        return kVerifyFailed;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return kUsage;
    }
}

} // namespace app
} // namespace erelab
