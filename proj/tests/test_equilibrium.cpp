#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdlib>

#include "erelab/builtin.hpp"
#include "erelab/equilibrium.hpp"
#include "erelab/mollify.hpp"
#include "test_support.hpp"

using namespace erelab;
using test_support::ScalarSpec;
using test_support::scalar_instance;

namespace {

double cv_bound_independent(const ProblemInstance& p) {
    // spreadsheet-style re-evaluation of the bound, written separately
    auto nrm = [](const Mat& m) { return mat::spectral_norm(m); };
    const double Gh = std::max(nrm(p.weights.caps.G1hat), nrm(p.weights.caps.G2hat));
    const double Qh = nrm(p.weights.caps.Qhat);
    const double Mh = nrm(p.weights.caps.Mhat);
    const double Nh = nrm(p.weights.caps.Nhat);
    const double Hn = nrm(p.coeffs.H);
    const double n = p.dims.n, d = p.weights.delta;
    const int N = p.grid.steps;
    const double h = p.grid.h();
    double lead = 0.0, expo = 0.0;
    for (int i = 0; i < N; ++i) {
        auto at = [&](double s, auto&& f) { return f(s); };
        (void)at;
        for (int side = 0; side < 2; ++side) {
            const double s = p.grid.node(i + side);
            const double w = 0.5 * h;
            const double An = nrm(p.coeffs.A(s)), Cn = nrm(p.coeffs.C(s));
            const double Ahn = nrm(p.coeffs.Ahat(s));
            const double Chn = nrm(p.coeffs.Chat(s)), Dhn = nrm(p.coeffs.Dhat(s));
            lead += w * (Qh + Gh * Gh * Ahn * Ahn);
            expo += w * (2 * An + Cn * Cn +
                         (n / d) * (1 + Mh + Nh * Cn * Cn + 2 * Gh * Chn + 2 * Gh * Cn * Dhn));
        }
    }
    return (Gh + Gh * Hn * Hn + lead) * std::exp(expo);
}

} // namespace

TEST_CASE("terminal gain matches the closed formula") {
    ProblemInstance p = builtin::get("discounted_2x2").build(20);
    const double T = p.grid.T;
    const Mat D = p.coeffs.D(T), B = p.coeffs.B(T), C = p.coeffs.C(T);
    const Mat G1 = p.weights.G1(T), G2 = p.weights.G2(T);
    const Mat Nw = p.weights.N(T, T), R = p.weights.R(T, T);
    const Mat& H = p.coeffs.H;
    const Mat core = G1 + H.transpose() * Nw * H;
    const Mat bracket = R + D.transpose() * core * D;
    const Mat rhs = B.transpose() * G1 + D.transpose() * core * C +
                    (p.coeffs.Bhat(T).transpose() + B.transpose() * H.transpose() +
                     D.transpose() * H.transpose() * p.coeffs.Dhat(T).transpose()) *
                        G2 * H;
    const Mat expect = -bracket.ldlt().solve(rhs);
    CHECK((terminal_gain(p) - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gamma map reduces to the classical LQ feedback when P2 vanishes") {
    ProblemInstance p = builtin::get("classical_reduction").build(60);
    Strategy th = Strategy::constant(p.grid, terminal_gain(p));
    MatrixPath p2 = ode::integrate_p2(p, th);
    for (int i = 0; i <= p.grid.steps; ++i)
        REQUIRE(p2.at(i).cwiseAbs().maxCoeff() == 0.0);
    MatrixPath diag = ode::diag_p1(p, th, p2);
    Strategy out = gamma_map(p, th);
    for (int i : {0, 17, 30, 60}) {
        const double s = p.grid.node(i);
        const Mat B = p.coeffs.B(s), C = p.coeffs.C(s), D = p.coeffs.D(s);
        const Mat R = p.weights.R(s, s);
        const Mat bracket = R + D.transpose() * diag.at(i) * D;
        const Mat expect = -bracket.ldlt().solve(B.transpose() * diag.at(i) +
                                                 D.transpose() * diag.at(i) * C);
        CHECK((out.at(i) - expect).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("gamma map on example1 data returns -P1 diagonal") {
    ProblemInstance p = builtin::get("example1").build(200);
    Strategy th = Strategy::constant(p.grid, (Mat(1, 1) << -1.0).finished());
    MatrixPath p2 = ode::integrate_p2(p, th);
    MatrixPath diag = ode::diag_p1(p, th, p2);
    Strategy out = gamma_map(p, th);
    for (int i : {0, 50, 100, 200})
        CHECK(out.at(i)(0, 0) == Catch::Approx(-diag.at(i)(0, 0)).margin(1e-14));
}

TEST_CASE("cv_bound in the short-horizon limit") {
    ScalarSpec s;
    s.H = 0.7;
    s.T = 1e-9;
    s.steps = 2;
    s.G1 = 1.0;
    s.G2 = 1.0;
    ProblemInstance p = scalar_instance(s);
    const double ghat = 1.0; // caps default to 1 in the scalar builder
    CHECK(cv_bound(p) == Catch::Approx(ghat * (1.0 + 0.49)).epsilon(1e-6));
}

TEST_CASE("cv_bound with zero dynamics matches the closed form") {
    ScalarSpec s;
    s.A = s.C = s.Ahat = s.Chat = s.Dhat = 0.0;
    s.H = 0.5;
    s.T = 1.0;
    s.steps = 64;
    s.delta = 1.0;
    ProblemInstance p = scalar_instance(s);
    // force specific caps
    p.weights.caps.Qhat = (Mat(1, 1) << 0.8).finished();
    p.weights.caps.Mhat = (Mat(1, 1) << 0.0).finished();
    p.weights.caps.Nhat = (Mat(1, 1) << 0.0).finished();
    p.weights.caps.G1hat = (Mat(1, 1) << 1.0).finished();
    p.weights.caps.G2hat = (Mat(1, 1) << 1.0).finished();
    const double expect = (1.0 + 1.0 * 0.25 + 1.0 * 0.8) * std::exp(1.0 * 1.0 / 1.0);
    CHECK(cv_bound(p) == Catch::Approx(expect).epsilon(1e-12));
}

TEST_CASE("cv_bound equals an independent evaluation on generic instances") {
    for (const char* name : {"discounted_2x2", "smoke_3x2x2"}) {
        ProblemInstance p = builtin::get(name).build(80);
        CHECK(cv_bound(p) == Catch::Approx(cv_bound_independent(p)).epsilon(1e-12));
    }
}

TEST_CASE("cstar_bound with zero gain coefficients keeps only the residual term") {
    ScalarSpec s;
    s.B = s.D = s.Bhat = 0.0;
    s.C = 0.4;
    ProblemInstance p = scalar_instance(s);
    const double expect = (p.dims.n * cv_bound(p)) / (p.weights.delta * p.weights.delta);
    CHECK(cstar_bound(p) == Catch::Approx(expect).epsilon(1e-12));
}

TEST_CASE("cstar_bound matches an independent evaluation") {
    ProblemInstance p = builtin::get("discounted_2x2").build(60);
    auto nrm = [](const Mat& m) { return mat::spectral_norm(m); };
    double Bn = 0, Cn = 0, Dn = 0, Bhn = 0, Dhn = 0;
    for (int i = 0; i <= p.grid.steps; ++i) {
        const double t = p.grid.node(i);
        Bn = std::max(Bn, nrm(p.coeffs.B(t)));
        Cn = std::max(Cn, nrm(p.coeffs.C(t)));
        Dn = std::max(Dn, nrm(p.coeffs.D(t)));
        Bhn = std::max(Bhn, nrm(p.coeffs.Bhat(t)));
        Dhn = std::max(Dhn, nrm(p.coeffs.Dhat(t)));
    }
    const double Gh = std::max(nrm(p.weights.caps.G1hat), nrm(p.weights.caps.G2hat));
    const double Nh = nrm(p.weights.caps.Nhat);
    const double Cv = cv_bound(p);
    const double d = p.weights.delta;
    const double expect = Cv / d * (Bn + Cn * Dn) +
                          p.dims.n * Cv / (d * d) * (1 + Nh * Cn * Dn + Gh * Bn + Gh * Dn * Dhn) +
                          Gh * Gh / d * Bhn * Bhn;
    CHECK(cstar_bound(p) == Catch::Approx(expect).epsilon(1e-12));
}

TEST_CASE("classical reduction: equilibrium equals the independent Riccati oracle") {
    ProblemInstance p = builtin::get("classical_reduction").build(200);
    SolveOptions opt;
    opt.tol = 1e-10;
    auto [sol, diag] = solve_equilibrium(p, opt);

    const auto P = test_support::classical_riccati(p);
    const auto gains = test_support::classical_gain(p, P);
    double worst = 0.0;
    for (int i = 0; i <= p.grid.steps; ++i)
        worst = std::max(worst,
                         (sol.theta.at(i) - gains[static_cast<size_t>(i)]).cwiseAbs().maxCoeff());
    INFO("sup |Theta - oracle| = " << worst);
    CHECK(worst <= 1e-6);
    CHECK(sol.residual <= opt.tol);
    // gamma fixed point self-test
    Strategy mapped = gamma_map(p, sol.theta);
    CHECK(sup_distance(mapped, sol.theta) <= opt.tol);
}

TEST_CASE("t-independent weights satisfy the reduced diagonal ODE") {
    ProblemInstance p = builtin::get("classical_reduction").build(200);
    auto [sol, diag] = solve_equilibrium(p, {});
    const int N = p.grid.steps;
    const double h = p.grid.h();
    double worst = 0.0;
    for (int i = 2; i <= N - 2; ++i) {
        const Mat dP = (-sol.p1_diag.at(i + 2) + 8.0 * sol.p1_diag.at(i + 1) -
                        8.0 * sol.p1_diag.at(i - 1) + sol.p1_diag.at(i - 2)) /
                       (12.0 * h);
        const double s = p.grid.node(i);
        const Mat A = p.coeffs.A(s), B = p.coeffs.B(s), C = p.coeffs.C(s), D = p.coeffs.D(s);
        const Mat Th = sol.theta.at(i);
        const Mat At = A + B * Th, Ct = C + D * Th;
        const Mat& P1 = sol.p1_diag.at(i);
        const Mat& P2 = sol.p2.at(i);
        const Mat P2C = P2 * Ct;
        Mat rhs = P1 * At + At.transpose() * P1 + Ct.transpose() * P1 * Ct +
                  p.weights.Q(s, s) + Th.transpose() * p.weights.R(s, s) * Th +
                  P2.transpose() * p.weights.M(s, s) * P2 +
                  P2C.transpose() * p.weights.N(s, s) * P2C;
        worst = std::max(worst, (dP + rhs).cwiseAbs().maxCoeff());
    }
    INFO("reduced ODE residual " << worst);
    CHECK(worst <= 1e-6);
}

TEST_CASE("solver certificates hold on the coupled fixtures") {
    for (const char* name : {"discounted_2x2", "smoke_3x2x2"}) {
        ProblemInstance p = builtin::get(name).build(120);
        auto [sol, diag] = solve_equilibrium(p, {});
        INFO(name << ": sup|V| " << sol.certificates.sup_value << " vs "
                  << sol.certificates.cv_bound << "; sup|Theta| "
                  << sol.certificates.sup_theta << " vs " << sol.certificates.cstar_bound);
        CHECK(sol.certificates.value_sound());
        CHECK(sol.certificates.theta_sound());
        CHECK(sol.residual <= 1e-8);
        for (const auto& w : diag.windows) {
            if (!w.accepted) continue;
            for (double r : w.contraction_ratios) CHECK(r < 1.0);
        }
        // decomposition bounds: P1 >= 0 and delta |P2|^2 <= trace V
        for (int i = 0; i <= p.grid.steps; ++i) {
            CHECK(mat::min_eigenvalue_sym(sol.p1_diag.at(i)) >= -1e-8);
            const double p2n = mat::spectral_norm(sol.p2.at(i));
            CHECK(p.weights.delta * p2n * p2n <= sol.value.at(i).trace() + 1e-6);
        }
        // equilibrium value terminal condition: G1(T) + H' G2(T) H
        const Mat vT = mat::sym(p.weights.G1(p.grid.T) +
                                p.coeffs.H.transpose() * p.weights.G2(p.grid.T) * p.coeffs.H);
        CHECK((sol.value.at(p.grid.steps) - vT).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("accepted windows stay frozen during later extensions") {
    ProblemInstance p = builtin::get("discounted_2x2").build(96);
    SolveOptions opt;
    std::vector<std::pair<int, std::vector<Mat>>> snapshots;
    opt.on_window_accepted = [&](int left, const Strategy& th) {
        std::vector<Mat> copy;
        for (int i = left; i <= th.grid().steps; ++i) copy.push_back(th.at(i));
        snapshots.emplace_back(left, std::move(copy));
    };
    auto [sol, diag] = solve_equilibrium(p, opt);
    REQUIRE(snapshots.size() >= 2);
    for (size_t k = 0; k + 1 < snapshots.size(); ++k) {
        const auto& [left_k, snap_k] = snapshots[k];
        const auto& [left_next, snap_next] = snapshots[k + 1];
        for (int i = left_k; i <= p.grid.steps; ++i) {
            const Mat& now = snap_next[static_cast<size_t>(i - left_next)];
            const Mat& before = snap_k[static_cast<size_t>(i - left_k)];
            CHECK((now - before).cwiseAbs().maxCoeff() == 0.0);
        }
    }
}

TEST_CASE("solutions are bitwise deterministic across worker counts") {
    ProblemInstance p = builtin::get("discounted_2x2").build(80);
    setenv("ERE_LAB_THREADS", "1", 1);
    auto [sol1, d1] = solve_equilibrium(p, {});
    setenv("ERE_LAB_THREADS", "4", 1);
    auto [sol4, d4] = solve_equilibrium(p, {});
    unsetenv("ERE_LAB_THREADS");
    for (int i = 0; i <= p.grid.steps; ++i) {
        CHECK((sol1.theta.at(i) - sol4.theta.at(i)).cwiseAbs().maxCoeff() == 0.0);
        CHECK((sol1.p1_diag.at(i) - sol4.p1_diag.at(i)).cwiseAbs().maxCoeff() == 0.0);
        CHECK((sol1.p2.at(i) - sol4.p2.at(i)).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("grid refinement moves the gain by O(h) or better") {
    ProblemInstance pa = builtin::get("discounted_2x2").build(100);
    ProblemInstance pb = builtin::get("discounted_2x2").build(200);
    auto [sa, da] = solve_equilibrium(pa, {});
    auto [sb, db] = solve_equilibrium(pb, {});
    double worst = 0.0;
    for (int i = 0; i <= 100; ++i)
        worst = std::max(worst, (sa.theta.at(i) - sb.theta.at(2 * i)).cwiseAbs().maxCoeff());
    INFO("sup difference between N=100 and N=200 gains: " << worst);
    CHECK(worst <= pa.grid.h());
}

TEST_CASE("example1 under override converges to the bounded reduced solution") {
    // The reduced system P1' = P1^2 - 2e P2^2, P2' = P2 P1 from (1,1) stays

    // bounded; the full solver must reproduce it (frozen reference values
    // from two independent integrators).
    ProblemInstance p = builtin::get("example1").build(800);
    auto [sol, diag] = solve_equilibrium(p, {});
    const auto ref = test_support::example1_reference(800);
    CHECK(sol.p1_diag.at(0)(0, 0) == Catch::Approx(0.59114224).margin(1e-6));
    CHECK(sol.p2.at(0)(0, 0) == Catch::Approx(0.12068695).margin(1e-6));
    CHECK(sol.p1_diag.at(600)(0, 0) == Catch::Approx(1.44689448).margin(1e-6));
    double worst_theta = 0.0, worst_p1 = 0.0;
    for (int i = 0; i <= 800; ++i) {
        worst_theta = std::max(worst_theta,
                               std::abs(sol.theta.at(i)(0, 0) + ref.p1[static_cast<size_t>(i)]));
        worst_p1 = std::max(worst_p1, std::abs(sol.p1_diag.at(i)(0, 0) -
                                               ref.p1[static_cast<size_t>(i)]));
    }
    INFO("sup |Theta + P1_ref| = " << worst_theta << ", sup |P1 - P1_ref| = " << worst_p1);
    CHECK(worst_theta <= 1e-5);
    CHECK(worst_p1 <= 1e-5);
}

TEST_CASE("exhausting the Gamma budget reports NoContraction with diagnostics") {
    ProblemInstance p = builtin::get("discounted_2x2").build(64);
    SolveOptions opt;
    opt.max_iters = 2;
    try {
        (void)solve_equilibrium(p, opt);
        FAIL("expected NoContraction");
    } catch (const NoContraction& e) {
        const std::string msg = e.what();
        CHECK(msg.find("budget") != std::string::npos);
        CHECK(msg.find("accepted region") != std::string::npos);
    }
}
