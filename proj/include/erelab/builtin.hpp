#pragma once

#include <cmath>
#include <initializer_list>
#include <string>
#include <vector>

#include "erelab/problem_io.hpp"

namespace erelab {
namespace builtin {

namespace detail {

inline Mat mk(std::initializer_list<std::initializer_list<double>> rows) {
    const size_t r = rows.size();
    const size_t c = rows.begin()->size();
    Mat m(r, c);
    size_t i = 0;
    for (const auto& row : rows) {
        size_t j = 0;
        for (double v : row) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j++)) = v;
        ++i;
    }
    return m;
}

inline Mat eye(int n, double scale = 1.0) { return scale * Mat::Identity(n, n); }
inline Mat zero(int r, int c) { return Mat::Zero(r, c); }

} // namespace detail

/// The paper's scalar counterexample: G2 = 0 violates H2 and the coupled
/// reduced system is integrated by the example1 command.
inline ProblemConfig example1() {
    using detail::mk;
    ProblemConfig c;
    c.name = "example1";
    c.dims = {1, 1, 1};
    c.T = 2.0;
    c.steps = 800;
    c.A = EntrySpec::of(mk({{0.0}}));
    c.B = EntrySpec::of(mk({{1.0}}));
    c.C = EntrySpec::of(mk({{0.0}}));
    c.D = EntrySpec::of(mk({{0.0}}));
    c.Ahat = EntrySpec::of(mk({{0.0}}));
    c.Bhat = EntrySpec::of(mk({{0.0}}));
    c.Chat = EntrySpec::of(mk({{0.0}}));
    c.Dhat = EntrySpec::of(mk({{0.0}}));
    c.H = mk({{1.0}});
    c.Q = KernelSpec::of(mk({{0.0}}));
    c.R = KernelSpec::of(mk({{1.0}}));
    c.M = KernelSpec::of(mk({{2.0 * std::exp(1.0)}}));
    c.N = KernelSpec::of(mk({{0.0}}));
    c.G1 = EntrySpec::of(mk({{1.0}}));
    c.G2 = EntrySpec::of(mk({{0.0}}));
    c.delta = 1.0;
    c.caps.Qhat = mk({{1.0}});
    c.caps.Rhat = mk({{1.0}});
    c.caps.Mhat = mk({{2.0 * std::exp(1.0)}});
    c.caps.Nhat = mk({{1.0}});
    c.caps.G1hat = mk({{1.0}});
    c.caps.G2hat = mk({{1.0}});
    return c;
}

/// Backward part switched off (Ahat = Bhat = 0, H = 0, M = N = 0): the
/// equilibrium gain must match the classical LQ Riccati feedback.
inline ProblemConfig classical_reduction() {
    using detail::mk;
    ProblemConfig c;
    c.name = "classical_reduction";
    c.dims = {2, 1, 2};
    c.T = 1.0;
    c.steps = 400;
    c.A = EntrySpec::of(mk({{0.2, 0.1}, {0.0, -0.1}}));
    c.B = EntrySpec::of(detail::eye(2));
    c.C = EntrySpec::of(mk({{0.1, 0.0}, {0.05, 0.1}}));
    c.D = EntrySpec::of(mk({{0.2, 0.0}, {0.0, 0.3}}));
    c.Ahat = EntrySpec::of(detail::zero(1, 2));
    c.Bhat = EntrySpec::of(detail::zero(1, 2));
    c.Chat = EntrySpec::of(detail::zero(1, 1));
    c.Dhat = EntrySpec::of(detail::zero(1, 1));
    c.H = detail::zero(1, 2);
    c.Q = KernelSpec::of(detail::eye(2));
    c.R = KernelSpec::of(detail::eye(2));
    c.M = KernelSpec::of(detail::zero(1, 1));
    c.N = KernelSpec::of(detail::zero(1, 1));
    c.G1 = EntrySpec::of(detail::eye(2));
    c.G2 = EntrySpec::of(mk({{1.0}}));
    c.delta = 0.5;
    c.caps.Qhat = detail::eye(2);
    c.caps.Rhat = detail::eye(2);
    c.caps.Mhat = detail::eye(1);
    c.caps.Nhat = detail::eye(1);
    c.caps.G1hat = detail::eye(2);
    c.caps.G2hat = detail::eye(1);
    return c;
}

/// Fully coupled 2/2/2 instance with exponentially discounted kernels.
inline ProblemConfig discounted_2x2() {
    using detail::mk;
    ProblemConfig c;
    c.name = "discounted_2x2";
    c.dims = {2, 2, 2};
    c.T = 1.0;
    c.steps = 500;
    c.A = EntrySpec::of(mk({{0.10, 0.05}, {0.00, -0.15}}));
    c.B = EntrySpec::of(mk({{0.20, 0.00}, {0.00, 0.25}}));
    c.C = EntrySpec::of(mk({{0.15, 0.00}, {0.06, 0.15}}));
    c.D = EntrySpec::of(mk({{0.25, 0.00}, {0.00, 0.25}}));
    c.Ahat = EntrySpec::of(mk({{0.13, 0.00}, {0.065, 0.13}}));
    c.Bhat = EntrySpec::of(mk({{0.09, 0.00}, {0.00, 0.09}}));
    c.Chat = EntrySpec::of(mk({{-0.10, 0.00}, {0.00, -0.10}}));
    c.Dhat = EntrySpec::of(mk({{0.07, 0.00}, {0.00, 0.07}}));
    c.H = mk({{0.32, 0.00}, {0.00, 0.32}});
    const double rate = 0.3;
    c.Q = KernelSpec::exp_discount(rate, EntrySpec::of(mk({{1.0, 0.2}, {0.2, 0.8}})));
    c.R = KernelSpec::exp_discount(rate, EntrySpec::of(detail::eye(2)));
    c.M = KernelSpec::exp_discount(rate, EntrySpec::of(detail::eye(2, 0.5)));
    c.N = KernelSpec::exp_discount(rate, EntrySpec::of(detail::eye(2, 0.3)));
    c.G1 = EntrySpec::of(detail::eye(2, 0.5));
    {
        EntrySpec g2;
        g2.kind = EntrySpec::Kind::Table;
        g2.nodes = {0.0, 1.0};
        g2.values = {detail::eye(2, 0.6), detail::eye(2, 0.8)};
        c.G2 = g2;
    }
    c.delta = 0.5;
    c.caps.Qhat = mk({{1.0, 0.2}, {0.2, 0.8}});
    c.caps.Rhat = detail::eye(2);
    c.caps.Mhat = detail::eye(2, 0.5);
    c.caps.Nhat = detail::eye(2, 0.3);
    c.caps.G1hat = detail::eye(2, 0.5);
    c.caps.G2hat = detail::eye(2, 0.8);
    return c;
}

/// Larger smoke instance, n=3, m=k=2.
inline ProblemConfig smoke_3x2x2() {
    using detail::mk;
    ProblemConfig c;
    c.name = "smoke_3x2x2";
    c.dims = {3, 2, 2};
    c.T = 1.0;
    c.steps = 400;
    c.A = EntrySpec::of(mk({{0.05, 0.02, 0.00}, {0.00, -0.10, 0.03}, {0.01, 0.00, 0.08}}));
    c.B = EntrySpec::of(mk({{0.15, 0.00}, {0.05, 0.10}, {0.00, 0.20}}));
    c.C = EntrySpec::of(mk({{0.15, 0.00, 0.00}, {0.00, 0.15, 0.03}, {0.00, 0.00, 0.15}}));
    c.D = EntrySpec::of(mk({{0.25, 0.00}, {0.00, 0.20}, {0.05, 0.00}}));
    c.Ahat = EntrySpec::of(mk({{0.05, 0.02, 0.00}, {0.00, 0.05, 0.02}}));
    c.Bhat = EntrySpec::of(mk({{0.04, 0.00}, {0.00, 0.04}}));
    c.Chat = EntrySpec::of(mk({{-0.05, 0.00}, {0.00, -0.05}}));
    c.Dhat = EntrySpec::of(mk({{0.03, 0.00}, {0.00, 0.03}}));
    c.H = mk({{0.15, 0.00, 0.05}, {0.00, 0.15, 0.00}});
    const double rate = 0.2;
    c.Q = KernelSpec::exp_discount(
        rate, EntrySpec::of(mk({{0.8, 0.1, 0.0}, {0.1, 0.9, 0.0}, {0.0, 0.0, 0.7}})));
    c.R = KernelSpec::exp_discount(rate, EntrySpec::of(detail::eye(2)));
    c.M = KernelSpec::exp_discount(rate, EntrySpec::of(detail::eye(2, 0.4)));
    c.N = KernelSpec::exp_discount(rate, EntrySpec::of(detail::eye(2, 0.2)));
    c.G1 = EntrySpec::of(detail::eye(3, 0.4));
    {
        EntrySpec g2;
        g2.kind = EntrySpec::Kind::Table;
        g2.nodes = {0.0, 1.0};
        g2.values = {detail::eye(2, 0.55), detail::eye(2, 0.7)};
        c.G2 = g2;
    }
    c.delta = 0.5;
    c.caps.Qhat = mk({{0.8, 0.1, 0.0}, {0.1, 0.9, 0.0}, {0.0, 0.0, 0.7}});
    c.caps.Rhat = detail::eye(2);
    c.caps.Mhat = detail::eye(2, 0.4);
    c.caps.Nhat = detail::eye(2, 0.2);
    c.caps.G1hat = detail::eye(3, 0.4);
    c.caps.G2hat = detail::eye(2, 0.7);
    return c;
}

/// discounted_2x2 with a kinked monotone G2 (flat, then rising); feed for the
/// mollification pipeline.
inline ProblemConfig kinked_g2() {
    ProblemConfig c = discounted_2x2();
    c.name = "kinked_g2";
    EntrySpec g2;
    g2.kind = EntrySpec::Kind::Table;
    g2.nodes = {0.0, 0.5, 1.0};
    g2.values = {detail::eye(2, 0.6), detail::eye(2, 0.6), detail::eye(2, 1.0)};
    c.G2 = g2;
    c.caps.G2hat = detail::eye(2, 1.0);
    c.smoothness.h5 = false;
    return c;
}

inline std::vector<std::string> names() {
    return {"example1", "classical_reduction", "discounted_2x2", "smoke_3x2x2", "kinked_g2"};
}

inline ProblemConfig get(const std::string& name) {
    if (name == "example1") return example1();
    if (name == "classical_reduction") return classical_reduction();
    if (name == "discounted_2x2") return discounted_2x2();
    if (name == "smoke_3x2x2") return smoke_3x2x2();
    if (name == "kinked_g2") return kinked_g2();
    throw ParseError("unknown built-in problem: " + name);
}

inline bool is_builtin(const std::string& name) {
    for (const auto& n : names())
        if (n == name) return true;
    return false;
}

} // namespace builtin
} // namespace erelab
