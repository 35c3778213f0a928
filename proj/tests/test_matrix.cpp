#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "erelab/matrix.hpp"

using namespace erelab;

namespace {

// Independent eigenvalue oracle: cyclic Jacobi rotations on a symmetric
// matrix; returns the smallest diagonal entry after convergence.
double jacobi_min_eigenvalue(Mat a, int sweeps = 60) {
    const int n = static_cast<int>(a.rows());
    for (int sweep = 0; sweep < sweeps; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off < 1e-30) break;
        for (int p = 0; p < n; ++p) {
            for (int q = p + 1; q < n; ++q) {
                if (std::abs(a(p, q)) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                Mat rot = Mat::Identity(n, n);
                rot(p, p) = c;
                rot(q, q) = c;
                rot(p, q) = s;
                rot(q, p) = -s;
                a = rot.transpose() * a * rot;
            }
        }
    }
    double least = a(0, 0);
    for (int i = 1; i < n; ++i) least = std::min(least, a(i, i));
    return least;
}

Mat random_spd(int n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    Mat q(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) q(i, j) = unif(rng);
    Mat spd = q * q.transpose() + 0.5 * Mat::Identity(n, n);
    return spd;
}

} // namespace

TEST_CASE("spectral norm on reference matrices") {
    CHECK(mat::spectral_norm(Mat::Identity(3, 3)) == Catch::Approx(1.0));
    CHECK(mat::spectral_norm(Mat::Zero(2, 3)) == Catch::Approx(0.0).margin(0.0));
    Mat d(2, 2);
    d << 3, 0, 0, 4;
    // eigenvalues of M'M are 9 and 16, so the norm is 4
    CHECK(mat::spectral_norm(d) == Catch::Approx(4.0));
}

TEST_CASE("trace norm on reference matrices") {
    CHECK(mat::trace_norm(Mat::Identity(5, 5)) == Catch::Approx(5.0));
    Mat d(2, 2);
    d << 3, 0, 0, 4;
    CHECK(mat::trace_norm(d) == Catch::Approx(7.0));
    CHECK(mat::trace_norm(Mat::Zero(3, 3)) == Catch::Approx(0.0).margin(0.0));
}

TEST_CASE("trace norm dominates spectral norm") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> unif(-2.0, 2.0);
    for (int trial = 0; trial < 50; ++trial) {
        const int r = 1 + static_cast<int>(rng() % 5);
        const int c = 1 + static_cast<int>(rng() % 5);
        Mat m(r, c);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) m(i, j) = unif(rng);
        CHECK(mat::trace_norm(m) >= mat::spectral_norm(m) - 1e-12);
    }
}

TEST_CASE("symmetrize is exactly idempotent") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> unif(-3.0, 3.0);
    for (int trial = 0; trial < 20; ++trial) {
        Mat m(4, 4);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) m(i, j) = unif(rng);
        const Mat s = mat::sym(m);
        CHECK((mat::sym(s) - s).cwiseAbs().maxCoeff() == 0.0);
        CHECK(mat::asymmetry(s) == 0.0);
    }
}

TEST_CASE("spd_solve identity and scaling cases") {
    Mat b(2, 3);
    b << 1, 2, 3, 4, 5, 6;
    CHECK((mat::spd_solve(Mat::Identity(2, 2), b) - b).cwiseAbs().maxCoeff() < 1e-14);
    const Mat x = mat::spd_solve(2.0 * Mat::Identity(2, 2), Mat::Identity(2, 2));
    CHECK((x - 0.5 * Mat::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("spd_solve rejects indefinite input") {
    Mat a(2, 2);
    a << 1, 0, 0, -1;
    CHECK_THROWS_AS(mat::spd_solve(a, Mat::Identity(2, 2)), NotPositiveDefinite);
    CHECK_THROWS_AS(mat::spd_solve(Mat::Zero(2, 2), Mat::Identity(2, 2)), NotPositiveDefinite);
}

TEST_CASE("spd_solve reconstructs the right-hand side") {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    for (int trial = 0; trial < 30; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 6);
        const Mat a = random_spd(n, rng);
        Mat b(n, 2);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < 2; ++j) b(i, j) = unif(rng);
        const Mat x = mat::spd_solve(a, b);
        const double rel = (a * x - b).cwiseAbs().maxCoeff() /
                           std::max(1.0, b.cwiseAbs().maxCoeff());
        CHECK(rel < 1e-10);
    }
}

TEST_CASE("min eigenvalue on reference matrices") {
    CHECK(mat::min_eigenvalue_sym(Mat::Identity(4, 4)) == Catch::Approx(1.0));
    Mat d = Mat::Zero(3, 3);
    d(0, 0) = 0.25; // delta
    d(1, 1) = 2.0;
    d(2, 2) = 5.0;
    CHECK(mat::min_eigenvalue_sym(d) == Catch::Approx(0.25));
    Mat a(2, 2);
    a << 2, 1, 1, 2;
    // closed form: eigenvalues 1 and 3
    CHECK(mat::min_eigenvalue_sym(a) == Catch::Approx(1.0));
}

TEST_CASE("min eigenvalue matches the Jacobi oracle on small matrices") {
    std::mt19937_64 rng(41);
    std::uniform_real_distribution<double> unif(-2.0, 2.0);
    for (int trial = 0; trial < 40; ++trial) {
        const int n = 2 + static_cast<int>(rng() % 3); // 2..4
        Mat m(n, n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) m(i, j) = unif(rng);
        const Mat s = mat::sym(m);
        CHECK(mat::min_eigenvalue_sym(s) ==
              Catch::Approx(jacobi_min_eigenvalue(s)).margin(1e-10));
    }
}

TEST_CASE("min eigenvalue sign agrees with sampled quadratic forms") {
    std::mt19937_64 rng(59);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 2 + static_cast<int>(rng() % 3);
        Mat m(n, n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) m(i, j) = unif(rng);
        const Mat s = mat::sym(m) + 0.1 * Mat::Identity(n, n);
        double sampled_min = std::numeric_limits<double>::infinity();
        for (int rep = 0; rep < 100; ++rep) {
            Vec x(n);
            for (int i = 0; i < n; ++i) x(i) = gauss(rng);
            x.normalize();
            sampled_min = std::min(sampled_min, x.dot(s * x));
        }
        const bool psd = mat::min_eigenvalue_sym(s) >= 0.0;
        CHECK(psd == (sampled_min >= -1e-10));
    }
}

TEST_CASE("kron matches the definition") {
    Mat a(2, 2), b(2, 2);
    a << 1, 2, 3, 4;
    b << 0, 1, 1, 0;
    const Mat k = mat::kron(a, b);
    REQUIRE(k.rows() == 4);
    CHECK(k(0, 1) == 1.0);  // a(0,0)*b(0,1)
    CHECK(k(0, 3) == 2.0);  // a(0,1)*b(0,1)
    CHECK(k(3, 0) == 3.0);  // a(1,0)*b(1,0)
    CHECK(k(2, 3) == 4.0);  // a(1,1)*b(0,1)
}
