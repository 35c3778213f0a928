#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>

#include "erelab/errors.hpp"

namespace erelab {

/// Dense real matrix. Dimensions stay small (<= ~8) throughout; everything is
/// value-semantic and dense.
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

namespace mat {

/// Numerical pivot floor for SPD factorizations. Distinct from the model
/// constant delta of H2: delta is a property of the problem data, this is a
/// guard against losing positivity to round-off.
inline constexpr double kDefaultPivotFloor = 1e-12;

inline bool is_finite(const Mat& m) { return m.allFinite(); }

inline double max_abs(const Mat& m) { return m.cwiseAbs().maxCoeff(); }

/// Symmetric-part projection, (M + M')/2. Exactly idempotent in floating
/// point: averaging a value with itself reproduces it bitwise.
inline Mat sym(const Mat& m) { return 0.5 * (m + m.transpose()); }

inline double asymmetry(const Mat& m) { return max_abs(m - m.transpose()); }

/// Largest singular value.
inline double spectral_norm(const Mat& m) {
    if (m.rows() == 1 && m.cols() == 1) return std::abs(m(0, 0));
    Eigen::JacobiSVD<Mat> svd(m);
    return svd.singularValues()(0);
}

/// Sum of singular values.
inline double trace_norm(const Mat& m) {
    if (m.rows() == 1 && m.cols() == 1) return std::abs(m(0, 0));
    Eigen::JacobiSVD<Mat> svd(m);
    return svd.singularValues().sum();
}

/// Smallest eigenvalue of a symmetric matrix.
inline double min_eigenvalue_sym(const Mat& s) {
    Eigen::SelfAdjointEigenSolver<Mat> es(sym(s), Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success)
        throw NoConvergence("min_eigenvalue_sym: eigenvalue iteration did not converge");
    return es.eigenvalues()(0);
}

/// Solve a*X = b for symmetric positive definite a. The factorization is the
/// certificate: a pivot below `pivot_floor` or a negative pivot raises
/// NotPositiveDefinite instead of regularizing.
inline Mat spd_solve(const Mat& a, const Mat& b, double pivot_floor = kDefaultPivotFloor) {
    const Mat s = sym(a);
    Eigen::LDLT<Mat> ldlt(s);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive() ||
        ldlt.vectorD().minCoeff() < pivot_floor) {
        throw NotPositiveDefinite("spd_solve: matrix is not positive definite (pivot < " +
                                  std::to_string(pivot_floor) + ")");
    }
    return ldlt.solve(b);
}

inline bool is_psd(const Mat& s, double tol = 0.0) { return min_eigenvalue_sym(s) >= -tol; }

/// Kronecker product, used by the forward second-moment check.
inline Mat kron(const Mat& a, const Mat& b) {
    Mat out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j)
            out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    return out;
}

} // namespace mat
} // namespace erelab
