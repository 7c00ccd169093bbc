#ifndef TWINCAL_NUMERICS_HPP
#define TWINCAL_NUMERICS_HPP

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "twincal/errors.hpp"

namespace twincal {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
struct SpdFactorization {
    Matrix lower;

    /// Solve (L L^T) x = b.
    Vector solve(const Vector& b) const {
        Vector y = lower.triangularView<Eigen::Lower>().solve(b);
        return lower.transpose().triangularView<Eigen::Upper>().solve(y);
    }
};

inline SpdFactorization cholesky(const Matrix& a) {
    if (a.rows() != a.cols())
        throw ShapeMismatchError("cholesky: matrix must be square");
    Eigen::LLT<Matrix> llt(0.5 * (a + a.transpose()));
    if (llt.info() != Eigen::Success)
        throw NotSpdError("cholesky: matrix is not positive definite");
    return SpdFactorization{llt.matrixL()};
}

/// Symmetric inverse square root via eigendecomposition: returns W with
/// W S W = I. Symmetry of W is what makes it usable as a whitening transform.
inline Matrix sym_inv_sqrt(const Matrix& s) {
    if (s.rows() != s.cols())
        throw ShapeMismatchError("sym_inv_sqrt: matrix must be square");
    Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (s + s.transpose()));
    if (eig.info() != Eigen::Success)
        throw NotSpdError("sym_inv_sqrt: eigendecomposition failed");
    const Vector& lam = eig.eigenvalues();
    if (lam.minCoeff() <= 0.0)
        throw NotSpdError("sym_inv_sqrt: nonpositive eigenvalue " + std::to_string(lam.minCoeff()));
    Vector inv_sqrt = lam.array().rsqrt();
    Matrix w = eig.eigenvectors() * inv_sqrt.asDiagonal() * eig.eigenvectors().transpose();
    return 0.5 * (w + w.transpose());
}

/// Minimum-norm least squares min ||a x - b|| via column-pivoted QR.
inline Vector solve_lls(const Matrix& a, const Vector& b) {
    if (a.rows() != b.size())
        throw ShapeMismatchError("solve_lls: rows of a must match size of b");
    if (a.rows() < a.cols())
        throw ShapeMismatchError("solve_lls: system must not be underdetermined");
    Eigen::ColPivHouseholderQR<Matrix> qr(a);
    if (qr.rank() < a.cols())
        throw RankDeficientError("solve_lls: numerical rank " + std::to_string(qr.rank()) +
                                 " < " + std::to_string(a.cols()) + " columns");
    return qr.solve(b);
}

/// Empirical quantile as the ceil(level*K)-th order statistic. The higher-rank
/// convention keeps downstream hypothesis tests conservative.
inline double empirical_quantile(const std::vector<double>& samples, double level) {
    if (samples.empty())
        throw EmptyInputError("empirical_quantile: no samples");
    if (!(level > 0.0 && level < 1.0))
        throw std::invalid_argument("empirical_quantile: level must be in (0,1)");
    const std::size_t k = samples.size();
    std::size_t rank = static_cast<std::size_t>(std::ceil(level * static_cast<double>(k)));
    rank = std::clamp<std::size_t>(rank, 1, k);
    std::vector<double> work(samples);
    std::nth_element(work.begin(), work.begin() + (rank - 1), work.end());
    return work[rank - 1];
}

namespace detail {

/// Regularized lower incomplete gamma P(a, x): series for x < a+1, Lentz
/// continued fraction for the complement otherwise.
inline double gamma_p(double a, double x) {
    if (x <= 0.0) return 0.0;
    const double lg = std::lgamma(a);
    if (x < a + 1.0) {
        double ap = a;
        double sum = 1.0 / a;
        double del = sum;
        for (int n = 0; n < 500; ++n) {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if (std::abs(del) < std::abs(sum) * 1e-16) break;
        }
        return sum * std::exp(-x + a * std::log(x) - lg);
    }
    const double tiny = 1e-300;
    double b = x + 1.0 - a;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < 500; ++i) {
        const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < 1e-16) break;
    }
    const double q = std::exp(-x + a * std::log(x) - lg) * h;
    return 1.0 - q;
}

} // namespace detail

/// Chi-squared CDF P(X <= x) with d degrees of freedom.
inline double chi2_cdf(int d, double x) {
    if (d < 1) throw std::invalid_argument("chi2_cdf: d must be >= 1");
    return detail::gamma_p(0.5 * d, 0.5 * x);
}

/// Quantile q with P(chi2_d <= q) = coverage, by bisection to 1e-9 absolute.
inline double chi2_quantile(int d, double coverage) {
    if (d < 1) throw std::invalid_argument("chi2_quantile: d must be >= 1");
    if (!(coverage > 0.0 && coverage < 1.0))
        throw std::invalid_argument("chi2_quantile: coverage must be in (0,1)");
    double hi = static_cast<double>(d) + 10.0;
    while (chi2_cdf(d, hi) < coverage) hi *= 2.0;
    double lo = 0.0;
    while (hi - lo > 1e-9) {
        const double mid = 0.5 * (lo + hi);
        if (chi2_cdf(d, mid) < coverage)
            lo = mid;
        else
            hi = mid;
    }
    return 0.5 * (lo + hi);
}

inline bool all_finite(const Vector& v) { return v.allFinite(); }
inline bool all_finite(const Matrix& m) { return m.allFinite(); }

} // namespace twincal

#endif
