#ifndef TWINCAL_FEATURES_HPP
#define TWINCAL_FEATURES_HPP

#include <algorithm>
#include <string>

#include "twincal/errors.hpp"
#include "twincal/numerics.hpp"
#include "twincal/simulators.hpp"

namespace twincal {

enum class FeatureKind { ar, arx };

/// Stage-1 compressor selection: AR(p) on the output, or ARX(na, nb) on
/// (output, input). `ridge` stabilizes near-rank-deficient regressor matrices.
struct FeatureSpec {
    FeatureKind kind = FeatureKind::ar;
    int ar_order = 5;
    int arx_na = 64;
    int arx_nb = 64;
    double ridge = 1e-8;

    int dim() const { return kind == FeatureKind::ar ? ar_order : arx_na + arx_nb; }
};

namespace detail {

/// Least squares with ridge solved as the augmented system [A; sqrt(r) I],
/// which keeps the orthogonal-decomposition route and equals the
/// normal-equations solution (A^T A + r I)^-1 A^T b.
inline Vector ridge_lls(const Matrix& a, const Vector& b, double ridge) {
    if (ridge <= 0.0) return solve_lls(a, b);
    const Eigen::Index rows = a.rows(), cols = a.cols();
    Matrix aug(rows + cols, cols);
    aug.topRows(rows) = a;
    aug.bottomRows(cols) = std::sqrt(ridge) * Matrix::Identity(cols, cols);
    Vector rhs = Vector::Zero(rows + cols);
    rhs.head(rows) = b;
    return solve_lls(aug, rhs);
}

} // namespace detail

/// Fit y_t ~ sum_{i=1..p} a_i y_{t-i} over t = p+1..N; returns (a_1..a_p).
inline Vector fit_ar(const Vector& y, int p, double ridge) {
    const Eigen::Index n = y.size();
    if (p < 1) throw std::invalid_argument("fit_ar: order must be >= 1");
    if (n <= 2 * p)
        throw TooShortError("fit_ar: need N > 2p, got N=" + std::to_string(n) +
                            " p=" + std::to_string(p));
    const Eigen::Index rows = n - p;
    Matrix a(rows, p);
    Vector b(rows);
    for (Eigen::Index t = p; t < n; ++t) {
        for (int i = 0; i < p; ++i) a(t - p, i) = y[t - 1 - i];
        b[t - p] = y[t];
    }
    return detail::ridge_lls(a, b, ridge);
}

/// Fit y_t ~ sum a_i y_{t-i} + sum b_j u_{t-j}; returns (a_1..a_na, b_1..b_nb).
inline Vector fit_arx(const Vector& y, const Vector& u, int na, int nb, double ridge) {
    if (na < 1 || nb < 1) throw std::invalid_argument("fit_arx: orders must be >= 1");
    if (y.size() != u.size())
        throw ShapeMismatchError("fit_arx: y and u lengths differ");
    const Eigen::Index n = y.size();
    const int lag = std::max(na, nb);
    if (n <= 2 * lag)
        throw TooShortError("fit_arx: need N > 2*max(na,nb), got N=" + std::to_string(n));
    const Eigen::Index rows = n - lag;
    Matrix a(rows, na + nb);
    Vector b(rows);
    for (Eigen::Index t = lag; t < n; ++t) {
        for (int i = 0; i < na; ++i) a(t - lag, i) = y[t - 1 - i];
        for (int j = 0; j < nb; ++j) a(t - lag, na + j) = u[t - 1 - j];
        b[t - lag] = y[t];
    }
    return detail::ridge_lls(a, b, ridge);
}

/// Stage-1 compression h(z): deterministic map from a trajectory to features.
inline Vector compress(const Trajectory& z, const FeatureSpec& spec) {
    if (spec.kind == FeatureKind::ar)
        return fit_ar(z.outputs, spec.ar_order, spec.ridge);
    return fit_arx(z.outputs, z.inputs, spec.arx_na, spec.arx_nb, spec.ridge);
}

} // namespace twincal

#endif
