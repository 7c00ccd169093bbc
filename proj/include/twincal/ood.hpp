#ifndef TWINCAL_OOD_HPP
#define TWINCAL_OOD_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "twincal/errors.hpp"
#include "twincal/features.hpp"
#include "twincal/numerics.hpp"
#include "twincal/simulators.hpp"

#include <json.hpp>

namespace twincal {

/// K feature vectors simulated at a fixed parameter point, one seed per row.
struct FeatureBank {
    Matrix h; // K x n
    Vector theta_at;
    std::vector<std::uint64_t> seeds;

    Eigen::Index count() const { return h.rows(); }
    Eigen::Index dim() const { return h.cols(); }
};

/// Mean, regularized covariance and whitening transform of a feature bank.
struct FeatureStats {
    Vector mu;
    Matrix s;
    Matrix whitener; // S^{-1/2}
    double epsilon = 0.0;
};

struct OodDecision {
    double s_obs = 0.0;
    double threshold = 0.0;
    double alpha = 0.0;
    bool is_ood = false;
    double epsilon = 0.0;
    Eigen::Index bank_size = 0;
    std::vector<double> bootstrap_stats;
};

/// Simulate K trajectories at `theta` with seeds base_seed..base_seed+k-1 and
/// compress each row. Seeds must stay disjoint from the seed-averaging set
/// {8000, 8001, 8002} used by the refinement stage.
inline FeatureBank build_bank(const ParamVector& theta, int k, const SimulatorSpec& sim,
                              const FeatureSpec& fspec, std::uint64_t base_seed) {
    if (k < 2) throw std::invalid_argument("build_bank: need k >= 2");
    FeatureBank bank;
    bank.theta_at = theta.values;
    bank.seeds.resize(k);
    bank.h.resize(k, fspec.dim());
    for (int row = 0; row < k; ++row) {
        const std::uint64_t seed = base_seed + static_cast<std::uint64_t>(row);
        bank.seeds[row] = seed;
        bank.h.row(row) = compress(simulate(theta, sim, seed), fspec).transpose();
    }
    return bank;
}

/// Relative covariance regularizer: 1e-6 * tr(S_raw)/n, floored away from zero
/// so a deterministic simulator still yields an SPD covariance.
inline double auto_epsilon(const FeatureBank& bank) {
    const Eigen::Index k = bank.count();
    const Vector mu = bank.h.colwise().mean();
    const Matrix centered = bank.h.rowwise() - mu.transpose();
    const double trace = centered.squaredNorm() / static_cast<double>(k - 1);
    const double eps = 1e-6 * trace / static_cast<double>(bank.dim());
    return std::max(eps, 1e-12);
}

/// Sample mean and covariance (K-1 divisor) plus epsilon * I, with whitener
/// from the symmetric inverse square root.
inline FeatureStats feature_stats(const FeatureBank& bank, double epsilon) {
    if (bank.count() < 2) throw std::invalid_argument("feature_stats: need K >= 2 rows");
    if (epsilon <= 0.0) throw std::invalid_argument("feature_stats: epsilon must be > 0");
    FeatureStats stats;
    stats.epsilon = epsilon;
    stats.mu = bank.h.colwise().mean();
    const Matrix centered = bank.h.rowwise() - stats.mu.transpose();
    stats.s = centered.transpose() * centered / static_cast<double>(bank.count() - 1);
    stats.s += epsilon * Matrix::Identity(bank.dim(), bank.dim());
    stats.whitener = sym_inv_sqrt(stats.s);
    return stats;
}

/// Whitened squared residual norm ||S^{-1/2}(x - mu)||^2.
inline double whitened_stat(const Vector& x, const FeatureStats& stats) {
    if (x.size() != stats.mu.size())
        throw ShapeMismatchError("whitened_stat: feature dim mismatch");
    return (stats.whitener * (x - stats.mu)).squaredNorm();
}

/// Bootstrap feature-space test: rejects when the observed whitened statistic
/// exceeds the empirical (1-alpha)-quantile of the bank's own statistics.
/// epsilon <= 0 selects the relative default.
inline OodDecision ood_test(const Vector& x_obs, const FeatureBank& bank, double epsilon,
                            double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0))
        throw std::invalid_argument("ood_test: alpha must be in (0,1)");
    if (epsilon <= 0.0) epsilon = auto_epsilon(bank);
    const FeatureStats stats = feature_stats(bank, epsilon);

    OodDecision d;
    d.alpha = alpha;
    d.epsilon = epsilon;
    d.bank_size = bank.count();
    d.s_obs = whitened_stat(x_obs, stats);
    d.bootstrap_stats.resize(bank.count());
    for (Eigen::Index k = 0; k < bank.count(); ++k)
        d.bootstrap_stats[k] = whitened_stat(bank.h.row(k).transpose(), stats);
    d.threshold = empirical_quantile(d.bootstrap_stats, 1.0 - alpha);
    d.is_ood = d.s_obs > d.threshold;
    return d;
}

inline nlohmann::json to_json(const OodDecision& d) {
    return nlohmann::json{{"s_obs", d.s_obs},     {"threshold", d.threshold},
                          {"alpha", d.alpha},     {"is_ood", d.is_ood},
                          {"K", d.bank_size},     {"epsilon", d.epsilon}};
}

} // namespace twincal

#endif
