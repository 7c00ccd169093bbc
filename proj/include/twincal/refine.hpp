#ifndef TWINCAL_REFINE_HPP
#define TWINCAL_REFINE_HPP

#include <algorithm>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "twincal/features.hpp"
#include "twincal/numerics.hpp"
#include "twincal/ood.hpp"
#include "twincal/regressor.hpp"
#include "twincal/rng.hpp"
#include "twincal/simulators.hpp"

#include <json.hpp>

namespace twincal {

/// Feature map under test: theta and a noise seed in, Stage-1 features out.
/// The production map is compress(simulate(theta)); tests plug in synthetic
/// maps with known Jacobians.
using FeatureMapFn = std::function<Vector(const Vector& theta, std::uint64_t seed)>;

/// Bank statistics at a parameter point, for whitening residuals.
using StatsProviderFn = std::function<FeatureStats(const Vector& theta)>;

struct GnConfig {
    double gamma = 1e-3;            // pull toward the initial estimate
    int max_iters = 8;
    double shrink = 0.5;            // backtracking step multiplier
    double armijo = 1e-4;           // sufficient-decrease constant
    int max_halvings = 10;
    double fd_step = 1e-3;          // relative finite-difference step
    double fim_lambda = 0.0;        // <= 0 selects 1e-6 * tr(J^T J)/d
    double step_tol = 1e-6;
    std::vector<std::uint64_t> seeds_avg = {8000, 8001, 8002};
    // The whitener is estimated once at theta_init and held fixed across
    // iterations, which keeps the line-search objective a single function;
    // enable this to re-estimate (mu, S) at every accepted iterate instead.
    bool refresh_stats_each_iter = false;
    int bank_k = 150;
    std::uint64_t bank_base_seed = 0x42414e4bULL;
    double epsilon = 0.0;           // <= 0 selects the relative default
};

struct GnResult {
    ParamVector theta_gn;
    std::vector<double> objective_trace; // v at theta_init, then per accepted iterate
    double delta_misfit = 0.0;           // ||r(theta_gn)|| under the final stats
    bool line_search_failed = false;
    int accepted_steps = 0;
    FeatureStats final_stats;            // re-estimated at theta_gn
};

struct Ellipsoid {
    Vector center;
    Matrix g;        // FIM J^T J + lambda I
    Matrix b;        // Cholesky factor of G^{-1}
    double coverage = 0.95;
};

enum class SampleOrigin : std::uint8_t { ellipsoid = 0, sensitivity = 1 };

struct SampleCloud {
    std::vector<Vector> samples;
    std::vector<SampleOrigin> origins;

    std::size_t size() const { return samples.size(); }
};

inline FeatureMapFn make_feature_map(const SimulatorSpec& sim, const FeatureSpec& fspec) {
    return [sim, fspec](const Vector& theta, std::uint64_t seed) {
        return compress(euler_rollout(resolve_model(sim), theta, sim, seed), fspec);
    };
}

inline StatsProviderFn make_stats_provider(const SimulatorSpec& sim, const FeatureSpec& fspec,
                                           const GnConfig& cfg, const ParamVector& bounds) {
    return [sim, fspec, cfg, bounds](const Vector& theta) {
        const FeatureBank bank =
            build_bank(bounds.with_values(theta), cfg.bank_k, sim, fspec, cfg.bank_base_seed);
        const double eps = cfg.epsilon > 0.0 ? cfg.epsilon : auto_epsilon(bank);
        return feature_stats(bank, eps);
    };
}

/// Seed-averaged feature map f_bar(theta): mean over the averaging seeds.
inline Vector seed_avg(const FeatureMapFn& f, const Vector& theta,
                       const std::vector<std::uint64_t>& seeds) {
    if (seeds.empty()) throw EmptyInputError("seed_avg: no averaging seeds");
    Vector acc = f(theta, seeds[0]);
    for (std::size_t i = 1; i < seeds.size(); ++i) acc += f(theta, seeds[i]);
    return acc / static_cast<double>(seeds.size());
}

inline Vector seed_avg_features(const ParamVector& theta, const SimulatorSpec& sim,
                                const FeatureSpec& fspec,
                                const std::vector<std::uint64_t>& seeds) {
    return seed_avg(make_feature_map(sim, fspec), theta.values, seeds);
}

/// Whitened residual r(theta) = S^{-1/2} (f_bar(theta) - x_obs).
inline Vector whitened_residual(const ParamVector& theta, const Vector& x_obs,
                                const FeatureStats& stats, const SimulatorSpec& sim,
                                const FeatureSpec& fspec,
                                const std::vector<std::uint64_t>& seeds) {
    return stats.whitener * (seed_avg_features(theta, sim, fspec, seeds) - x_obs);
}

/// Whitened Jacobian of the seed-averaged feature map by central differences
/// with common random numbers. Perturbed points are clipped to the physical
/// box and the actual spread is used as the divisor.
inline Matrix fd_jacobian_core(const FeatureMapFn& f, const ParamVector& theta,
                               const FeatureStats& stats, const GnConfig& cfg) {
    const Eigen::Index d = theta.dim();
    const Eigen::Index n = stats.mu.size();
    Matrix j(n, d);
    for (Eigen::Index k = 0; k < d; ++k) {
        const double step = cfg.fd_step * std::max(std::abs(theta.values[k]), 1.0);
        Vector up = theta.values, dn = theta.values;
        up[k] = std::min(theta.values[k] + step, theta.hi[k]);
        dn[k] = std::max(theta.values[k] - step, theta.lo[k]);
        const double spread = up[k] - dn[k];
        if (spread <= 0.0) {
            j.col(k).setZero();
            continue;
        }
        const Vector fu = seed_avg(f, up, cfg.seeds_avg);
        const Vector fd = seed_avg(f, dn, cfg.seeds_avg);
        j.col(k) = stats.whitener * ((fu - fd) / spread);
    }
    return j;
}

inline Matrix fd_jacobian(const ParamVector& theta, const SimulatorSpec& sim,
                          const FeatureSpec& fspec, const FeatureStats& stats,
                          const GnConfig& cfg) {
    return fd_jacobian_core(make_feature_map(sim, fspec), theta, stats, cfg);
}

/// Regularized Gauss-Newton on v(theta) = 0.5 ||r(theta)||^2
///   + 0.5 gamma ||theta - theta_init||^2 with a backtracking line search.
/// Accepted iterates never increase the objective; each accepted step is
/// projected onto the physical box.
inline GnResult gauss_newton_core(const ParamVector& theta_init, const Vector& x_obs,
                                  const FeatureMapFn& f, const StatsProviderFn& stats_at,
                                  const GnConfig& cfg) {
    GnResult result;
    ParamVector theta = theta_init.clipped();
    FeatureStats stats = stats_at(theta.values);

    auto objective = [&](const Vector& th) {
        const Vector r = stats.whitener * (seed_avg(f, th, cfg.seeds_avg) - x_obs);
        return 0.5 * r.squaredNorm() + 0.5 * cfg.gamma * (th - theta_init.values).squaredNorm();
    };

    double v_cur = objective(theta.values);
    result.objective_trace.push_back(v_cur);

    for (int iter = 0; iter < cfg.max_iters; ++iter) {
        if (cfg.refresh_stats_each_iter && iter > 0) {
            stats = stats_at(theta.values);
            v_cur = objective(theta.values);
        }
        const Vector r = stats.whitener * (seed_avg(f, theta.values, cfg.seeds_avg) - x_obs);
        const Matrix j = fd_jacobian_core(f, theta, stats, cfg);
        const Vector grad = j.transpose() * r + cfg.gamma * (theta.values - theta_init.values);
        const Matrix h = j.transpose() * j +
                         cfg.gamma * Matrix::Identity(theta.dim(), theta.dim());
        const Vector delta = cholesky(h).solve(-grad);

        if (delta.norm() < cfg.step_tol * std::max(1.0, theta.values.norm())) break;

        const double slope = grad.dot(delta); // < 0 for a descent direction
        double s = 1.0;
        bool accepted = false;
        for (int halving = 0; halving <= cfg.max_halvings; ++halving) {
            const ParamVector cand = theta.with_values(theta.values + s * delta).clipped();
            const double v_cand = objective(cand.values);
            if (v_cand <= v_cur + cfg.armijo * s * slope) {
                theta = cand;
                v_cur = v_cand;
                accepted = true;
                break;
            }
            s *= cfg.shrink;
        }
        if (!accepted) {
            result.line_search_failed = true;
            break;
        }
        ++result.accepted_steps;
        result.objective_trace.push_back(v_cur);
    }

    result.theta_gn = theta;
    result.final_stats = stats_at(theta.values);
    result.delta_misfit =
        (result.final_stats.whitener * (seed_avg(f, theta.values, cfg.seeds_avg) - x_obs)).norm();
    return result;
}

inline GnResult gauss_newton(const ParamVector& theta_init, const Vector& x_obs,
                             const SimulatorSpec& sim, const FeatureSpec& fspec,
                             const GnConfig& cfg) {
    return gauss_newton_core(theta_init, x_obs, make_feature_map(sim, fspec),
                             make_stats_provider(sim, fspec, cfg, theta_init), cfg);
}

/// Approximate Fisher information G = J^T J + lambda I. lambda <= 0 selects
/// the relative default 1e-6 tr(J^T J)/d.
inline Matrix fisher_matrix(const Matrix& j, double lambda) {
    const Eigen::Index d = j.cols();
    Matrix jtj = j.transpose() * j;
    if (lambda <= 0.0)
        lambda = std::max(1e-6 * jtj.trace() / static_cast<double>(d), 1e-12);
    return jtj + lambda * Matrix::Identity(d, d);
}

namespace detail {

inline Matrix spd_inverse(const Matrix& g) {
    const SpdFactorization chol = cholesky(g);
    Matrix inv(g.rows(), g.cols());
    for (Eigen::Index c = 0; c < g.cols(); ++c)
        inv.col(c) = chol.solve(Vector::Unit(g.rows(), c));
    return 0.5 * (inv + inv.transpose());
}

} // namespace detail

inline Ellipsoid make_ellipsoid(const Vector& center, const Matrix& g, double coverage = 0.95) {
    Ellipsoid e;
    e.center = center;
    e.g = g;
    e.b = cholesky(detail::spd_inverse(g)).lower;
    e.coverage = coverage;
    return e;
}

/// Draw `count` samples theta + B z, z ~ N(0, I), B B^T = G^{-1}, projected
/// onto the physical box.
inline std::vector<Vector> sample_ellipsoid(const ParamVector& center, const Matrix& g, int count,
                                            std::uint64_t seed) {
    const Matrix b = cholesky(detail::spd_inverse(g)).lower;
    std::vector<Vector> samples;
    samples.reserve(count);
    SeedStream rng(hash_combine(seed, 0x454c4cULL));
    Vector z(center.dim());
    for (int k = 0; k < count; ++k) {
        for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
        samples.push_back(center.with_values(center.values + b * z).clipped().values);
    }
    return samples;
}

/// Axis-exploration scales r_j = (d_med / s'_j) * Delta_misfit with per
/// coordinate floor and cap; s'_j is the whitened Jacobian column norm.
inline Vector sensitivity_scales(const Matrix& j, double delta_misfit,
                                 std::vector<double> bank_dists, const Vector& scale_floor,
                                 const Vector& scale_cap) {
    if (bank_dists.empty()) throw EmptyInputError("sensitivity_scales: no bank distances");
    const double d_med = empirical_quantile(bank_dists, 0.5);
    const Eigen::Index d = j.cols();
    Vector scales(d);
    for (Eigen::Index k = 0; k < d; ++k) {
        const double sens = j.col(k).norm();
        double r = sens > 0.0 ? (d_med / sens) * delta_misfit : scale_cap[k];
        r = std::clamp(r, scale_floor[k], scale_cap[k]);
        scales[k] = r;
    }
    return scales;
}

/// Strict alternation between confidence-ellipsoid draws (even indices) and
/// single-axis sensitivity draws (odd indices); all samples clipped.
inline SampleCloud sample_hybrid(const ParamVector& center, const Matrix& g, const Vector& scales,
                                 int m_ft, std::uint64_t seed) {
    if (m_ft < 0) throw std::invalid_argument("sample_hybrid: m_ft must be >= 0");
    const Eigen::Index d = center.dim();
    const Matrix b = cholesky(detail::spd_inverse(g)).lower;
    SampleCloud cloud;
    cloud.samples.reserve(m_ft);
    cloud.origins.reserve(m_ft);
    SeedStream rng(hash_combine(seed, 0x484942ULL));
    Vector z(d);
    for (int k = 0; k < m_ft; ++k) {
        Vector delta;
        if (k % 2 == 0) {
            for (Eigen::Index i = 0; i < d; ++i) z[i] = rng.normal();
            delta = b * z;
            cloud.origins.push_back(SampleOrigin::ellipsoid);
        } else {
            const Eigen::Index axis = static_cast<Eigen::Index>(rng.below(d));
            delta = Vector::Zero(d);
            delta[axis] = scales[axis] * rng.normal();
            cloud.origins.push_back(SampleOrigin::sensitivity);
        }
        cloud.samples.push_back(center.with_values(center.values + delta).clipped().values);
    }
    return cloud;
}

/// Simulate and compress one trajectory per cloud sample; labels are the
/// sampled parameters. Samples whose simulation diverges are skipped and
/// counted in `skipped`.
inline LabeledSet build_finetune_set(const SampleCloud& cloud, const SimulatorSpec& sim,
                                     const FeatureSpec& fspec, std::uint64_t base_seed,
                                     int* skipped = nullptr) {
    if (cloud.size() == 0) throw EmptyInputError("build_finetune_set: empty cloud");
    const Eigen::Index d = cloud.samples[0].size();
    std::vector<Vector> feats;
    std::vector<Vector> labels;
    feats.reserve(cloud.size());
    int n_skipped = 0;
    const SimulatorModel& model = resolve_model(sim);
    for (std::size_t k = 0; k < cloud.size(); ++k) {
        const std::uint64_t seed = hash3(base_seed, k, 0xf1ae);
        try {
            feats.push_back(compress(euler_rollout(model, cloud.samples[k], sim, seed), fspec));
            labels.push_back(cloud.samples[k]);
        } catch (const NonFiniteError&) {
            ++n_skipped;
        }
    }
    if (skipped) *skipped = n_skipped;
    if (feats.empty()) throw NonFiniteError("build_finetune_set: every sample diverged", 0);
    LabeledSet set;
    set.x.resize(feats[0].size(), static_cast<Eigen::Index>(feats.size()));
    set.theta.resize(d, static_cast<Eigen::Index>(feats.size()));
    for (std::size_t k = 0; k < feats.size(); ++k) {
        set.x.col(static_cast<Eigen::Index>(k)) = feats[k];
        set.theta.col(static_cast<Eigen::Index>(k)) = labels[k];
    }
    return set;
}

inline nlohmann::json to_json(const GnResult& r) {
    return nlohmann::json{{"theta_gn", std::vector<double>(r.theta_gn.values.begin(),
                                                           r.theta_gn.values.end())},
                          {"objective_trace", r.objective_trace},
                          {"delta_misfit", r.delta_misfit},
                          {"accepted_steps", r.accepted_steps},
                          {"line_search_failed", r.line_search_failed}};
}

inline nlohmann::json to_json(const SampleCloud& cloud) {
    std::size_t n_ell = 0;
    for (const auto origin : cloud.origins)
        if (origin == SampleOrigin::ellipsoid) ++n_ell;
    return nlohmann::json{{"count", cloud.size()},
                          {"ellipsoid", n_ell},
                          {"sensitivity", cloud.size() - n_ell}};
}

} // namespace twincal

#endif
