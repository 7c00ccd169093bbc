#ifndef TWINCAL_PIPELINE_HPP
#define TWINCAL_PIPELINE_HPP

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "twincal/baselines.hpp"
#include "twincal/config.hpp"
#include "twincal/features.hpp"
#include "twincal/ood.hpp"
#include "twincal/refine.hpp"
#include "twincal/regressor.hpp"
#include "twincal/simulators.hpp"

#include <json.hpp>

namespace twincal {

// Seed-family tags. Every random stream in the pipeline is derived from the
// master seed through these, so streams never collide across stages.
namespace seedtag {
constexpr std::uint64_t pretrain_theta = 0x7072655448ULL;
constexpr std::uint64_t pretrain_sim = 0x70726553494dULL;
constexpr std::uint64_t train = 0x545241494eULL;
constexpr std::uint64_t observation = 0x4f4253ULL;
constexpr std::uint64_t ood_bank = 0x4f4f4442ULL;
constexpr std::uint64_t gn_stats = 0x474e5354ULL;
constexpr std::uint64_t cloud = 0x434c4f5544ULL;
constexpr std::uint64_t finetune_set = 0x46545345ULL;
constexpr std::uint64_t finetune_train = 0x46545452ULL;
constexpr std::uint64_t good_init = 0x4749ULL;
} // namespace seedtag

/// Keep a contiguous bank seed range [base, base+k) clear of the fixed
/// seed-averaging set {8000, 8001, 8002} and of unsigned wraparound.
inline std::uint64_t guard_bank_seed(std::uint64_t base, int k) {
    const std::uint64_t kk = static_cast<std::uint64_t>(k);
    if (base > ~std::uint64_t{0} - kk) base >>= 1;
    if (base <= 8002 && base + kk > 8000) base += 16384 + kk;
    return base;
}

inline void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
    jobs = std::max(1, std::min(jobs, n));
    if (jobs <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(jobs);
    for (int t = 0; t < jobs; ++t) {
        pool.emplace_back([&] {
            while (true) {
                const int i = next.fetch_add(1);
                if (i >= n) break;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

// --- pretraining bank -------------------------------------------------------

struct PretrainBank {
    Matrix thetas;   // d x m
    Matrix features; // n x m
    std::vector<Trajectory> trajectories;
    double dt = 0.0;
};

constexpr std::uint32_t kBankMagic = 0x5457424bU; // "TWBK"
constexpr std::uint32_t kBankVersion = 1;

inline void write_pretrain_bank(const std::string& path, const PretrainBank& bank) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    const std::uint64_t m = static_cast<std::uint64_t>(bank.thetas.cols());
    const std::uint64_t d = static_cast<std::uint64_t>(bank.thetas.rows());
    const std::uint64_t n = static_cast<std::uint64_t>(bank.features.rows());
    const std::uint64_t horizon =
        bank.trajectories.empty() ? 0 : static_cast<std::uint64_t>(bank.trajectories[0].length());
    detail::put_u32(os, kBankMagic);
    detail::put_u32(os, kBankVersion);
    detail::put_u64(os, horizon);
    detail::put_u64(os, m);
    detail::put_u64(os, d);
    detail::put_u64(os, n);
    detail::put_f64(os, bank.dt);
    for (std::uint64_t i = 0; i < m; ++i) {
        os.write(reinterpret_cast<const char*>(bank.thetas.col(i).data()),
                 sizeof(double) * d);
        if (!bank.trajectories.empty()) {
            const Trajectory& z = bank.trajectories[i];
            detail::put_u64(os, z.seed);
            os.write(reinterpret_cast<const char*>(z.inputs.data()), sizeof(double) * horizon);
            os.write(reinterpret_cast<const char*>(z.outputs.data()), sizeof(double) * horizon);
        } else {
            detail::put_u64(os, 0);
        }
    }
    // feature block appended after the trajectory records
    for (std::uint64_t i = 0; i < m; ++i)
        os.write(reinterpret_cast<const char*>(bank.features.col(i).data()), sizeof(double) * n);
}

inline PretrainBank read_pretrain_bank(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    if (detail::get_u32(is) != kBankMagic) throw std::runtime_error("bank: bad magic");
    if (detail::get_u32(is) != kBankVersion) throw std::runtime_error("bank: bad version");
    const auto horizon = static_cast<Eigen::Index>(detail::get_u64(is));
    const auto m = static_cast<Eigen::Index>(detail::get_u64(is));
    const auto d = static_cast<Eigen::Index>(detail::get_u64(is));
    const auto n = static_cast<Eigen::Index>(detail::get_u64(is));
    PretrainBank bank;
    bank.dt = detail::get_f64(is);
    bank.thetas.resize(d, m);
    bank.features.resize(n, m);
    if (horizon > 0) bank.trajectories.resize(m);
    for (Eigen::Index i = 0; i < m; ++i) {
        is.read(reinterpret_cast<char*>(bank.thetas.col(i).data()), sizeof(double) * d);
        const std::uint64_t seed = detail::get_u64(is);
        if (horizon > 0) {
            Trajectory& z = bank.trajectories[i];
            z.dt = bank.dt;
            z.seed = seed;
            z.inputs.resize(horizon);
            z.outputs.resize(horizon);
            is.read(reinterpret_cast<char*>(z.inputs.data()), sizeof(double) * horizon);
            is.read(reinterpret_cast<char*>(z.outputs.data()), sizeof(double) * horizon);
        }
    }
    for (Eigen::Index i = 0; i < m; ++i)
        is.read(reinterpret_cast<char*>(bank.features.col(i).data()), sizeof(double) * n);
    if (!is) throw std::runtime_error("bank: truncated file");
    return bank;
}

// --- pretraining ------------------------------------------------------------

struct PretrainResult {
    NetworkParams params;
    PretrainBank bank;
    TrainReport report;
};

/// Draw m parameters uniformly from the calibration box, simulate and
/// compress each (in parallel), then train the Stage-2 network.
inline PretrainResult run_pretrain(const ExperimentConfig& cfg, int jobs = 1) {
    const int d = cfg.param_dim();
    const SimulatorSpec sim = cfg.sim_spec();

    PretrainResult out;
    out.bank.dt = cfg.dt;
    out.bank.thetas.resize(d, cfg.m);
    out.bank.features.resize(cfg.fspec.dim(), cfg.m);
    out.bank.trajectories.resize(cfg.m);

    for (int i = 0; i < cfg.m; ++i) {
        SeedStream rng(hash3(cfg.master_seed, seedtag::pretrain_theta, i));
        for (int j = 0; j < d; ++j)
            out.bank.thetas(j, i) = rng.uniform(cfg.box_lo[j], cfg.box_hi[j]);
    }

    parallel_for(cfg.m, jobs, [&](int i) {
        const std::uint64_t sim_seed = hash3(cfg.master_seed, seedtag::pretrain_sim, i);
        Trajectory z = simulate(cfg.bounded(out.bank.thetas.col(i)), sim, sim_seed);
        out.bank.features.col(i) = compress(z, cfg.fspec);
        out.bank.trajectories[i] = std::move(z);
    });

    TrainConfig tc;
    tc.lr = cfg.lr;
    tc.batch = cfg.batch;
    tc.epochs = cfg.epochs;
    tc.target_weights = inverse_variance_weights(out.bank.thetas);
    tc.lambda_orth = cfg.lambda_orth;
    tc.huber_delta = cfg.huber_delta;
    tc.seed = hash_combine(cfg.master_seed, seedtag::train);
    tc.patience = cfg.patience;
    tc.in_std = Standardizer::fit(out.bank.features);
    tc.out_std = Standardizer::fit(out.bank.thetas);

    LabeledSet data{out.bank.features, out.bank.thetas};
    out.params = train(data, cfg.net, tc, &out.report);
    return out;
}

/// TS estimate: compress the observation, run the Stage-2 network.
inline Vector estimate(const Trajectory& obs, const NetworkParams& params,
                       const FeatureSpec& fspec) {
    return forward(compress(obs, fspec), params);
}

// --- OOD gate + fine-tune pipeline -------------------------------------------

struct FinetuneOutcome {
    bool took_skip_path = false;
    OodDecision decision;
    Vector theta_init;
    GnResult gn;
    NetworkParams params; // pretrained (skip path) or fine-tuned
    TrainReport ft_report;
    int skipped_samples = 0;
    nlohmann::json report;
};

/// Steps 1-3 for a single observation: gate, then (if rejected) Gauss-Newton
/// refinement, hybrid sampling, targeted synthesis, and head-only retraining.
inline FinetuneOutcome run_finetune(const Trajectory& obs, const NetworkParams& pre,
                                    const ExperimentConfig& cfg, std::uint64_t run_seed) {
    const SimulatorSpec sim = cfg.sim_spec();
    const Vector x_obs = compress(obs, cfg.fspec);

    FinetuneOutcome out;
    out.theta_init = forward(x_obs, pre);
    const ParamVector theta_init = cfg.bounded(out.theta_init).clipped();

    const std::uint64_t bank_seed =
        guard_bank_seed(hash_combine(run_seed, seedtag::ood_bank), cfg.k_bank);
    const FeatureBank bank = build_bank(theta_init, cfg.k_bank, sim, cfg.fspec, bank_seed);
    out.decision = ood_test(x_obs, bank, cfg.epsilon, cfg.alpha);

    out.report["theta_init"] =
        std::vector<double>(out.theta_init.begin(), out.theta_init.end());
    out.report["decision"] = to_json(out.decision);

    if (!out.decision.is_ood) {
        out.took_skip_path = true;
        out.params = pre;
        out.report["action"] = "skip";
        return out;
    }
    out.report["action"] = "finetune";

    GnConfig gn_cfg;
    gn_cfg.gamma = cfg.gamma;
    gn_cfg.max_iters = cfg.gn_max_iters;
    gn_cfg.fd_step = cfg.fd_step;
    gn_cfg.fim_lambda = cfg.fim_lambda;
    gn_cfg.bank_k = cfg.k_bank;
    gn_cfg.epsilon = cfg.epsilon;

    // Reuse the gate's bank statistics at theta_init; fresh banks (seeded by
    // the query point) back any other stats request.
    const FeatureStats init_stats = feature_stats(bank, out.decision.epsilon);
    const FeatureMapFn fmap = make_feature_map(sim, cfg.fspec);
    StatsProviderFn stats_at = [&, init_stats](const Vector& th) {
        if (th == theta_init.values) return init_stats;
        const std::uint64_t sb = guard_bank_seed(
            hash3(run_seed, seedtag::gn_stats, fnv1a64(th.data(), sizeof(double) * th.size())),
            cfg.k_bank);
        const FeatureBank b = build_bank(cfg.bounded(th), cfg.k_bank, sim, cfg.fspec, sb);
        return feature_stats(b, cfg.epsilon > 0.0 ? cfg.epsilon : auto_epsilon(b));
    };

    out.gn = gauss_newton_core(theta_init, x_obs, fmap, stats_at, gn_cfg);
    out.report["gn"] = to_json(out.gn);

    const Matrix j = fd_jacobian_core(fmap, out.gn.theta_gn, out.gn.final_stats, gn_cfg);
    const Matrix g = fisher_matrix(j, cfg.fim_lambda);

    std::vector<double> bank_dists(out.decision.bootstrap_stats.size());
    for (std::size_t i = 0; i < bank_dists.size(); ++i)
        bank_dists[i] = std::sqrt(out.decision.bootstrap_stats[i]);

    const Eigen::Index d = out.gn.theta_gn.dim();
    Vector scale_floor(d), scale_cap(d);
    for (Eigen::Index k = 0; k < d; ++k) {
        scale_floor[k] = 1e-4 * std::max(std::abs(out.gn.theta_gn.values[k]), 1.0);
        scale_cap[k] = 0.5 * (cfg.box_hi[k] - cfg.box_lo[k]);
    }
    const Vector scales = sensitivity_scales(j, out.gn.delta_misfit, bank_dists,
                                             scale_floor, scale_cap);

    const SampleCloud cloud = sample_hybrid(out.gn.theta_gn, g, scales, cfg.m_ft,
                                            hash_combine(run_seed, seedtag::cloud));
    const LabeledSet d_fine =
        build_finetune_set(cloud, sim, cfg.fspec, hash_combine(run_seed, seedtag::finetune_set),
                           &out.skipped_samples);

    TrainConfig ft;
    ft.lr = cfg.lr;
    ft.batch = cfg.batch;
    ft.epochs = cfg.ft_epochs;
    ft.lambda_orth = cfg.lambda_orth;
    ft.huber_delta = cfg.huber_delta;
    ft.seed = hash_combine(run_seed, seedtag::finetune_train);
    ft.patience = cfg.ft_patience;
    if (cfg.fresh_head) ft.replace_head = cfg.ft_head;

    out.params = finetune_heads(d_fine, pre, ft, g.diagonal(), &out.ft_report);

    out.report["cloud"] = to_json(cloud);
    out.report["skipped_samples"] = out.skipped_samples;
    out.report["sensitivity_scales"] = std::vector<double>(scales.begin(), scales.end());
    out.report["finetune"] = {{"final_train_loss", out.ft_report.final_train_loss},
                              {"best_val_loss", out.ft_report.best_val_loss},
                              {"epochs_run", out.ft_report.epochs_run}};
    return out;
}

// --- Monte-Carlo evaluation ---------------------------------------------------

struct MethodResult {
    Vector estimate;
    double ms = 0.0;
    bool flagged = false;
};

struct RunRecord {
    std::uint64_t obs_seed = 0;
    std::map<std::string, MethodResult> methods;
    bool ood_detected = false;
    double s_obs = 0.0;
    double threshold = 0.0;
};

struct TableRow {
    std::string method;
    std::string init;
    double mse = 0.0;
    double ms = 0.0;
};

struct EvaluateResult {
    std::string scenario;
    Vector theta0;
    std::vector<RunRecord> runs;
    std::vector<TableRow> table;
};

namespace detail_eval {

inline const std::vector<std::pair<std::string, std::string>>& method_order() {
    static const std::vector<std::pair<std::string, std::string>> order = {
        {"TS-pre", "-"},     {"TS-fine", "-"},   {"Dual-EKF", "GI"}, {"Dual-EKF", "TI"},
        {"PEM", "GI"},       {"PEM", "TI"},      {"Dual-EKF", "WI"}, {"PEM", "BI"},
    };
    return order;
}

inline std::string method_key(const std::string& method, const std::string& init) {
    return init == "-" ? method : method + " (" + init + ")";
}

} // namespace detail_eval

/// One full Table-1 style experiment: n_mc observations at the scenario's
/// true parameter, every estimator on each, MSE = mean ||theta_hat - theta0||^2.
inline EvaluateResult run_evaluate(const ExperimentConfig& cfg, const std::string& scenario,
                                   const NetworkParams& pre, int jobs = 1) {
    const auto scen_it = cfg.scenarios.find(scenario);
    if (scen_it == cfg.scenarios.end())
        throw std::invalid_argument("unknown scenario '" + scenario + "'");
    const Vector theta0 = scen_it->second;
    const SimulatorSpec sim = cfg.sim_spec();
    const std::uint64_t scen_hash = fnv1a64(scenario.data(), scenario.size());

    EvaluateResult result;
    result.scenario = scenario;
    result.theta0 = theta0;
    result.runs.resize(cfg.n_mc);

    const Vector bad_init = 3.0 * cfg.box_hi; // far corner of the tripled box

    parallel_for(cfg.n_mc, jobs, [&](int run) {
        RunRecord& rec = result.runs[run];
        rec.obs_seed = guard_bank_seed(hash3(cfg.master_seed + scen_hash,
                                             seedtag::observation, run), 1);
        const Trajectory obs = simulate(cfg.bounded(theta0), sim, rec.obs_seed);
        const Vector x_obs = compress(obs, cfg.fspec);

        auto timed = [&](const std::string& key, const std::function<Vector()>& fn,
                         const Vector& fallback) {
            MethodResult mr;
            const auto t0 = std::chrono::steady_clock::now();
            try {
                mr.estimate = fn();
            } catch (const std::exception&) {
                mr.estimate = fallback;
                mr.flagged = true;
            }
            const auto t1 = std::chrono::steady_clock::now();
            mr.ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
            rec.methods[key] = std::move(mr);
        };

        timed("TS-pre", [&] { return forward(x_obs, pre); }, theta0);
        const Vector ts_pre_est = rec.methods["TS-pre"].estimate;

        timed("TS-fine",
              [&] {
                  FinetuneOutcome outcome =
                      run_finetune(obs, pre, cfg, hash3(rec.obs_seed, seedtag::observation, run));
                  rec.ood_detected = outcome.decision.is_ood;
                  rec.s_obs = outcome.decision.s_obs;
                  rec.threshold = outcome.decision.threshold;
                  return forward(x_obs, outcome.params);
              },
              ts_pre_est);

        SeedStream gi_rng(hash_combine(rec.obs_seed, seedtag::good_init));
        Vector good_init(theta0.size());
        for (Eigen::Index j = 0; j < theta0.size(); ++j)
            good_init[j] = theta0[j] + 0.1 * std::abs(theta0[j]) * gi_rng.normal();

        const std::map<std::string, Vector> pem_inits = {
            {"GI", good_init}, {"TI", ts_pre_est}, {"BI", bad_init}};
        for (const auto& [label, init] : pem_inits) {
            timed("PEM (" + label + ")",
                  [&, init = init] {
                      PemConfig pc;
                      pc.init = cfg.bounded(init).clipped();
                      return pem(obs, sim, pc).theta.values;
                  },
                  init);
        }

        const std::map<std::string, Vector> ekf_inits = {
            {"GI", good_init}, {"TI", ts_pre_est}, {"WI", bad_init}};
        for (const auto& [label, init] : ekf_inits) {
            timed("Dual-EKF (" + label + ")",
                  [&, init = init] {
                      DualEkfConfig dc;
                      dc.init = cfg.bounded(init).clipped();
                      return dual_ekf(obs, sim, dc).theta.values;
                  },
                  init);
        }
    });

    for (const auto& [method, init] : detail_eval::method_order()) {
        const std::string key = detail_eval::method_key(method, init);
        TableRow row{method, init, 0.0, 0.0};
        for (const RunRecord& rec : result.runs) {
            const MethodResult& mr = rec.methods.at(key);
            row.mse += (mr.estimate - theta0).squaredNorm();
            row.ms += mr.ms;
        }
        row.mse /= static_cast<double>(cfg.n_mc);
        row.ms /= static_cast<double>(cfg.n_mc);
        result.table.push_back(row);
    }
    return result;
}

// --- emitters -----------------------------------------------------------------

inline std::string format_double(double v, const char* fmt = "%.10g") {
    char buf[64];
    std::snprintf(buf, sizeof(buf), fmt, v);
    return buf;
}

inline void write_table_csv(const std::string& path, const EvaluateResult& result) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << "method,init,mse,ms\n";
    for (const TableRow& row : result.table)
        os << row.method << "," << row.init << "," << format_double(row.mse) << ","
           << format_double(row.ms, "%.3f") << "\n";
}

/// Noise-free trajectories at the per-method mean estimates, next to the truth.
inline void write_trajectories_csv(const std::string& path, const ExperimentConfig& cfg,
                                   const EvaluateResult& result) {
    SimulatorSpec quiet = cfg.sim_spec();
    quiet.process_noise_var = Vector::Zero(quiet.process_noise_var.size());
    quiet.meas_noise_var = 0.0;

    std::vector<std::string> keys;
    std::vector<Vector> outputs;
    outputs.push_back(simulate(cfg.bounded(result.theta0), quiet, 0).outputs);
    for (const auto& [method, init] : detail_eval::method_order()) {
        const std::string key = detail_eval::method_key(method, init);
        Vector mean_est = Vector::Zero(result.theta0.size());
        for (const RunRecord& rec : result.runs) mean_est += rec.methods.at(key).estimate;
        mean_est /= static_cast<double>(result.runs.size());
        keys.push_back(key);
        outputs.push_back(simulate(cfg.bounded(mean_est).clipped(), quiet, 0).outputs);
    }

    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << "step,truth";
    for (const auto& k : keys) os << "," << k;
    os << "\n";
    for (int step = 0; step < quiet.horizon; ++step) {
        os << step;
        for (const Vector& y : outputs) os << "," << format_double(y[step]);
        os << "\n";
    }
}

inline nlohmann::json evaluate_report_json(const ExperimentConfig& cfg,
                                           const EvaluateResult& result) {
    nlohmann::json runs = nlohmann::json::array();
    for (std::size_t i = 0; i < result.runs.size(); ++i) {
        const RunRecord& rec = result.runs[i];
        nlohmann::json methods;
        for (const auto& [key, mr] : rec.methods)
            methods[key] = {{"estimate", std::vector<double>(mr.estimate.begin(),
                                                             mr.estimate.end())},
                            {"ms", mr.ms},
                            {"flagged", mr.flagged}};
        runs.push_back({{"run", i},
                        {"obs_seed", rec.obs_seed},
                        {"ood_detected", rec.ood_detected},
                        {"s_obs", rec.s_obs},
                        {"threshold", rec.threshold},
                        {"methods", methods}});
    }
    nlohmann::json table = nlohmann::json::array();
    for (const TableRow& row : result.table)
        table.push_back(
            {{"method", row.method}, {"init", row.init}, {"mse", row.mse}, {"ms", row.ms}});
    return nlohmann::json{{"scenario", result.scenario},
                          {"theta0", std::vector<double>(result.theta0.begin(),
                                                         result.theta0.end())},
                          {"n_mc", result.runs.size()},
                          {"table", table},
                          {"runs", runs}};
}

/// Everything needed to reproduce a run bit-exactly: config fingerprint, seed
/// families, and each resolved default.
inline nlohmann::json manifest_json(const ExperimentConfig& cfg) {
    char hash_hex[32];
    std::snprintf(hash_hex, sizeof(hash_hex), "%016llx",
                  static_cast<unsigned long long>(config_hash(cfg)));
    return nlohmann::json{
        {"software", "twincal 0.1.0"},
        {"config_hash", hash_hex},
        {"system", cfg.system},
        {"master_seed", cfg.master_seed},
        {"seeds",
         {{"s_avg", {8000, 8001, 8002}},
          {"input_seed", cfg.input_seed},
          {"derivation", "per-stage tags hashed with the master seed (splitmix64)"}}},
        {"defaults",
         {{"euler_noise", "state += dt*f(state) + sqrt(dt)*w, w ~ N(0, var)"},
          {"init_state", std::vector<double>(cfg.init_state.begin(), cfg.init_state.end())},
          {"vdp_input", "unforced; input channel stored as zeros"},
          {"feature_ridge", cfg.fspec.ridge},
          {"feature_intercept", false},
          {"weight_init", "fan-in scaled uniform"},
          {"standardization", "features/targets standardized by pretraining stats, frozen"},
          {"huber_delta", cfg.huber_delta},
          {"adam", {{"beta1", 0.9}, {"beta2", 0.999}, {"eps", 1e-8}}},
          {"validation_split", 0.1},
          {"head_bias", "hidden layers biased, final readout bias-free"},
          {"trunk_in_finetune", "frozen weights, eval-mode (no dropout)"},
          {"epsilon_rule", "1e-6 * tr(S_raw)/n unless overridden"},
          {"fim_lambda_rule", "1e-6 * tr(J^T J)/d unless overridden"},
          {"fd_step", cfg.fd_step},
          {"gn", {{"max_iters", cfg.gn_max_iters},
                  {"backtracking", {{"shrink", 0.5}, {"armijo", 1e-4}, {"max_halvings", 10}}},
                  {"stats", "whitener frozen at theta_init, re-estimated at theta_gn"}}},
          {"scale_floor", "1e-4 * max(|theta_j|, 1)"},
          {"scale_cap", "pretraining box half-width"},
          {"bad_init", "3x pretraining box upper corner"},
          {"good_init", "theta0 + N(0, (0.1 |theta0|)^2)"},
          {"quantile", "ceil(level*K)-th order statistic"}}}};
}

inline void write_json(const std::string& path, const nlohmann::json& j) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << j.dump(2) << "\n";
}

/// FNV-1a of a file's bytes; used to compare checkpoints for the gate contract.
inline std::uint64_t file_hash(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0)
        h = fnv1a64(buf, static_cast<std::size_t>(is.gcount()), h);
    return h;
}

} // namespace twincal

#endif
