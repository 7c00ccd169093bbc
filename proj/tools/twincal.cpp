// twincal command-line interface: pretrain, estimate, ood-test, finetune,
// evaluate, report. See README.md for worked examples.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "twincal/config.hpp"
#include "twincal/pipeline.hpp"

namespace fs = std::filesystem;
using namespace twincal;

namespace {

ExperimentConfig load_config(const std::string& path, std::uint64_t seed_override,
                             bool has_seed) {
    ExperimentConfig cfg = parse_config(path);
    if (has_seed) cfg.master_seed = seed_override;
    return cfg;
}

nlohmann::json train_sidecar(const ExperimentConfig& cfg, const TrainReport& report) {
    return nlohmann::json{
        {"lr", cfg.lr},
        {"batch", cfg.batch},
        {"epochs", cfg.epochs},
        {"lambda_orth", cfg.lambda_orth},
        {"huber_delta", cfg.huber_delta},
        {"patience", cfg.patience},
        {"metrics",
         {{"final_train_loss", report.final_train_loss},
          {"best_val_loss", report.best_val_loss},
          {"epochs_run", report.epochs_run}}}};
}

Trajectory load_observation(const std::string& path, const ExperimentConfig& cfg) {
    return read_trajectory_csv(path, cfg.dt);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"twincal: simulation-driven digital-twin calibration"};
    app.require_subcommand(1);

    std::string config_path, out_dir = ".", obs_path, checkpoint_path, scenario = "ood1";
    std::uint64_t seed_override = 0;
    int jobs = 1;
    bool has_seed = false;

    auto add_common = [&](CLI::App* cmd, bool needs_config) {
        auto* opt = cmd->add_option("--config", config_path, "experiment config file");
        if (needs_config) opt->required();
        cmd->add_option("--seed", seed_override, "override the master seed")
            ->each([&](const std::string&) { has_seed = true; });
        cmd->add_option("--out", out_dir, "output directory");
        cmd->add_option("--jobs", jobs, "worker threads");
    };

    auto* cmd_pretrain = app.add_subcommand("pretrain", "sample, simulate, compress, train");
    add_common(cmd_pretrain, true);

    auto* cmd_estimate = app.add_subcommand("estimate", "TS estimate for one observation");
    add_common(cmd_estimate, true);
    cmd_estimate->add_option("--obs", obs_path, "observation CSV (step,u,y)")->required();
    cmd_estimate->add_option("--checkpoint", checkpoint_path, "pretrained checkpoint")->required();

    auto* cmd_ood = app.add_subcommand("ood-test", "feature-space OOD test for one observation");
    add_common(cmd_ood, true);
    cmd_ood->add_option("--obs", obs_path, "observation CSV")->required();
    cmd_ood->add_option("--checkpoint", checkpoint_path, "pretrained checkpoint")->required();

    auto* cmd_finetune =
        app.add_subcommand("finetune", "gate, refine and retrain heads for one observation");
    add_common(cmd_finetune, true);
    cmd_finetune->add_option("--obs", obs_path, "observation CSV")->required();
    cmd_finetune->add_option("--checkpoint", checkpoint_path, "pretrained checkpoint")->required();

    auto* cmd_evaluate = app.add_subcommand("evaluate", "Monte-Carlo comparison table");
    add_common(cmd_evaluate, true);
    cmd_evaluate->add_option("--scenario", scenario, "scenario name from the config");
    cmd_evaluate->add_option("--checkpoint", checkpoint_path, "pretrained checkpoint")->required();

    auto* cmd_report = app.add_subcommand("report", "summarize an output directory");
    cmd_report->add_option("--out", out_dir, "output directory to summarize")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (cmd_pretrain->parsed()) {
            const ExperimentConfig cfg = load_config(config_path, seed_override, has_seed);
            fs::create_directories(out_dir);
            PretrainResult result = run_pretrain(cfg, jobs);
            save_checkpoint(out_dir + "/checkpoint.bin", result.params);
            write_pretrain_bank(out_dir + "/bank.bin", result.bank);
            write_json(out_dir + "/checkpoint.json", train_sidecar(cfg, result.report));
            write_json(out_dir + "/manifest.json", manifest_json(cfg));
            std::cout << "pretrained " << cfg.system << ": m=" << cfg.m
                      << " best_val_loss=" << result.report.best_val_loss << "\n"
                      << "wrote " << out_dir << "/checkpoint.bin, bank.bin, manifest.json\n";
        } else if (cmd_estimate->parsed()) {
            const ExperimentConfig cfg = load_config(config_path, seed_override, has_seed);
            const NetworkParams params = load_checkpoint(checkpoint_path);
            const Trajectory obs = load_observation(obs_path, cfg);
            const Vector est = estimate(obs, params, cfg.fspec);
            std::cout << "theta_hat =";
            for (Eigen::Index i = 0; i < est.size(); ++i) std::cout << " " << est[i];
            std::cout << "\n";
            fs::create_directories(out_dir);
            write_json(out_dir + "/estimate.json",
                       nlohmann::json{{"theta_hat",
                                       std::vector<double>(est.begin(), est.end())}});
        } else if (cmd_ood->parsed()) {
            const ExperimentConfig cfg = load_config(config_path, seed_override, has_seed);
            const NetworkParams params = load_checkpoint(checkpoint_path);
            const Trajectory obs = load_observation(obs_path, cfg);
            const Vector x_obs = compress(obs, cfg.fspec);
            const ParamVector theta_init = cfg.bounded(forward(x_obs, params)).clipped();
            const std::uint64_t bank_seed = guard_bank_seed(
                hash_combine(cfg.master_seed, seedtag::ood_bank), cfg.k_bank);
            const FeatureBank bank =
                build_bank(theta_init, cfg.k_bank, cfg.sim_spec(), cfg.fspec, bank_seed);
            const OodDecision decision = ood_test(x_obs, bank, cfg.epsilon, cfg.alpha);
            std::cout << (decision.is_ood ? "OOD" : "in-distribution") << ": s_obs="
                      << decision.s_obs << " threshold=" << decision.threshold
                      << " alpha=" << decision.alpha << "\n";
            fs::create_directories(out_dir);
            write_json(out_dir + "/ood.json", to_json(decision));
        } else if (cmd_finetune->parsed()) {
            const ExperimentConfig cfg = load_config(config_path, seed_override, has_seed);
            const NetworkParams params = load_checkpoint(checkpoint_path);
            const Trajectory obs = load_observation(obs_path, cfg);
            fs::create_directories(out_dir);
            FinetuneOutcome outcome = run_finetune(obs, params, cfg, cfg.master_seed);
            const std::string out_ckpt = out_dir + "/checkpoint_finetuned.bin";
            if (outcome.took_skip_path) {
                // The gate accepted: deploy the pretrained estimator unchanged,
                // byte for byte.
                fs::copy_file(checkpoint_path, out_ckpt, fs::copy_options::overwrite_existing);
                std::cout << "in-distribution: skipped fine-tuning, checkpoint unchanged\n";
            } else {
                save_checkpoint(out_ckpt, outcome.params);
                std::cout << "OOD detected: fine-tuned heads written\n";
                if (outcome.gn.line_search_failed)
                    std::cout << "warning: line search failed; used best GN iterate\n";
            }
            write_json(out_dir + "/report.json", outcome.report);
            std::cout << "wrote " << out_ckpt << " and report.json\n";
        } else if (cmd_evaluate->parsed()) {
            const ExperimentConfig cfg = load_config(config_path, seed_override, has_seed);
            const NetworkParams params = load_checkpoint(checkpoint_path);
            fs::create_directories(out_dir);
            const EvaluateResult result = run_evaluate(cfg, scenario, params, jobs);
            write_table_csv(out_dir + "/table.csv", result);
            write_trajectories_csv(out_dir + "/trajectories_" + scenario + ".csv", cfg, result);
            write_json(out_dir + "/report.json", evaluate_report_json(cfg, result));
            write_json(out_dir + "/manifest.json", manifest_json(cfg));
            for (const TableRow& row : result.table)
                std::cout << row.method << (row.init == "-" ? "" : " (" + row.init + ")")
                          << ": mse=" << row.mse << " ms=" << row.ms << "\n";
        } else if (cmd_report->parsed()) {
            std::ifstream table(out_dir + "/table.csv");
            if (table) {
                std::cout << "results table (" << out_dir << "/table.csv):\n";
                std::string line;
                while (std::getline(table, line)) std::cout << "  " << line << "\n";
            }
            std::ifstream report(out_dir + "/report.json");
            if (report) {
                nlohmann::json j;
                report >> j;
                if (j.contains("scenario"))
                    std::cout << "scenario: " << j["scenario"] << ", n_mc: " << j["n_mc"] << "\n";
                if (j.contains("runs")) {
                    int ood = 0;
                    for (const auto& r : j["runs"])
                        if (r.value("ood_detected", false)) ++ood;
                    std::cout << "OOD detections: " << ood << "/" << j["runs"].size() << "\n";
                }
                if (j.contains("action")) std::cout << "action: " << j["action"] << "\n";
            }
            if (!table && !report) {
                std::cerr << "nothing to report in " << out_dir << "\n";
                return 1;
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
