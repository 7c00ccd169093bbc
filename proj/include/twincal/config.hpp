#ifndef TWINCAL_CONFIG_HPP
#define TWINCAL_CONFIG_HPP

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "twincal/errors.hpp"
#include "twincal/features.hpp"
#include "twincal/numerics.hpp"
#include "twincal/regressor.hpp"
#include "twincal/rng.hpp"
#include "twincal/simulators.hpp"

namespace twincal {

/// Everything needed to run one experiment end to end. Defaults carry the
/// published constants for each system; a key-value config file overrides
/// individual entries.
struct ExperimentConfig {
    std::string system = "vdp"; // vdp | tanks
    std::uint64_t master_seed = 20240801;

    // data generation
    int m = 10000;
    int horizon = 300;
    double dt = 0.05;
    Vector box_lo, box_hi;   // pretraining calibration box
    Vector phys_lo, phys_hi; // clipping bounds for refinement and sampling
    Vector process_noise_var;
    double meas_noise_var = 0.0;
    Vector init_state;
    std::uint64_t input_seed = 7777; // excitation signal seed (tanks PRBS)
    double prbs_lo = 0.0, prbs_hi = 3.0;
    int prbs_hold = 30;

    // Stage-1 features
    FeatureSpec fspec;

    // Stage-2 network and pretraining
    NetworkSpec net;
    double lr = 1e-3;
    int batch = 64;
    int epochs = 200;
    double lambda_orth = 0.0;
    double huber_delta = 1.0;
    int patience = 0;

    // OOD gate
    int k_bank = 150;
    double alpha = 0.10;
    double epsilon = 0.0; // <= 0: relative default

    // Gauss-Newton refinement and sampling
    double gamma = 1e-3;
    double fd_step = 1e-3;
    double fim_lambda = 0.0; // <= 0: relative default
    int gn_max_iters = 8;
    int m_ft = 400;

    // head fine-tuning
    int ft_epochs = 100;
    int ft_patience = 10;
    bool fresh_head = false;
    std::vector<LayerSpec> ft_head;

    // evaluation
    int n_mc = 100;
    std::map<std::string, Vector> scenarios;

    SimulatorKind kind() const {
        if (system == "vdp") return SimulatorKind::vdp;
        if (system == "tanks") return SimulatorKind::tanks;
        return SimulatorKind::plugin;
    }

    int param_dim() const { return static_cast<int>(box_lo.size()); }

    /// Simulator spec with the fixed excitation signal baked in.
    SimulatorSpec sim_spec() const {
        SimulatorSpec s;
        s.kind = kind();
        s.plugin_name = system;
        s.dt = dt;
        s.horizon = horizon;
        s.process_noise_var = process_noise_var;
        s.meas_noise_var = meas_noise_var;
        s.init_state = init_state;
        if (system == "tanks")
            s.input = gen_prbs(prbs_lo, prbs_hi, prbs_hold, horizon, input_seed);
        else
            s.input = Vector::Zero(horizon);
        return s;
    }

    ParamVector bounded(const Vector& v) const { return ParamVector(v, phys_lo, phys_hi); }
};

inline ExperimentConfig vdp_config() {
    ExperimentConfig c;
    c.system = "vdp";
    c.m = 10000;
    c.horizon = 300;
    c.dt = 0.05;
    c.box_lo = Vector::Constant(1, 0.0);
    c.box_hi = Vector::Constant(1, 2.5);
    c.phys_lo = Vector::Constant(1, 0.0);
    c.phys_hi = Vector::Constant(1, 100.0);
    c.process_noise_var = Vector(2);
    c.process_noise_var << 0.0, 0.02;
    c.meas_noise_var = 0.0;
    c.init_state = Vector(2);
    c.init_state << 1.0, 0.0;

    c.fspec = FeatureSpec{FeatureKind::ar, 5, 0, 0, 1e-8};

    c.net.input_dim = 5;
    c.net.trunk = {{256, Activation::relu, false, 0.1}, {128, Activation::relu, false, 0.1}};
    c.net.head_count = 1;
    c.net.head = {{128, Activation::tanh_act, false, 0.1}, {128, Activation::tanh_act, false, 0.1}};
    c.epochs = 200;
    c.lambda_orth = 0.0;

    c.gamma = 1e-3;
    c.m_ft = 400;
    c.fresh_head = false;

    c.scenarios = {{"ood1", Vector::Constant(1, 3.0)},
                   {"ood2", Vector::Constant(1, 5.0)},
                   {"id", Vector::Constant(1, 1.5)}};
    return c;
}

inline ExperimentConfig tanks_config() {
    ExperimentConfig c;
    c.system = "tanks";
    c.m = 10000;
    c.horizon = 400;
    c.dt = 0.5;
    c.box_lo = Vector(4);
    c.box_lo << 0.4, 0.4, 0.4, 0.8;
    c.box_hi = Vector(4);
    c.box_hi << 0.8, 0.8, 0.8, 1.2;
    c.phys_lo = Vector::Constant(4, 1e-6);
    c.phys_hi = Vector::Constant(4, 100.0);
    c.process_noise_var = Vector(2);
    c.process_noise_var << 0.01, 0.01;
    c.meas_noise_var = 0.02;
    c.init_state = Vector::Zero(2);

    c.fspec = FeatureSpec{FeatureKind::arx, 0, 64, 64, 1e-6};

    c.net.input_dim = 128;
    c.net.trunk = {{256, Activation::leaky_relu, true, 0.15},
                   {256, Activation::leaky_relu, true, 0.15}};
    c.net.head_count = 4;
    c.net.head = {{64, Activation::tanh_act, true, 0.15},
                  {64, Activation::tanh_act, true, 0.15},
                  {64, Activation::tanh_act, true, 0.15}};
    c.epochs = 250;
    c.lambda_orth = 5e-4;

    c.gamma = 1e-4;
    c.m_ft = 1000;
    c.fresh_head = true;
    c.ft_head = {{64, Activation::tanh_act, false, 0.20}};

    Vector ood1(4), ood2(4);
    ood1 << 1.2, 1.2, 0.9, 1.0;
    ood2 << 1.3, 1.3, 0.6, 0.7;
    c.scenarios = {{"ood1", ood1}, {"ood2", ood2}};
    return c;
}

inline ExperimentConfig default_config(const std::string& system) {
    if (system == "vdp") return vdp_config();
    if (system == "tanks") return tanks_config();
    throw std::invalid_argument("unknown system '" + system + "'");
}

namespace detail {

inline Vector parse_vector(const std::string& text, const std::string& file, int line) {
    std::vector<double> vals;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            vals.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw ParseError(file, line, "malformed number '" + item + "'");
        }
    }
    if (vals.empty()) throw ParseError(file, line, "empty value");
    return Eigen::Map<Vector>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

inline std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t\r");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t\r");
    return s.substr(begin, end - begin + 1);
}

} // namespace detail

/// Parse a `key = value` experiment file. The `system` key selects the
/// defaults; every other key overrides one field. Unknown keys are errors.
inline ExperimentConfig parse_config(std::istream& is, const std::string& name) {
    std::vector<std::pair<std::string, std::string>> pairs;
    std::vector<int> lines;
    std::string line;
    int lineno = 0;
    std::string system = "vdp";
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError(name, lineno, "expected 'key = value'");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ParseError(name, lineno, "expected 'key = value'");
        if (key == "system") system = value;
        pairs.emplace_back(key, value);
        lines.push_back(lineno);
    }

    ExperimentConfig cfg = default_config(system);

    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const std::string& key = pairs[i].first;
        const std::string& value = pairs[i].second;
        const int at = lines[i];
        auto as_f64 = [&]() {
            try {
                return std::stod(value);
            } catch (const std::exception&) {
                throw ParseError(name, at, "malformed number '" + value + "'");
            }
        };
        auto as_int = [&]() { return static_cast<int>(as_f64()); };
        auto as_u64 = [&]() {
            try {
                return static_cast<std::uint64_t>(std::stoull(value));
            } catch (const std::exception&) {
                throw ParseError(name, at, "malformed integer '" + value + "'");
            }
        };
        auto as_vec = [&]() { return detail::parse_vector(value, name, at); };
        auto as_bool = [&]() {
            if (value == "true" || value == "1") return true;
            if (value == "false" || value == "0") return false;
            throw ParseError(name, at, "expected true/false");
        };

        if (key == "system") {
            // already applied
        } else if (key == "master_seed") cfg.master_seed = as_u64();
        else if (key == "m") cfg.m = as_int();
        else if (key == "horizon") cfg.horizon = as_int();
        else if (key == "dt") cfg.dt = as_f64();
        else if (key == "box_lo") cfg.box_lo = as_vec();
        else if (key == "box_hi") cfg.box_hi = as_vec();
        else if (key == "phys_lo") cfg.phys_lo = as_vec();
        else if (key == "phys_hi") cfg.phys_hi = as_vec();
        else if (key == "process_noise_var") cfg.process_noise_var = as_vec();
        else if (key == "meas_noise_var") cfg.meas_noise_var = as_f64();
        else if (key == "init_state") cfg.init_state = as_vec();
        else if (key == "input_seed") cfg.input_seed = as_u64();
        else if (key == "prbs_lo") cfg.prbs_lo = as_f64();
        else if (key == "prbs_hi") cfg.prbs_hi = as_f64();
        else if (key == "prbs_hold") cfg.prbs_hold = as_int();
        else if (key == "ar_order") { cfg.fspec.ar_order = as_int(); cfg.net.input_dim = cfg.fspec.dim(); }
        else if (key == "arx_na") { cfg.fspec.arx_na = as_int(); cfg.net.input_dim = cfg.fspec.dim(); }
        else if (key == "arx_nb") { cfg.fspec.arx_nb = as_int(); cfg.net.input_dim = cfg.fspec.dim(); }
        else if (key == "ridge") cfg.fspec.ridge = as_f64();
        else if (key == "lr") cfg.lr = as_f64();
        else if (key == "batch") cfg.batch = as_int();
        else if (key == "epochs") cfg.epochs = as_int();
        else if (key == "lambda_orth") cfg.lambda_orth = as_f64();
        else if (key == "huber_delta") cfg.huber_delta = as_f64();
        else if (key == "patience") cfg.patience = as_int();
        else if (key == "k_bank") cfg.k_bank = as_int();
        else if (key == "alpha") cfg.alpha = as_f64();
        else if (key == "epsilon") cfg.epsilon = as_f64();
        else if (key == "gamma") cfg.gamma = as_f64();
        else if (key == "fd_step") cfg.fd_step = as_f64();
        else if (key == "fim_lambda") cfg.fim_lambda = as_f64();
        else if (key == "gn_max_iters") cfg.gn_max_iters = as_int();
        else if (key == "m_ft") cfg.m_ft = as_int();
        else if (key == "ft_epochs") cfg.ft_epochs = as_int();
        else if (key == "ft_patience") cfg.ft_patience = as_int();
        else if (key == "fresh_head") cfg.fresh_head = as_bool();
        else if (key == "n_mc") cfg.n_mc = as_int();
        else if (key.rfind("scenario.", 0) == 0) {
            const std::string scen = key.substr(9);
            if (scen.empty()) throw ParseError(name, at, "scenario key needs a name");
            cfg.scenarios[scen] = as_vec();
        } else {
            throw ParseError(name, at, "unknown key '" + key + "'");
        }
    }

    // basic schema checks
    if (cfg.m < 1) throw ParseError(name, 0, "m must be >= 1");
    if (cfg.horizon < 1) throw ParseError(name, 0, "horizon must be >= 1");
    if (cfg.dt <= 0.0) throw ParseError(name, 0, "dt must be > 0");
    if (!(cfg.alpha > 0.0 && cfg.alpha < 1.0)) throw ParseError(name, 0, "alpha must be in (0,1)");
    if (cfg.box_lo.size() != cfg.box_hi.size())
        throw ParseError(name, 0, "box_lo and box_hi sizes differ");
    for (const auto& [scen, theta] : cfg.scenarios)
        if (theta.size() != cfg.box_lo.size())
            throw ParseError(name, 0, "scenario '" + scen + "' dimension mismatch");
    return cfg;
}

inline ExperimentConfig parse_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config " + path);
    return parse_config(is, path);
}

/// Stable fingerprint of the full configuration, recorded in every manifest.
inline std::uint64_t config_hash(const ExperimentConfig& c) {
    std::ostringstream ss;
    ss.precision(17);
    ss << c.system << '|' << c.master_seed << '|' << c.m << '|' << c.horizon << '|' << c.dt << '|';
    auto dump_vec = [&ss](const Vector& v) {
        for (Eigen::Index i = 0; i < v.size(); ++i) ss << v[i] << ',';
        ss << '|';
    };
    dump_vec(c.box_lo);
    dump_vec(c.box_hi);
    dump_vec(c.phys_lo);
    dump_vec(c.phys_hi);
    dump_vec(c.process_noise_var);
    ss << c.meas_noise_var << '|';
    dump_vec(c.init_state);
    ss << c.input_seed << '|' << c.prbs_lo << '|' << c.prbs_hi << '|' << c.prbs_hold << '|';
    ss << static_cast<int>(c.fspec.kind) << '|' << c.fspec.ar_order << '|' << c.fspec.arx_na
       << '|' << c.fspec.arx_nb << '|' << c.fspec.ridge << '|';
    ss << c.lr << '|' << c.batch << '|' << c.epochs << '|' << c.lambda_orth << '|'
       << c.huber_delta << '|' << c.patience << '|';
    ss << c.k_bank << '|' << c.alpha << '|' << c.epsilon << '|';
    ss << c.gamma << '|' << c.fd_step << '|' << c.fim_lambda << '|' << c.gn_max_iters << '|'
       << c.m_ft << '|';
    ss << c.ft_epochs << '|' << c.ft_patience << '|' << c.fresh_head << '|' << c.n_mc << '|';
    for (const auto& [scen, theta] : c.scenarios) {
        ss << scen << ':';
        dump_vec(theta);
    }
    const std::string bytes = ss.str();
    return fnv1a64(bytes.data(), bytes.size());
}

} // namespace twincal

#endif
