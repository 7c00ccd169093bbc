#ifndef TWINCAL_SIMULATORS_HPP
#define TWINCAL_SIMULATORS_HPP

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <utility>

#include "twincal/errors.hpp"
#include "twincal/numerics.hpp"
#include "twincal/rng.hpp"

namespace twincal {

/// A point in parameter space with optional per-coordinate physical limits.
struct ParamVector {
    Vector values;
    Vector lo;
    Vector hi;

    ParamVector() = default;

    explicit ParamVector(Vector v) : values(std::move(v)) {
        lo = Vector::Constant(values.size(), -std::numeric_limits<double>::infinity());
        hi = Vector::Constant(values.size(), std::numeric_limits<double>::infinity());
    }

    ParamVector(Vector v, Vector lo_, Vector hi_)
        : values(std::move(v)), lo(std::move(lo_)), hi(std::move(hi_)) {}

    Eigen::Index dim() const { return values.size(); }

    ParamVector with_values(const Vector& v) const { return ParamVector(v, lo, hi); }

    /// Project onto the physical box.
    ParamVector clipped() const {
        return with_values(values.cwiseMax(lo).cwiseMin(hi));
    }

    bool in_bounds() const {
        return (values.array() >= lo.array()).all() && (values.array() <= hi.array()).all();
    }
};

/// One input/output record from a digital twin, plus the seed that produced it.
struct Trajectory {
    Vector inputs;
    Vector outputs;
    double dt = 0.0;
    std::uint64_t seed = 0;

    Eigen::Index length() const { return outputs.size(); }
};

/// Continuous-time model behind the forward-Euler rollout. `drift` fills dx/dt;
/// `observe` maps (state, input, theta) to the scalar measurement.
struct SimulatorModel {
    int state_dim = 0;
    int param_dim = 0;
    std::function<void(const Vector& x, double u, const Vector& theta, Vector& dxdt)> drift;
    std::function<double(const Vector& x, double u, const Vector& theta)> observe;
};

enum class SimulatorKind { vdp, tanks, plugin };

struct SimulatorSpec {
    SimulatorKind kind = SimulatorKind::vdp;
    std::string plugin_name;       // used when kind == plugin
    double dt = 0.05;
    int horizon = 300;
    Vector process_noise_var;      // per state coordinate
    double meas_noise_var = 0.0;
    Vector init_state;
    Vector input;                  // fixed input sequence; empty means all-zero
};

inline SimulatorModel vdp_model() {
    SimulatorModel m;
    m.state_dim = 2;
    m.param_dim = 1;
    m.drift = [](const Vector& x, double /*u*/, const Vector& th, Vector& dxdt) {
        dxdt[0] = x[1];
        dxdt[1] = th[0] * (1.0 - x[0] * x[0]) * x[1] - x[0];
    };
    m.observe = [](const Vector& x, double, const Vector&) { return x[0]; };
    return m;
}

inline SimulatorModel tanks_model() {
    SimulatorModel m;
    m.state_dim = 2;
    m.param_dim = 4;
    m.drift = [](const Vector& h, double u, const Vector& k, Vector& dxdt) {
        const double s1 = std::sqrt(std::abs(h[0]));
        const double s2 = std::sqrt(std::abs(h[1]));
        dxdt[0] = -k[0] * s1 + k[3] * u;
        dxdt[1] = k[1] * s1 - k[2] * s2;
    };
    m.observe = [](const Vector& h, double, const Vector&) { return h[1]; };
    return m;
}

/// Registry for user-supplied simulator models, keyed by name.
inline std::map<std::string, SimulatorModel>& simulator_registry() {
    static std::map<std::string, SimulatorModel> registry = {
        {"identity",
         SimulatorModel{1, 0,
                        [](const Vector&, double, const Vector&, Vector& d) { d.setZero(); },
                        [](const Vector&, double u, const Vector&) { return u; }}},
    };
    return registry;
}

inline const SimulatorModel& resolve_model(const SimulatorSpec& spec) {
    switch (spec.kind) {
        case SimulatorKind::vdp: {
            static const SimulatorModel m = vdp_model();
            return m;
        }
        case SimulatorKind::tanks: {
            static const SimulatorModel m = tanks_model();
            return m;
        }
        case SimulatorKind::plugin: {
            auto it = simulator_registry().find(spec.plugin_name);
            if (it == simulator_registry().end())
                throw std::invalid_argument("unknown plugin simulator '" + spec.plugin_name + "'");
            return it->second;
        }
    }
    throw std::logic_error("unreachable simulator kind");
}

/// Forward-Euler rollout with per-step noise keyed by (seed, step, channel).
/// Process noise enters as state += dt*f + sqrt(dt)*w with w ~ N(0, var) so the
/// noise magnitude stays consistent across step sizes; channel state_dim is
/// reserved for measurement noise.
inline Trajectory euler_rollout(const SimulatorModel& model, const Vector& theta,
                                const SimulatorSpec& spec, std::uint64_t seed) {
    const int n = spec.horizon;
    if (n < 1) throw std::invalid_argument("simulate: horizon must be >= 1");
    if (theta.size() != model.param_dim)
        throw ShapeMismatchError("simulate: theta has dim " + std::to_string(theta.size()) +
                                 ", model expects " + std::to_string(model.param_dim));

    Vector input = spec.input;
    if (input.size() == 0) input = Vector::Zero(n);
    if (input.size() != n)
        throw ShapeMismatchError("simulate: input length does not match horizon");

    Vector x = spec.init_state;
    if (x.size() == 0) x = Vector::Zero(model.state_dim);
    if (x.size() != model.state_dim)
        throw ShapeMismatchError("simulate: initial state dimension mismatch");

    Vector pvar = spec.process_noise_var;
    if (pvar.size() == 0) pvar = Vector::Zero(model.state_dim);
    if (pvar.size() != model.state_dim)
        throw ShapeMismatchError("simulate: process noise dimension mismatch");

    const double sqrt_dt = std::sqrt(spec.dt);
    Trajectory traj;
    traj.inputs = input;
    traj.outputs = Vector::Zero(n);
    traj.dt = spec.dt;
    traj.seed = seed;

    Vector dxdt(model.state_dim);
    for (int k = 0; k < n; ++k) {
        model.drift(x, input[k], theta, dxdt);
        x += spec.dt * dxdt;
        for (int i = 0; i < model.state_dim; ++i) {
            if (pvar[i] > 0.0)
                x[i] += sqrt_dt * std::sqrt(pvar[i]) *
                        normal_from_key(seed, static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(i));
        }
        if (!x.allFinite())
            throw NonFiniteError("simulate: state diverged", static_cast<std::size_t>(k));
        double y = model.observe(x, input[k], theta);
        if (spec.meas_noise_var > 0.0)
            y += std::sqrt(spec.meas_noise_var) *
                 normal_from_key(seed, static_cast<std::uint64_t>(k),
                                 static_cast<std::uint64_t>(model.state_dim));
        if (!std::isfinite(y))
            throw NonFiniteError("simulate: output diverged", static_cast<std::size_t>(k));
        traj.outputs[k] = y;
    }
    return traj;
}

/// Dispatch over SimulatorSpec.kind.
inline Trajectory simulate(const ParamVector& theta, const SimulatorSpec& spec, std::uint64_t seed) {
    return euler_rollout(resolve_model(spec), theta.values, spec, seed);
}

inline Trajectory simulate_vdp(double nu, const Vector& input, const SimulatorSpec& spec,
                               std::uint64_t seed) {
    SimulatorSpec s = spec;
    s.kind = SimulatorKind::vdp;
    s.input = input;
    Vector theta(1);
    theta[0] = nu;
    return euler_rollout(vdp_model(), theta, s, seed);
}

inline Trajectory simulate_tanks(const ParamVector& theta, const Vector& input,
                                 const SimulatorSpec& spec, std::uint64_t seed) {
    SimulatorSpec s = spec;
    s.kind = SimulatorKind::tanks;
    s.input = input;
    return euler_rollout(tanks_model(), theta.values, s, seed);
}

/// Piecewise-constant excitation: each block of `hold` samples takes a level
/// drawn uniformly from [lo, hi]; the last block may be truncated.
inline Vector gen_prbs(double lo, double hi, int hold, int n, std::uint64_t seed) {
    if (hold < 1) throw std::invalid_argument("gen_prbs: hold must be >= 1");
    Vector u(n);
    SeedStream stream(hash_combine(seed, 0x5052425355ULL));
    double level = 0.0;
    for (int k = 0; k < n; ++k) {
        if (k % hold == 0) level = stream.uniform(lo, hi);
        u[k] = level;
    }
    return u;
}

// --- trajectory serialization -------------------------------------------------

inline void write_trajectory_csv(std::ostream& os, const Trajectory& z) {
    os << "step,u,y\n";
    os.precision(17);
    for (Eigen::Index k = 0; k < z.length(); ++k)
        os << k << "," << z.inputs[k] << "," << z.outputs[k] << "\n";
}

inline void write_trajectory_csv(const std::string& path, const Trajectory& z) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    write_trajectory_csv(os, z);
}

inline Trajectory read_trajectory_csv(std::istream& is, const std::string& name, double dt) {
    Trajectory z;
    z.dt = dt;
    std::vector<double> us, ys;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (lineno == 1 && line.rfind("step", 0) == 0) continue; // header
        std::istringstream ss(line);
        std::string step, u, y;
        if (!std::getline(ss, step, ',') || !std::getline(ss, u, ',') || !std::getline(ss, y, ','))
            throw ParseError(name, lineno, "expected 'step,u,y'");
        try {
            us.push_back(std::stod(u));
            ys.push_back(std::stod(y));
        } catch (const std::exception&) {
            throw ParseError(name, lineno, "malformed number");
        }
    }
    if (us.empty()) throw ParseError(name, lineno, "no data rows");
    z.inputs = Eigen::Map<Vector>(us.data(), static_cast<Eigen::Index>(us.size()));
    z.outputs = Eigen::Map<Vector>(ys.data(), static_cast<Eigen::Index>(ys.size()));
    return z;
}

inline Trajectory read_trajectory_csv(const std::string& path, double dt) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    return read_trajectory_csv(is, path, dt);
}

} // namespace twincal

#endif
