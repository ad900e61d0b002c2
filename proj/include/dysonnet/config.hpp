#pragma once

/** @file config.hpp
    @brief YAML run configuration with field-precise errors and a resolved snapshot.

    Every field has a default (Run 1 hyperparameters) except hamiltonian.kind and hamiltonian.n.
    Unknown keys are rejected so that typos do not silently fall back to defaults.
*/

#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "vmc.hpp"

namespace dyson {

/// Grid for the sweep subcommand; empty vectors mean "use the base value".
struct SweepConfig {
    std::vector<double> J;
    std::vector<double> alpha;
    std::vector<double> j2_over_j1;
    int runs = 1;           // 3 reproduces the median-of-three protocol
    bool fidelity = true;   // ED-backed errors, needs n <= 14
};

struct RunConfig {
    TrainConfig train;
    std::string output_dir = "run";
    std::string precision = "fp64";
    SweepConfig sweep;
};

inline std::string to_string(ModelKind k) { return k == ModelKind::TFIM_LR ? "TFIM_LR" : "J1J2"; }

namespace config_detail {

inline std::string where(const std::string& src, const YAML::Node& n) {
    const auto m = n.Mark();
    if (m.line < 0) return src;
    return src + ":" + std::to_string(m.line + 1) + ":" + std::to_string(m.column + 1);
}

class Reader {
public:
    Reader(std::string src, const YAML::Node& node, std::string path) : src_(std::move(src)), node_(node), path_(std::move(path)) {
        if (!node_.IsMap()) fail(node_, "expected a mapping");
    }

    YAML::Node at(const std::string& key) const {
        const YAML::Node& cn = node_;
        return cn[key];
    }

    template <class T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        const YAML::Node v = at(key);
        if (!v) return;
        if (!v.IsScalar()) fail(v, key, "expected a scalar");
        try {
            out = v.as<T>();
        } catch (const YAML::Exception&) {
            fail(v, key, std::string("expected ") + type_name<T>() + ", got '" + v.Scalar() + "'");
        }
    }

    template <class T>
    void get_list(const std::string& key, std::vector<T>& out) {
        seen_.insert(key);
        const YAML::Node v = at(key);
        if (!v) return;
        if (!v.IsSequence()) fail(v, key, "expected a list");
        out.clear();
        for (const auto& x : v) {
            try {
                out.push_back(x.as<T>());
            } catch (const YAML::Exception&) {
                fail(x, key, std::string("expected a list of ") + type_name<T>());
            }
        }
    }

    std::optional<Reader> block(const std::string& key) {
        seen_.insert(key);
        const YAML::Node v = at(key);
        if (!v) return std::nullopt;
        return Reader(src_, v, qualified(key));
    }

    void check(const std::string& key, bool ok, const std::string& msg) const {
        if (!ok) fail(at(key) ? at(key) : node_, key, msg);
    }

    void reject_unknown() const {
        for (const auto& kv : node_) {
            const auto k = kv.first.as<std::string>();
            if (!seen_.count(k)) fail(kv.first, k, "unknown field");
        }
    }

    const YAML::Node& node() const { return node_; }
    std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    [[noreturn]] void fail(const YAML::Node& at, const std::string& key, const std::string& msg) const {
        throw ConfigError(where(src_, at) + ": " + qualified(key) + ": " + msg);
    }
    [[noreturn]] void fail(const YAML::Node& at, const std::string& msg) const {
        throw ConfigError(where(src_, at) + ": " + (path_.empty() ? "<root>" : path_) + ": " + msg);
    }

private:
    template <class T>
    static const char* type_name() {
        if constexpr (std::is_same_v<T, bool>) return "a boolean";
        else if constexpr (std::is_integral_v<T>) return "an integer";
        else if constexpr (std::is_floating_point_v<T>) return "a number";
        else return "a string";
    }

    std::string src_;
    YAML::Node node_;
    std::string path_;
    std::set<std::string> seen_;
};

} // namespace config_detail

inline RunConfig parse_config(const std::string& text, const std::string& source = "<config>") {
    using config_detail::Reader;
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::ParserException& e) {
        throw ConfigError(source + ":" + std::to_string(e.mark.line + 1) + ":" + std::to_string(e.mark.column + 1) +
                          ": " + e.msg);
    }
    if (!root || root.IsNull()) throw ConfigError(source + ": empty configuration");
    RunConfig rc;
    TrainConfig& tc = rc.train;
    Reader top(source, root, "");

    auto hb = top.block("hamiltonian");
    if (!hb) throw ConfigError(source + ": missing required block 'hamiltonian'");
    {
        auto& r = *hb;
        std::string kind;
        r.get("kind", kind);
        if (!r.at("kind")) r.fail(r.node(), "kind", "missing required field");
        if (kind == "TFIM_LR") tc.hamiltonian.kind = ModelKind::TFIM_LR;
        else if (kind == "J1J2") tc.hamiltonian.kind = ModelKind::J1J2;
        else r.fail(r.at("kind"), "kind", "expected TFIM_LR or J1J2, got '" + kind + "'");
        if (!r.at("N")) r.fail(r.node(), "N", "missing required field");
        r.get("N", tc.hamiltonian.n);
        r.get("J", tc.hamiltonian.J);
        r.get("h", tc.hamiltonian.h);
        r.get("alpha", tc.hamiltonian.alpha);
        r.get("J2_over_J1", tc.hamiltonian.j2_over_j1);
        double jc = 0.0;
        r.get("J_c", jc);
        if (r.at("J_c")) tc.sampling.j_critical = jc;
        r.check("N", tc.hamiltonian.n >= 2, "must be >= 2");
        r.check("alpha", tc.hamiltonian.alpha >= 0.0, "must be >= 0");
        r.check("J2_over_J1", tc.hamiltonian.j2_over_j1 >= 0.0 && tc.hamiltonian.j2_over_j1 <= 1.0, "must lie in [0, 1]");
        r.reject_unknown();
    }
    if (auto mb = top.block("model")) {
        auto& r = *mb;
        auto& m = tc.model;
        std::string readout = to_string(m.readout);
        r.get("layers", m.layers);
        r.get("d", m.d);
        r.get("d_out", m.d_out);
        r.get("token_size", m.token_size);
        r.get("kernel_half_width", m.kernel_half_width);
        r.get("s4_state", m.s4_state);
        r.get("readout", readout);
        r.get("complex_readout", m.complex_readout);
        r.get("init_readout_scale", tc.init_readout_scale);
        try {
            m.readout = readout_from_string(readout);
        } catch (const DomainError& e) {
            r.fail(r.at("readout"), "readout", e.what());
        }
        r.check("layers", m.layers >= 1, "must be >= 1");
        r.check("d", m.d >= 1, "must be >= 1");
        r.check("d_out", m.d_out >= 1, "must be >= 1");
        r.check("token_size", m.token_size >= 1, "must be >= 1");
        r.check("kernel_half_width", m.kernel_half_width >= 0, "must be >= 0");
        r.check("s4_state", m.s4_state >= 1, "must be >= 1");
        r.reject_unknown();
    }
    if (auto sb = top.block("sampler")) {
        auto& r = *sb;
        auto& s = tc.sampling;
        std::string mode = to_string(s.mode);
        r.get("chains", s.chains);
        r.get("samples", s.samples);
        r.get("spacing", s.spacing);
        r.get("mode", mode);
        r.get("burn_in_sweeps", s.burn_in_sweeps);
        r.get("sweep_factor", s.sweep_factor);
        r.get("inversion_interval", s.inversion_interval);
        r.get("eps_init", s.eps_init);
        r.get("eps_inflation", s.eps_inflation);
        r.get("screened_min_n", s.screened_min_n);
        r.get("abacus_min_n", s.abacus_min_n);
        try {
            s.mode = sampler_mode_from_string(mode);
        } catch (const DomainError& e) {
            r.fail(r.at("mode"), "mode", e.what());
        }
        r.check("chains", s.chains >= 1, "must be >= 1");
        r.check("samples", s.samples >= s.chains && s.samples % s.chains == 0, "must be a positive multiple of sampler.chains");
        r.check("spacing", s.spacing >= 1, "must be >= 1");
        r.check("burn_in_sweeps", s.burn_in_sweeps >= 0, "must be >= 0");
        r.check("sweep_factor", s.sweep_factor > 0.0, "must be > 0");
        r.check("eps_init", s.eps_init >= 0.0, "must be >= 0");
        r.check("eps_inflation", s.eps_inflation >= 1.0, "must be >= 1");
        r.reject_unknown();
    }
    if (auto ob = top.block("optimizer")) {
        auto& r = *ob;
        auto& o = tc.optimizer;
        std::string peak = "auto";
        r.get("iterations", o.iterations);
        r.get("warmup", o.warmup);
        r.get("peak_lr", peak);
        r.get("final_lr_fraction", o.final_lr_fraction);
        r.get("shift_start", o.shift_start);
        r.get("shift_end", o.shift_end);
        r.get("max_step", o.max_step);
        r.get("max_measured_step", o.max_measured_step);
        r.get("max_backtracks", o.max_backtracks);
        r.get("cg_tol", o.solver.cg_tol);
        r.get("cg_max_iter", o.solver.cg_max_iter);
        if (peak == "auto") {
            o.peak_lr = -1.0;
        } else {
            try {
                size_t used = 0;
                o.peak_lr = std::stod(peak, &used);
                if (used != peak.size() || !(o.peak_lr > 0.0)) throw std::invalid_argument(peak);
            } catch (const std::exception&) {
                r.fail(r.at("peak_lr"), "peak_lr", "expected 'auto' or a positive number, got '" + peak + "'");
            }
        }
        r.check("iterations", o.iterations >= 0, "must be >= 0");
        r.check("warmup", o.warmup >= 0, "must be >= 0");
        r.check("final_lr_fraction", o.final_lr_fraction >= 0.0 && o.final_lr_fraction <= 1.0, "must lie in [0, 1]");
        r.check("shift_start", o.shift_start > 0.0, "must be > 0");
        r.check("shift_end", o.shift_end > 0.0, "must be > 0");
        r.check("max_backtracks", o.max_backtracks >= 0, "must be >= 0");
        r.check("cg_tol", o.solver.cg_tol > 0.0, "must be > 0");
        r.check("cg_max_iter", o.solver.cg_max_iter >= 1, "must be >= 1");
        r.reject_unknown();
    }
    if (auto wb = top.block("sweep")) {
        auto& r = *wb;
        r.get_list("J", rc.sweep.J);
        r.get_list("alpha", rc.sweep.alpha);
        r.get_list("J2_over_J1", rc.sweep.j2_over_j1);
        r.get("runs", rc.sweep.runs);
        r.get("fidelity", rc.sweep.fidelity);
        r.check("runs", rc.sweep.runs >= 1, "must be >= 1");
        r.reject_unknown();
    }
    top.get("seed", tc.seed);
    top.get("threads", tc.threads);
    top.get("marshall", tc.marshall);
    top.get("output_dir", rc.output_dir);
    top.get("precision", rc.precision);
    top.check("threads", tc.threads >= 1, "must be >= 1");
    top.check("precision", rc.precision == "fp64", "only fp64 is supported");
    top.reject_unknown();

    if (tc.hamiltonian.n % tc.model.token_size != 0)
        throw ConfigError(source + ": hamiltonian.N: must be a multiple of model.token_size (" +
                          std::to_string(tc.model.token_size) + ")");
    if (tc.uses_marshall() && tc.hamiltonian.n % 2)
        throw ConfigError(source + ": hamiltonian.N: the J1J2 chain needs an even number of sites");
    return rc;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str(), path);
}

/// Every value the run uses, in the input format; parse_config(snapshot) reproduces the config.
inline std::string resolved_snapshot(const RunConfig& rc) {
    const TrainConfig& tc = rc.train;
    YAML::Emitter e;
    e.SetDoublePrecision(17);
    e << YAML::BeginMap;
    e << YAML::Key << "hamiltonian" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "kind" << YAML::Value << to_string(tc.hamiltonian.kind);
    e << YAML::Key << "N" << YAML::Value << tc.hamiltonian.n;
    e << YAML::Key << "J" << YAML::Value << tc.hamiltonian.J;
    e << YAML::Key << "h" << YAML::Value << tc.hamiltonian.h;
    e << YAML::Key << "alpha" << YAML::Value << tc.hamiltonian.alpha;
    e << YAML::Key << "J2_over_J1" << YAML::Value << tc.hamiltonian.j2_over_j1;
    if (tc.sampling.j_critical) e << YAML::Key << "J_c" << YAML::Value << *tc.sampling.j_critical;
    e << YAML::EndMap;

    const auto& m = tc.model;
    e << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "layers" << YAML::Value << m.layers;
    e << YAML::Key << "d" << YAML::Value << m.d;
    e << YAML::Key << "d_out" << YAML::Value << m.d_out;
    e << YAML::Key << "token_size" << YAML::Value << m.token_size;
    e << YAML::Key << "kernel_half_width" << YAML::Value << m.kernel_half_width;
    e << YAML::Key << "s4_state" << YAML::Value << m.s4_state;
    e << YAML::Key << "readout" << YAML::Value << to_string(m.readout);
    e << YAML::Key << "complex_readout" << YAML::Value << m.complex_readout;
    e << YAML::Key << "init_readout_scale" << YAML::Value << tc.init_readout_scale;
    e << YAML::EndMap;

    const auto& s = tc.sampling;
    e << YAML::Key << "sampler" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "chains" << YAML::Value << s.chains;
    e << YAML::Key << "samples" << YAML::Value << s.samples;
    e << YAML::Key << "spacing" << YAML::Value << s.spacing;
    e << YAML::Key << "mode" << YAML::Value << to_string(s.mode);
    e << YAML::Key << "burn_in_sweeps" << YAML::Value << s.burn_in_sweeps;
    e << YAML::Key << "sweep_factor" << YAML::Value << s.sweep_factor;
    e << YAML::Key << "inversion_interval" << YAML::Value << s.inversion_interval;
    e << YAML::Key << "eps_init" << YAML::Value << s.eps_init;
    e << YAML::Key << "eps_inflation" << YAML::Value << s.eps_inflation;
    e << YAML::Key << "screened_min_n" << YAML::Value << s.screened_min_n;
    e << YAML::Key << "abacus_min_n" << YAML::Value << s.abacus_min_n;
    e << YAML::EndMap;

    const auto& o = tc.optimizer;
    e << YAML::Key << "optimizer" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "iterations" << YAML::Value << o.iterations;
    e << YAML::Key << "warmup" << YAML::Value << o.warmup;
    e << YAML::Key << "peak_lr" << YAML::Value;
    if (o.peak_lr > 0.0) e << o.peak_lr;
    else e << "auto";
    e << YAML::Key << "final_lr_fraction" << YAML::Value << o.final_lr_fraction;
    e << YAML::Key << "shift_start" << YAML::Value << o.shift_start;
    e << YAML::Key << "shift_end" << YAML::Value << o.shift_end;
    e << YAML::Key << "max_step" << YAML::Value << o.max_step;
    e << YAML::Key << "max_measured_step" << YAML::Value << o.max_measured_step;
    e << YAML::Key << "max_backtracks" << YAML::Value << o.max_backtracks;
    e << YAML::Key << "cg_tol" << YAML::Value << o.solver.cg_tol;
    e << YAML::Key << "cg_max_iter" << YAML::Value << o.solver.cg_max_iter;
    e << YAML::EndMap;

    if (!rc.sweep.J.empty() || !rc.sweep.alpha.empty() || !rc.sweep.j2_over_j1.empty()) {
        e << YAML::Key << "sweep" << YAML::Value << YAML::BeginMap;
        e << YAML::Key << "J" << YAML::Value << YAML::Flow << rc.sweep.J;
        e << YAML::Key << "alpha" << YAML::Value << YAML::Flow << rc.sweep.alpha;
        e << YAML::Key << "J2_over_J1" << YAML::Value << YAML::Flow << rc.sweep.j2_over_j1;
        e << YAML::Key << "runs" << YAML::Value << rc.sweep.runs;
        e << YAML::Key << "fidelity" << YAML::Value << rc.sweep.fidelity;
        e << YAML::EndMap;
    }
    e << YAML::Key << "seed" << YAML::Value << tc.seed;
    e << YAML::Key << "threads" << YAML::Value << tc.threads;
    e << YAML::Key << "marshall" << YAML::Value << tc.marshall;
    e << YAML::Key << "output_dir" << YAML::Value << rc.output_dir;
    e << YAML::Key << "precision" << YAML::Value << rc.precision;
    e << YAML::EndMap;
    return std::string(e.c_str()) + "\n";
}

} // namespace dyson
