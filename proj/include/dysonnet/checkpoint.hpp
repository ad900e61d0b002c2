#pragma once

/** @file checkpoint.hpp
    @brief JSON checkpoints: model config, a shape manifest and the flat parameter vector.

    Doubles are written with 17 significant digits, so save -> load -> save is byte-identical.
*/

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "model.hpp"

namespace dyson {

inline constexpr int kCheckpointVersion = 1;

struct ManifestEntry {
    std::string name;
    int offset = 0;
    int size = 0;
};

inline std::vector<ManifestEntry> shape_manifest(const ModelConfig& c) {
    const ParamLayout lo(c);
    const int d = c.d, t = c.token_size;
    std::vector<ManifestEntry> m;
    m.push_back({"E", lo.E, d * t});
    m.push_back({"E_phi", lo.Ephi, d * t});
    for (size_t l = 0; l < lo.layer.size(); ++l) {
        const auto& b = lo.layer[l];
        const std::string p = "layer" + std::to_string(l + 1) + ".";
        m.push_back({p + "s4", b.s4, d * lo.s4_channel});
        m.push_back({p + "W_D", b.WD, d * d});
        m.push_back({p + "w", b.w, d});
        m.push_back({p + "K", b.K, c.window() * d});
        m.push_back({p + "k", b.k, d});
        m.push_back({p + "A_D", b.AD, d * d});
        m.push_back({p + "b", b.b, d});
        m.push_back({p + "U", b.U, d * d});
        m.push_back({p + "V", b.V, d * d});
    }
    m.push_back({"s4_final", lo.s4_final, d * lo.s4_channel});
    m.push_back({"actnorm.scale", lo.an_scale, d});
    m.push_back({"actnorm.shift", lo.an_shift, d});
    m.push_back({"A", lo.A, d * c.d_out});
    if (c.complex_readout) m.push_back({"A_im", lo.A_im, d * c.d_out});
    return m;
}

inline nlohmann::ordered_json model_config_json(const ModelConfig& c) {
    nlohmann::ordered_json j;
    j["layers"] = c.layers;
    j["d"] = c.d;
    j["d_out"] = c.d_out;
    j["token_size"] = c.token_size;
    j["kernel_half_width"] = c.kernel_half_width;
    j["s4_state"] = c.s4_state;
    j["readout"] = to_string(c.readout);
    j["complex_readout"] = c.complex_readout;
    return j;
}

inline std::string checkpoint_to_string(const Model& m) {
    for (double x : m.theta)
        if (!std::isfinite(x)) throw NumericalError("checkpoint: refusing to write non-finite parameters");
    nlohmann::ordered_json j;
    j["format"] = "dysonnet-checkpoint";
    j["version"] = kCheckpointVersion;
    j["model"] = model_config_json(m.cfg);
    auto man = nlohmann::ordered_json::array();
    for (const auto& e : shape_manifest(m.cfg)) man.push_back({{"name", e.name}, {"offset", e.offset}, {"size", e.size}});
    j["manifest"] = man;
    j["n_params"] = m.theta.size();
    j["params"] = m.theta;
    return j.dump(1) + "\n";
}

inline Model checkpoint_from_string(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("checkpoint: invalid JSON: ") + e.what());
    }
    try {
        if (j.at("format") != "dysonnet-checkpoint") throw ConfigError("checkpoint: unknown format");
        if (j.at("version").get<int>() != kCheckpointVersion)
            throw ConfigError("checkpoint: unsupported version " + j.at("version").dump());
        const auto& mj = j.at("model");
        ModelConfig c;
        c.layers = mj.at("layers");
        c.d = mj.at("d");
        c.d_out = mj.at("d_out");
        c.token_size = mj.at("token_size");
        c.kernel_half_width = mj.at("kernel_half_width");
        c.s4_state = mj.at("s4_state");
        c.readout = readout_from_string(mj.at("readout"));
        c.complex_readout = mj.at("complex_readout");
        Model m(c);
        const auto want = shape_manifest(c);
        const auto& man = j.at("manifest");
        if (man.size() != want.size()) throw ConfigError("checkpoint: manifest does not match the model config");
        for (size_t i = 0; i < want.size(); ++i) {
            if (man[i].at("name") != want[i].name || man[i].at("offset") != want[i].offset || man[i].at("size") != want[i].size)
                throw ConfigError("checkpoint: manifest entry '" + want[i].name + "' does not match the model config");
        }
        auto theta = j.at("params").get<std::vector<double>>();
        if (theta.size() != m.theta.size() || j.at("n_params").get<size_t>() != theta.size())
            throw ConfigError("checkpoint: expected " + std::to_string(m.theta.size()) + " parameters, found " +
                              std::to_string(theta.size()));
        m.theta = std::move(theta);
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("checkpoint: ") + e.what());
    } catch (const DomainError& e) {
        throw ConfigError(std::string("checkpoint: ") + e.what());
    }
}

inline void save_checkpoint(const std::string& path, const Model& m) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write checkpoint '" + path + "'");
    f << checkpoint_to_string(m);
    if (!f) throw ConfigError("failed writing checkpoint '" + path + "'");
}

inline Model load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open checkpoint '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return checkpoint_from_string(ss.str());
}

} // namespace dyson
