#pragma once

/** @file model.hpp
    @brief Model configuration, flat parameter layout and initialization.

    All learnable tensors live in one contiguous std::vector<double>; the layout only
    depends on the architecture, never on the system size.
*/

#include <cmath>
#include <complex>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "errors.hpp"
#include "s4_kernel.hpp"

namespace dyson {

enum class Readout { SumCosh, SumLogCosh, Exp };

inline std::string to_string(Readout r) {
    switch (r) {
    case Readout::SumCosh: return "sum_cosh";
    case Readout::SumLogCosh: return "sum_logcosh";
    case Readout::Exp: return "exp";
    }
    return "?";
}

inline Readout readout_from_string(const std::string& s) {
    if (s == "sum_cosh") return Readout::SumCosh;
    if (s == "sum_logcosh") return Readout::SumLogCosh;
    if (s == "exp") return Readout::Exp;
    throw DomainError("unknown readout '" + s + "' (expected sum_cosh, sum_logcosh or exp)");
}

struct ModelConfig {
    int layers = 2;
    int d = 14;
    int d_out = 2;
    int token_size = 2;
    int kernel_half_width = 2;  // w_k; the depthwise window is 2 w_k + 1 tokens
    int s4_state = 12;
    Readout readout = Readout::SumCosh;
    bool complex_readout = false;

    void validate() const {
        require(layers >= 1, "model.layers must be >= 1");
        require(d >= 1, "model.d must be >= 1");
        require(d_out >= 1, "model.d_out must be >= 1");
        require(token_size >= 1, "model.token_size must be >= 1");
        require(kernel_half_width >= 0, "model.kernel_half_width must be >= 0");
        require(s4_state >= 1, "model.s4_state must be >= 1");
    }
    int window() const { return 2 * kernel_half_width + 1; }
};

/// Offsets of one block into the flat vector. Matrices are row-major d x d.
struct LayerOffsets {
    int s4 = 0;  // d channels of s4::channel_size(s)
    int WD = 0, w = 0, K = 0, k = 0, AD = 0, b = 0, U = 0, V = 0;
};

struct ParamLayout {
    int E = 0, Ephi = 0;  // d x token_size, row-major
    std::vector<LayerOffsets> layer;
    int s4_final = 0;
    int an_scale = 0, an_shift = 0;
    int A = 0, A_im = -1;  // d x d_out, row-major
    int total = 0;
    int s4_channel = 0;

    explicit ParamLayout(const ModelConfig& c = {}) {
        c.validate();
        const int d = c.d, t = c.token_size;
        s4_channel = s4::channel_size(c.s4_state);
        int o = 0;
        auto take = [&](int n) {
            const int at = o;
            o += n;
            return at;
        };
        E = take(d * t);
        Ephi = take(d * t);
        for (int l = 0; l < c.layers; ++l) {
            LayerOffsets lo;
            lo.s4 = take(d * s4_channel);
            lo.WD = take(d * d);
            lo.w = take(d);
            lo.K = take(c.window() * d);
            lo.k = take(d);
            lo.AD = take(d * d);
            lo.b = take(d);
            lo.U = take(d * d);
            lo.V = take(d * d);
            layer.push_back(lo);
        }
        s4_final = take(d * s4_channel);
        an_scale = take(d);
        an_shift = take(d);
        A = take(d * c.d_out);
        if (c.complex_readout) A_im = take(d * c.d_out);
        total = o;
    }
};

struct Model {
    ModelConfig cfg;
    ParamLayout layout;
    std::vector<double> theta;
    uint64_t version = 1;  // bumped on every parameter change; part of cache fingerprints

    Model() : layout(cfg), theta(static_cast<size_t>(layout.total), 0.0) {}
    explicit Model(const ModelConfig& c) : cfg(c), layout(c), theta(static_cast<size_t>(layout.total), 0.0) {}

    double* at(int offset) { return theta.data() + offset; }
    const double* at(int offset) const { return theta.data() + offset; }
    void touch() { ++version; }
};

/// Random initialization. S4 blocks use the HiPPO spectrum; readout starts small so
/// the initial amplitude is close to uniform.
inline Model init_model(const ModelConfig& c, uint64_t seed, double readout_scale = 0.1) {
    Model m(c);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    const int d = c.d, t = c.token_size, s = c.s4_state;
    auto fill = [&](int off, int n, double sd) {
        for (int i = 0; i < n; ++i) m.theta[static_cast<size_t>(off + i)] = sd * nd(rng);
    };
    fill(m.layout.E, d * t, 1.0 / std::sqrt(static_cast<double>(t)));
    fill(m.layout.Ephi, d * t, 1.0 / std::sqrt(static_cast<double>(t)));
    const double sd_mat = 1.0 / std::sqrt(static_cast<double>(d));
    for (const auto& lo : m.layout.layer) {
        for (int ch = 0; ch < d; ++ch) s4::init_channel(m.at(lo.s4 + ch * m.layout.s4_channel), s, rng);
        fill(lo.WD, d * d, sd_mat);
        fill(lo.K, c.window() * d, 1.0 / std::sqrt(static_cast<double>(c.window())));
        fill(lo.AD, d * d, sd_mat);
        fill(lo.U, d * d, sd_mat);
        fill(lo.V, d * d, sd_mat);
    }
    for (int ch = 0; ch < d; ++ch) s4::init_channel(m.at(m.layout.s4_final + ch * m.layout.s4_channel), s, rng);
    for (int i = 0; i < d; ++i) m.theta[static_cast<size_t>(m.layout.an_scale + i)] = 1.0;
    fill(m.layout.A, d * c.d_out, readout_scale * sd_mat);
    if (c.complex_readout) fill(m.layout.A_im, d * c.d_out, readout_scale * sd_mat);
    return m;
}

// ---- readout nonlinearity -------------------------------------------------

using cplx = std::complex<double>;

/// log f(Omega). sum_cosh: log sum_c cosh(Omega_c) via a max-shifted log-sum-exp.
inline cplx log_amplitude(Readout f, const std::vector<cplx>& om) {
    require(!om.empty(), "log_amplitude: empty output");
    switch (f) {
    case Readout::SumCosh: {
        double m = -1e300;
        for (auto w : om) m = std::max(m, std::abs(w.real()));
        cplx s = 0.0;
        for (auto w : om) s += std::exp(w - m) + std::exp(-w - m);
        if (std::abs(s) < 1e-300) throw NumericalError("log_amplitude: sum of cosh vanishes");
        return m + std::log(s) - std::log(2.0);
    }
    case Readout::SumLogCosh: {
        cplx acc = 0.0;
        for (auto w : om) {
            const cplx z = w.real() >= 0 ? w : -w;
            acc += z + std::log(1.0 + std::exp(-2.0 * z)) - std::log(2.0);
        }
        return acc;
    }
    case Readout::Exp: {
        cplx acc = 0.0;
        for (auto w : om) acc += w;
        return acc;
    }
    }
    return 0.0;
}

/// d logPsi / d Omega_c.
inline std::vector<cplx> log_amplitude_grad(Readout f, const std::vector<cplx>& om) {
    std::vector<cplx> g(om.size());
    switch (f) {
    case Readout::SumCosh: {
        double m = -1e300;
        for (auto w : om) m = std::max(m, std::abs(w.real()));
        cplx s = 0.0;
        for (auto w : om) s += std::exp(w - m) + std::exp(-w - m);
        for (size_t c = 0; c < om.size(); ++c) g[c] = (std::exp(om[c] - m) - std::exp(-om[c] - m)) / s;
        break;
    }
    case Readout::SumLogCosh:
        for (size_t c = 0; c < om.size(); ++c) g[c] = std::tanh(om[c]);
        break;
    case Readout::Exp:
        for (auto& x : g) x = 1.0;
        break;
    }
    return g;
}

} // namespace dyson
