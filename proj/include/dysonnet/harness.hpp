#pragma once

/** @file harness.hpp
    @brief Validation suites and timing benchmarks shared by the command-line tool and the
    acceptance runner.
*/

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "abacus.hpp"
#include "gradcheck.hpp"
#include "sampler.hpp"
#include "vmc.hpp"

namespace dyson::harness {

// ---- timing -----------------------------------------------------------------------------

struct Timing {
    double median = 0.0;  // seconds
    double p90 = 0.0;
    int reps = 0;
};

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Runs f warmup + reps times and summarizes the last reps wall times.
inline Timing time_reps(int reps, int warmup, const std::function<void()>& f) {
    require(reps >= 1, "time_reps: reps must be >= 1");
    for (int i = 0; i < warmup; ++i) f();
    std::vector<double> t;
    for (int i = 0; i < reps; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        f();
        t.push_back(seconds_since(t0));
    }
    std::sort(t.begin(), t.end());
    Timing r;
    r.reps = reps;
    r.median = t[t.size() / 2];
    if (t.size() % 2 == 0) r.median = 0.5 * (t[t.size() / 2 - 1] + t[t.size() / 2]);
    r.p90 = t[std::min(t.size() - 1, static_cast<size_t>(std::ceil(0.9 * static_cast<double>(t.size()))) - 1)];
    return r;
}

/// Least-squares fit of t = a * x in log space; residual is max |t / (a x) - 1|.
struct ScalingFit {
    double prefactor = 0.0;
    double max_residual = 0.0;
};

inline ScalingFit fit_proportional(const std::vector<double>& x, const std::vector<double>& t) {
    require(x.size() == t.size() && !x.empty(), "fit_proportional: size mismatch");
    double s = 0.0;
    for (size_t i = 0; i < x.size(); ++i) s += std::log(t[i] / x[i]);
    ScalingFit f;
    f.prefactor = std::exp(s / static_cast<double>(x.size()));
    for (size_t i = 0; i < x.size(); ++i) f.max_residual = std::max(f.max_residual, std::abs(t[i] / (f.prefactor * x[i]) - 1.0));
    return f;
}

/// Log-log slope of t against n.
inline double loglog_slope(const std::vector<double>& n, const std::vector<double>& t) {
    require(n.size() == t.size() && n.size() >= 2, "loglog_slope: need two points");
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < n.size(); ++i) {
        mx += std::log(n[i]);
        my += std::log(t[i]);
    }
    mx /= static_cast<double>(n.size());
    my /= static_cast<double>(n.size());
    double sxy = 0.0, sxx = 0.0;
    for (size_t i = 0; i < n.size(); ++i) {
        sxy += (std::log(n[i]) - mx) * (std::log(t[i]) - my);
        sxx += (std::log(n[i]) - mx) * (std::log(n[i]) - mx);
    }
    return sxy / sxx;
}

/// Random parameters with O(1) gates so that every layer contributes.
inline Model random_params(const ModelConfig& c, uint64_t seed, double readout = 0.7) {
    Model m = init_model(c, seed, readout);
    std::mt19937_64 rng(seed + 1000);
    std::normal_distribution<double> nd;
    for (const auto& lo : m.layout.layer)
        for (int i = 0; i < c.d; ++i) {
            m.theta[static_cast<size_t>(lo.w + i)] = 0.3 * nd(rng);
            m.theta[static_cast<size_t>(lo.k + i)] = 0.3 * nd(rng);
            m.theta[static_cast<size_t>(lo.b + i)] = 0.5 * nd(rng);
        }
    for (int i = 0; i < c.d; ++i) m.theta[static_cast<size_t>(m.layout.an_shift + i)] = 0.2 * nd(rng);
    m.touch();
    return m;
}

// ---- benchmarks -------------------------------------------------------------------------

struct UpdateBenchRow {
    int n = 0;
    Timing full_forward, abacus_delta, cache_build;
};

/// Full forward, a cached single-flip Delta Omega and a cache build at system size n.
inline UpdateBenchRow bench_update(const ModelConfig& c, int n, int reps, uint64_t seed = 1) {
    const Model m = random_params(c, seed);
    PreparedModel pm(m, n);
    std::mt19937_64 rng(seed + static_cast<uint64_t>(n));
    const SpinConfig s0 = SpinConfig::random(n, rng);
    UpdateBenchRow r;
    r.n = n;
    volatile double sink = 0.0;
    r.full_forward = time_reps(reps, 2, [&] { sink = sink + forward(pm, s0).log_psi.real(); });
    const LinkCache cache(pm, s0);
    std::uniform_int_distribution<int> site(0, n - 1);
    // each rep averages a batch of flips so that one measurement is well above timer resolution
    const int batch = 64;
    std::vector<int> sites(batch);
    for (auto& s : sites) s = site(rng);
    const Timing t = time_reps(reps, 2, [&] {
        for (int s : sites) sink = sink + cache.delta_omega({s})[0].real();
    });
    r.abacus_delta = {t.median / batch, t.p90 / batch, t.reps};
    r.cache_build = time_reps(std::max(3, reps / 4), 1, [&] { sink = sink + LinkCache(pm, s0).log_psi0().real(); });
    return r;
}

struct EstimatorBenchRow {
    int n = 0;
    int elements = 0;
    double abacus_per_element = 0.0;  // seconds, cache build amortized over the N elements
    double full_per_element = 0.0;
    double speedup = 0.0;
};

inline EstimatorBenchRow bench_estimator(const ModelConfig& c, int n, int reps, uint64_t seed = 1) {
    const Model m = random_params(c, seed);
    PreparedModel pm(m, n);
    HamiltonianSpec H;
    H.n = n;
    std::mt19937_64 rng(seed + static_cast<uint64_t>(n));
    const SpinConfig s = SpinConfig::random(n, rng);
    EstimatorOptions ab;
    ab.use_abacus = true;
    const LocalEstimator fast(H, pm, ab);
    volatile double sink = 0.0;
    const Timing ta = time_reps(reps, 1, [&] { sink = sink + fast.via_abacus(s).real(); });
    // the full path costs one forward per element; time a fixed subset of elements
    const auto elems = connected_elements(H, s);
    const int sub = std::min<int>(32, static_cast<int>(elems.size()));
    const Timing tf = time_reps(reps, 1, [&] {
        for (int k = 0; k < sub; ++k) {
            SpinConfig t = s;
            for (int q = 0; q < elems[k].count; ++q) t.flip(elems[k].sites[q]);
            sink = sink + forward(pm, t).log_psi.real();
        }
    });
    EstimatorBenchRow r;
    r.n = n;
    r.elements = static_cast<int>(elems.size());
    r.abacus_per_element = ta.median / static_cast<double>(elems.size());
    r.full_per_element = tf.median / sub;
    r.speedup = r.full_per_element / r.abacus_per_element;
    return r;
}

struct SamplerBenchRow {
    int n = 0;
    ThroughputStats throughput;
    double acceptance = 0.0;
    double seconds_per_sweep = 0.0;
    std::string mode;
};

/// Throughput after `burn_in` sweeps; in adaptive_buffer mode the burn-in also calibrates eps(k).
inline SamplerBenchRow bench_sampler(const Model& m, int n, const SamplerConfig& sc, int sweeps, uint64_t seed = 1,
                                     int burn_in = 20) {
    PreparedModel pm(m, n);
    std::mt19937_64 rng(seed);
    Chain ch(pm, SpinConfig::random(n, rng), seed, sc);
    for (int s = 0; s < burn_in; ++s) ch.sweep();
    const auto before = ch.counters();
    const auto t0 = std::chrono::steady_clock::now();
    for (int s = 0; s < sweeps; ++s) ch.sweep();
    SamplerBenchRow r;
    r.n = n;
    r.seconds_per_sweep = seconds_since(t0) / sweeps;
    const auto after = ch.counters();
    const double props = static_cast<double>(after.proposals - before.proposals);
    const double refreshes = static_cast<double>(after.refreshes - before.refreshes);
    r.throughput.ideal = ch.throughput().ideal;
    r.throughput.measured = refreshes > 0 ? props / refreshes : 0.0;
    r.throughput.ratio = r.throughput.ideal > 0 ? r.throughput.measured / r.throughput.ideal : 0.0;
    r.acceptance = props > 0 ? static_cast<double>(after.accepts - before.accepts) / props : 0.0;
    r.mode = to_string(ch.mode());
    return r;
}

// ---- validation suites --------------------------------------------------------------------

struct SuiteResult {
    std::string name;
    bool pass = false;
    double max_error = 0.0;
    double tolerance = 0.0;
    long checks = 0;
    std::string detail;
};

inline double max_abs_diff(const std::vector<cplx>& a, const std::vector<cplx>& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double max_abs(const std::vector<cplx>& a) {
    double m = 0.0;
    for (auto x : a) m = std::max(m, std::abs(x));
    return m;
}

/// Cached local updates against full forwards over random (params, sigma0, update) triples.
/// corrupt perturbs every cache (negative control).
inline SuiteResult suite_abacus_exactness(const std::vector<int>& sizes, const std::vector<int>& depths, int params_per_case,
                                          int updates_per_cache, uint64_t seed, bool corrupt = false) {
    SuiteResult r{"abacus_exactness", true, 0.0, 1e-10, 0, ""};
    for (int n : sizes)
        for (int L : depths)
            for (int p = 0; p < params_per_case; ++p) {
                ModelConfig c;
                c.layers = L;
                c.d = 3;
                c.d_out = 2;
                c.s4_state = 3;
                c.kernel_half_width = n >= 64 ? 2 : 1;
                const uint64_t ps = splitmix64(seed + 1000003ull * n + 101ull * L + p);
                const Model m = random_params(c, ps);
                PreparedModel pm(m, n);
                std::mt19937_64 rng(ps);
                const int n_tok = pm.n_tok();
                const int margin = 2 * abacus_half_width(c, 1) + 1 <= n_tok ? 1 : 0;
                const SpinConfig s0 = SpinConfig::random(n, rng);
                AbacusOptions ao;
                ao.margin = margin;
                LinkCache cache(pm, s0, ao);
                if (corrupt) cache.corrupt_for_testing();
                std::uniform_int_distribution<int> site(0, n - 1);
                for (int u = 0; u < updates_per_cache; ++u) {
                    std::vector<int> flip{site(rng)};
                    // with a margin, every other update is a two-site cluster within one token
                    if (margin && u % 2) flip.push_back(wrap(flip[0] + 1 + static_cast<int>(rng() % 2), n));
                    SpinConfig s1 = s0;
                    for (int i : flip) s1.flip(i);
                    const auto full = forward(pm, s1).omega;
                    const auto fast = cache.omega_from_pool_delta(cache.pool_delta(flip));
                    const double err = max_abs_diff(full, fast) / std::max(max_abs(full), 1e-300);
                    r.max_error = std::max(r.max_error, err);
                    ++r.checks;
                }
            }
    r.pass = r.max_error < r.tolerance;
    r.detail = "relative output error over " + std::to_string(r.checks) + " (params, sigma0, update) triples";
    return r;
}

/// Dense N d x N d operators on the frozen background: G^l and B^k = D0^k G^k.
inline Eigen::MatrixXd dense_green(const PreparedModel& pm, int l) {
    const int n = pm.n_tok(), d = pm.cfg().d;
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(n * d, n * d);
    for (int j = 0; j < n; ++j)
        for (int p = 0; p < n; ++p)
            for (int c = 0; c < d; ++c) G(j * d + c, p * d + c) = pm.kernels(l - 1)[c].g[wrap(j - p, n)];
    return G;
}

inline Eigen::MatrixXd dense_step(const PreparedModel& pm, const ForwardTrace& tr, int k) {
    const int n = pm.n_tok(), d = pm.cfg().d;
    const LayerView lv = layer_view(pm.model(), k - 1);
    Eigen::MatrixXd D = Eigen::MatrixXd::Zero(n * d, n * d);
    for (int j = 0; j < n; ++j) D.block(j * d, j * d, d, d) = lv.U * tr.chi[k - 1].row(j).transpose().asDiagonal() * lv.V;
    return D * dense_green(pm, k);
}

/// FFT-built one-intermediate-vertex links against dense triple products G^l D0^{l-1} G^{l-1}.
inline SuiteResult suite_links(int n, uint64_t seed) {
    SuiteResult r{"link_fft_vs_dense", true, 0.0, 1e-10, 0, ""};
    ModelConfig c;
    c.layers = 3;
    c.d = 3;
    c.s4_state = 3;
    c.kernel_half_width = 2;
    const Model m = random_params(c, seed);
    PreparedModel pm(m, n);
    std::mt19937_64 rng(seed);
    const SpinConfig s0 = SpinConfig::random(n, rng);
    AbacusOptions ao;
    ao.link_method = LinkMethod::FFT;
    const LinkCache cache(pm, s0, ao);
    const auto& tr = cache.baseline();
    const int nt = pm.n_tok(), d = c.d;
    double scale = 0.0;
    for (auto [l, mm] : {std::pair{2, 0}, std::pair{3, 1}}) {
        const Eigen::MatrixXd dense = dense_green(pm, l) * dense_step(pm, tr, l - 1);
        scale = std::max(scale, dense.cwiseAbs().maxCoeff());
        for (int center = 0; center < nt; ++center)
            for (int o = cache.window_lo(l); o < cache.window_lo(l) + cache.window_size(l); ++o)
                for (int op = cache.window_lo(mm); op < cache.window_lo(mm) + cache.window_size(mm); ++op) {
                    const Eigen::MatrixXd blk = dense.block(wrap(center + o, nt) * d, wrap(center + op, nt) * d, d, d);
                    r.max_error = std::max(r.max_error, (blk - cache.link_block(l, mm, center, o, op)).cwiseAbs().maxCoeff());
                    ++r.checks;
                }
    }
    r.max_error /= std::max(scale, 1e-300);
    r.pass = r.max_error < r.tolerance;
    r.detail = "relative link error over " + std::to_string(r.checks) + " d x d blocks at N = " + std::to_string(n);
    return r;
}

inline ModelConfig screened_test_config() {
    ModelConfig c;
    c.layers = 2;
    c.d = 3;
    c.s4_state = 3;
    c.kernel_half_width = 0;
    return c;
}

/// Replays a recorded chain with exact Metropolis on full forwards; returns mismatching decisions.
inline long replay_mismatches(const PreparedModel& pm, SpinConfig s, const std::vector<TraceEvent>& events) {
    long bad = 0;
    cplx lp = forward(pm, s).log_psi;
    for (const auto& e : events) {
        SpinConfig next = s;
        bool null_move = false;
        if (e.global) {
            next.invert();
        } else {
            null_move = e.sites.size() == 2 && s[e.sites[0]] == s[e.sites[1]];
            for (int i : e.sites) next.flip(i);
        }
        bool acc = false;
        cplx lpn = lp;
        if (!null_move) {
            lpn = forward(pm, next).log_psi;
            acc = e.u < std::min(1.0, std::exp(2.0 * (lpn - lp).real()));
        }
        if (acc != e.accepted) ++bad;
        if (e.accepted) {
            s = next;
            lp = lpn;
        }
    }
    return bad;
}

/// Screened exact-bound chain against exact Metropolis with identical proposals and uniforms.
inline SuiteResult suite_screened_replay(int n, long proposals, uint64_t seed, double readout_scale = 2.0) {
    SuiteResult r{"screened_mh_replay", true, 0.0, 0.0, 0, ""};
    // token-local gates allow spacing 1, so a pass at N = 20 holds several concurrent proposals
    const ModelConfig c = screened_test_config();
    const Model m = random_params(c, seed, readout_scale);
    PreparedModel pm(m, n);
    std::mt19937_64 rng(seed);
    const SpinConfig start = SpinConfig::random(n, rng);
    SamplerConfig sc;
    sc.mode = SamplerMode::ExactBound;
    sc.spacing = 1;
    Chain ch(pm, start, seed, sc);
    if (ch.mode() != SamplerMode::ExactBound) {
        r.pass = false;
        r.detail = "chain fell back: " + ch.fallback_reason();
        return r;
    }
    std::vector<TraceEvent> ev;
    ch.set_trace([&](const TraceEvent& e) { ev.push_back(e); });
    ch.advance(proposals);
    const long bad = replay_mismatches(pm, start, ev);
    r.checks = static_cast<long>(ev.size());
    r.max_error = static_cast<double>(bad);
    const auto& k = ch.counters();
    r.pass = bad == 0 && k.bound_violations == 0 && k.accepts > 0 && k.rejects() > 0;
    r.detail = std::to_string(bad) + " mismatches over " + std::to_string(ev.size()) + " decisions (" +
               std::to_string(k.accepts) + " accepts, " + std::to_string(k.ambiguous) + " ambiguous, " +
               std::to_string(k.bound_violations) + " bound violations)";
    return r;
}

/// Reverse-mode log-derivative against central differences on random configurations.
inline SuiteResult suite_gradients(const ModelConfig& c, int n, int configs, uint64_t seed) {
    SuiteResult r{"gradient_check", true, 0.0, 1.0, 0, ""};
    const Model m = random_params(c, seed, 0.5);
    std::mt19937_64 rng(seed);
    double worst_rel = 0.0;
    for (int k = 0; k < configs; ++k) {
        const auto rep = gradient_check(m, SpinConfig::random(n, rng));
        r.max_error = std::max(r.max_error, rep.worst_ratio);
        worst_rel = std::max(worst_rel, rep.worst_rel_error);
        r.checks += rep.checked;
    }
    r.pass = r.max_error <= r.tolerance;
    r.detail = "worst |a - fd| / (1e-5 max(|a|,|fd|) + fd noise) over " + std::to_string(r.checks) +
               " parameter checks; plain relative error there " + std::to_string(worst_rel);
    return r;
}

/// Independent-scattering error of two well-separated flips against the computed envelope,
/// both on Omega and on the amplitude ratio.
inline SuiteResult suite_isa_bound(int n, int batches, uint64_t seed) {
    SuiteResult r{"isa_error_bound", true, 0.0, 1.0, 0, ""};
    ModelConfig c;
    c.layers = 2;
    c.d = 3;
    c.s4_state = 3;
    c.kernel_half_width = 1;
    const int per_cache = 100;
    const int spacing = 2 * c.layers * c.kernel_half_width;
    long violations = 0;
    double max_dz = 0.0;
    for (int b0 = 0; b0 < batches; b0 += per_cache) {
        const uint64_t ps = splitmix64(seed + static_cast<uint64_t>(b0));
        const Model m = random_params(c, ps, 1.0);
        PreparedModel pm(m, n);
        std::mt19937_64 rng(ps);
        const SpinConfig s0 = SpinConfig::random(n, rng);
        const LinkCache cache(pm, s0);
        const IsaBound bound(cache);
        const int nt = pm.n_tok();
        for (int b = b0; b < std::min(batches, b0 + per_cache); ++b) {
            const int t1 = static_cast<int>(rng() % nt);
            const int gap = spacing + static_cast<int>(rng() % (nt - 2 * spacing + 1));
            const int t2 = wrap(t1 + gap, nt);
            const int i1 = t1 * c.token_size + static_cast<int>(rng() % c.token_size);
            const int i2 = t2 * c.token_size + static_cast<int>(rng() % c.token_size);
            FlipDetail d1, d2;
            const auto o1 = cache.omega_from_pool_delta(cache.pool_delta({i1}, &d1));
            const auto o2 = cache.omega_from_pool_delta(cache.pool_delta({i2}, &d2));
            std::vector<cplx> isa = cache.omega0();
            for (size_t o = 0; o < isa.size(); ++o) isa[o] += (o1[o] - cache.omega0()[o]) + (o2[o] - cache.omega0()[o]);
            SpinConfig s1 = s0;
            s1.flip(i1);
            s1.flip(i2);
            const auto tr = forward(pm, s1);
            const double err = max_abs_diff(isa, tr.omega);
            const double dz = bound.delta_z_for({d1, d2});
            max_dz = std::max(max_dz, dz);
            const cplx psi_isa = std::exp(log_amplitude(c.readout, isa) - cache.log_psi0());
            const cplx psi_true = std::exp(tr.log_psi - cache.log_psi0());
            const double amp_err = std::abs(psi_true - psi_isa);
            const double amp_bound = amplitude_error_factor(dz) * std::abs(psi_isa);
            const double slack = 1e-12 * (1.0 + max_abs(tr.omega));
            const double ratio = std::max(err / (dz + slack), amp_err / (amp_bound + 1e-12 * std::abs(psi_true)));
            r.max_error = std::max(r.max_error, ratio);
            if (err > dz + slack || amp_err > amp_bound + 1e-12 * std::abs(psi_true)) ++violations;
            ++r.checks;
        }
    }
    r.pass = violations == 0;
    r.detail = std::to_string(violations) + " violations over " + std::to_string(r.checks) +
               " two-flip batches; worst error / bound " + std::to_string(r.max_error) + ", largest bound " +
               std::to_string(max_dz);
    return r;
}

struct ValidationOptions {
    bool quick = false;
    bool corrupt_cache = false;
    uint64_t seed = 7;
};

inline std::vector<SuiteResult> run_validation(const ValidationOptions& o) {
    std::vector<SuiteResult> out;
    const std::vector<int> sizes = o.quick ? std::vector<int>{16, 64} : std::vector<int>{16, 64, 256};
    out.push_back(suite_abacus_exactness(sizes, {1, 2, 3}, o.quick ? 1 : 3, o.quick ? 20 : 40, o.seed, o.corrupt_cache));
    out.push_back(suite_links(64, o.seed));
    out.push_back(suite_screened_replay(20, o.quick ? 20000 : 100000, o.seed));
    ModelConfig g;
    g.d = o.quick ? 4 : 6;
    g.s4_state = 4;
    out.push_back(suite_gradients(g, 16, o.quick ? 1 : 3, o.seed));
    out.push_back(suite_isa_bound(64, o.quick ? 1000 : 10000, o.seed));
    return out;
}

} // namespace dyson::harness
