#pragma once

/** @file vmc.hpp
    @brief Local energies, stochastic reconfiguration, observables and the training loop.
*/

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "abacus.hpp"
#include "ed.hpp"
#include "errors.hpp"
#include "network.hpp"
#include "parallel.hpp"
#include "sampler.hpp"
#include "spin_systems.hpp"

namespace dyson {

// ---- sign rule -----------------------------------------------------------------------------

/// Marshall sign (-1)^{down spins on odd sites}.
inline int marshall_sign(const SpinConfig& s) {
    int down = 0;
    for (int i = 1; i < s.n(); i += 2) down += s[i] < 0;
    return down % 2 ? -1 : 1;
}

/// Sign of M(sigma')/M(sigma) for a move touching `sites`; a cross-sublattice exchange flips it.
inline int marshall_ratio(const ConnectedElement& e) {
    if (e.count != 2) return 1;
    return ((e.sites[0] - e.sites[1]) % 2 != 0) ? -1 : 1;
}

// ---- local estimator -------------------------------------------------------------------------

struct EstimatorOptions {
    bool use_abacus = false;
    bool marshall = false;
};

/// E_loc(sigma) = sum over connected sigma' of <sigma|H|sigma'> Psi(sigma') / Psi(sigma).
class LocalEstimator {
public:
    LocalEstimator(const HamiltonianSpec& H, const PreparedModel& pm, EstimatorOptions opt = {})
        : H_(H), pm_(&pm), opt_(opt) {
        H_.validate();
        if (H_.n != pm.n_spins()) throw DomainError("local estimator: Hamiltonian and model sizes differ");
        if (opt_.marshall && H_.n % 2) throw DomainError("local estimator: the Marshall sign needs an even chain");
        margin_ = H_.conserves_sz() ? 1 : 0;
        if (opt_.use_abacus && !abacus_applicable(pm.cfg(), pm.n_tok(), margin_)) opt_.use_abacus = false;
    }

    bool uses_abacus() const { return opt_.use_abacus; }

    cplx operator()(const SpinConfig& s) const { return opt_.use_abacus ? via_abacus(s) : via_forward(s); }

    /// Full-forward path; also the oracle for the ABACUS path.
    cplx via_forward(const SpinConfig& s) const {
        const cplx lp0 = checked(forward(*pm_, s).log_psi);
        cplx e = 0.0;
        for (const auto& c : connected_elements(H_, s)) {
            if (c.count == 0) {
                e += c.amplitude;
                continue;
            }
            SpinConfig t = s;
            for (int k = 0; k < c.count; ++k) t.flip(c.sites[k]);
            e += c.amplitude * sign(c) * std::exp(forward(*pm_, t).log_psi - lp0);
        }
        return e;
    }

    cplx via_abacus(const SpinConfig& s) const {
        AbacusOptions ao;
        ao.margin = margin_;
        LinkCache cache(*pm_, s, ao);
        checked(cache.log_psi0());
        cplx e = 0.0;
        for (const auto& c : connected_elements(H_, s)) {
            if (c.count == 0) {
                e += c.amplitude;
                continue;
            }
            std::vector<int> sites(c.sites, c.sites + c.count);
            e += c.amplitude * sign(c) * psi_ratio(cache, cache.delta_omega(sites));
        }
        return e;
    }

private:
    double sign(const ConnectedElement& c) const { return opt_.marshall ? marshall_ratio(c) : 1.0; }
    static cplx checked(cplx lp) {
        if (!std::isfinite(lp.real()) || lp.real() < -700.0)
            throw NumericalError("local estimator: amplitude vanishes (log|Psi| = " + std::to_string(lp.real()) + ")");
        return lp;
    }

    HamiltonianSpec H_;
    const PreparedModel* pm_;
    EstimatorOptions opt_;
    int margin_ = 0;
};

// ---- energy statistics -------------------------------------------------------------------------

struct EnergyEstimate {
    double mean = 0.0;
    double variance = 0.0;
    double stderr_ = 0.0;
    double v_score = std::numeric_limits<double>::quiet_NaN();
    long count = 0;
};

inline double v_score(const EnergyEstimate& e, int n) {
    if (e.mean == 0.0) throw DomainError("v_score: undefined for zero energy");
    return n * e.variance / (e.mean * e.mean);
}

inline EnergyEstimate estimate_energy(const std::vector<cplx>& eloc, int n) {
    require(!eloc.empty(), "estimate_energy: no samples");
    EnergyEstimate e;
    e.count = static_cast<long>(eloc.size());
    cplx m = 0.0;
    for (auto x : eloc) m += x;
    m /= static_cast<double>(e.count);
    double v = 0.0;
    for (auto x : eloc) v += std::norm(x - m);
    e.mean = m.real();
    e.variance = v / static_cast<double>(e.count);
    e.stderr_ = std::sqrt(e.variance / static_cast<double>(e.count));
    if (e.mean != 0.0) e.v_score = v_score(e, n);
    return e;
}

// ---- stochastic reconfiguration ------------------------------------------------------------------

struct SRSolverOptions {
    double cg_tol = 1e-6;      // relative residual
    int cg_max_iter = 2000;
    int dense_below = 500;     // parameters; dense LDLT below this size
    int max_doublings = 3;
};

struct SRSolution {
    Eigen::VectorXd delta;     // already multiplied by the learning rate
    double shift_used = 0.0;
    int doublings = 0;
    int cg_iterations = 0;     // 0 for the dense path
    double residual = 0.0;     // relative
    double fs_length = 0.0;    // sqrt(delta^T S delta) after scaling
    bool clipped = false;
};

/// Centered log-derivatives (samples x params, real and imaginary parts) and local energies.
struct SRSystem {
    Eigen::MatrixXd Ore, Oim;  // Oim may be empty (real log-derivatives)
    Eigen::VectorXd force;     // F = Re <O^* (E - <E>)>
    long samples = 0;

    Eigen::VectorXd apply_S(const Eigen::VectorXd& v) const {
        Eigen::VectorXd out = Ore.transpose() * (Ore * v);
        if (Oim.size()) out += Oim.transpose() * (Oim * v);
        return out / static_cast<double>(samples);
    }
    Eigen::MatrixXd dense_S() const {
        Eigen::MatrixXd S = Ore.transpose() * Ore;
        if (Oim.size()) S += Oim.transpose() * Oim;
        return S / static_cast<double>(samples);
    }
};

inline SRSystem make_sr_system(const Eigen::MatrixXd& Ore, const Eigen::MatrixXd& Oim, const std::vector<cplx>& eloc) {
    const long ns = Ore.rows();
    if (ns < 2) throw DomainError("sr_update: need at least 2 samples");
    if (static_cast<long>(eloc.size()) != ns) throw DomainError("sr_update: sample count mismatch");
    if (Oim.size() && (Oim.rows() != ns || Oim.cols() != Ore.cols())) throw DomainError("sr_update: shape mismatch");
    SRSystem sys;
    sys.samples = ns;
    sys.Ore = Ore.rowwise() - Ore.colwise().mean();
    if (Oim.size()) sys.Oim = Oim.rowwise() - Oim.colwise().mean();
    cplx em = 0.0;
    for (auto x : eloc) em += x;
    em /= static_cast<double>(ns);
    Eigen::VectorXd er(ns), ei(ns);
    for (long s = 0; s < ns; ++s) {
        er(s) = (eloc[s] - em).real();
        ei(s) = (eloc[s] - em).imag();
    }
    // Re(conj(O) e) = O_re e_re + O_im e_im
    sys.force = sys.Ore.transpose() * er;
    if (Oim.size()) sys.force += sys.Oim.transpose() * ei;
    sys.force /= static_cast<double>(ns);
    if (!sys.force.allFinite() || !sys.Ore.allFinite()) throw NumericalError("sr_update: non-finite centered quantities");
    return sys;
}

/// Conjugate gradients on (S + shift) x = b. Returns iterations used, or -1 without convergence.
inline int conjugate_gradient(const SRSystem& sys, double shift, const Eigen::VectorXd& b, Eigen::VectorXd& x,
                              double tol, int max_iter, double* rel_res = nullptr) {
    x = Eigen::VectorXd::Zero(b.size());
    const double bn = b.norm();
    if (bn == 0.0) {
        if (rel_res) *rel_res = 0.0;
        return 0;
    }
    Eigen::VectorXd r = b, p = r;
    double rr = r.squaredNorm();
    for (int it = 1; it <= max_iter; ++it) {
        const Eigen::VectorXd Ap = sys.apply_S(p) + shift * p;
        const double alpha = rr / p.dot(Ap);
        x += alpha * p;
        r -= alpha * Ap;
        const double rr_new = r.squaredNorm();
        if (rel_res) *rel_res = std::sqrt(rr_new) / bn;
        if (std::sqrt(rr_new) <= tol * bn) return it;
        p = r + (rr_new / rr) * p;
        rr = rr_new;
    }
    return -1;
}

/// Solves (S + shift) dtheta = -F and scales by lr.
inline SRSolution sr_update(const SRSystem& sys, double shift, double lr, const SRSolverOptions& opt = {}) {
    require(shift > 0.0, "sr_update: diagonal shift must be > 0");
    const Eigen::VectorXd b = -sys.force;
    SRSolution sol;
    const long P = sys.Ore.cols();
    if (P < opt.dense_below) {
        Eigen::MatrixXd A = sys.dense_S();
        A.diagonal().array() += shift;
        sol.delta = A.ldlt().solve(b);
        sol.shift_used = shift;
        sol.residual = b.norm() > 0 ? (A * sol.delta - b).norm() / b.norm() : 0.0;
        if (!sol.delta.allFinite()) throw NumericalError("sr_update: dense solve failed");
        sol.delta *= lr;
        return sol;
    }
    double s = shift;
    for (int k = 0; k <= opt.max_doublings; ++k, s *= 2.0) {
        Eigen::VectorXd x;
        double res = 0.0;
        const int it = conjugate_gradient(sys, s, b, x, opt.cg_tol, opt.cg_max_iter, &res);
        if (it >= 0) {
            sol.delta = lr * x;
            sol.shift_used = s;
            sol.doublings = k;
            sol.cg_iterations = it;
            sol.residual = res;
            return sol;
        }
    }
    throw NumericalError("sr_update: conjugate gradients did not converge after " + std::to_string(opt.max_doublings) +
                         " shift doublings");
}

inline SRSolution sr_update(const Eigen::MatrixXd& Ore, const Eigen::MatrixXd& Oim, const std::vector<cplx>& eloc,
                            double shift, double lr, const SRSolverOptions& opt = {}) {
    return sr_update(make_sr_system(Ore, Oim, eloc), shift, lr, opt);
}

/// Rescales the step so that its Fubini-Study length sqrt(delta^T S delta) is at most max_step.
inline void clip_step(const SRSystem& sys, SRSolution& sol, double max_step) {
    sol.fs_length = std::sqrt(std::max(0.0, sol.delta.dot(sys.apply_S(sol.delta))));
    if (max_step > 0.0 && sol.fs_length > max_step) {
        sol.delta *= max_step / sol.fs_length;
        sol.fs_length = max_step;
        sol.clipped = true;
    }
}

// ---- schedules -----------------------------------------------------------------------------------

struct OptimizerConfig {
    int iterations = 400;
    int warmup = 150;
    double peak_lr = -1.0;           // < 0: max(3.5, 5 N / 340)
    double final_lr_fraction = 0.1;  // cosine decay after warmup ends at this fraction of the peak
    double shift_start = 1e-2;
    double shift_end = 1e-4;
    double max_step = 0.1;           // > 0: cap sqrt(dtheta^T S dtheta) (Fubini-Study length of a step)
    double max_measured_step = 0.2;  // > 0: halve steps whose measured size on the samples exceeds this
    int max_backtracks = 6;          // halvings of a rejected step
    SRSolverOptions solver;

    void validate() const {
        require(iterations >= 0, "optimizer.iterations must be >= 0");
        require(warmup >= 0, "optimizer.warmup must be >= 0");
        require(shift_start > 0.0 && shift_end > 0.0, "optimizer diagonal shifts must be > 0");
        require(final_lr_fraction >= 0.0 && final_lr_fraction <= 1.0, "optimizer.final_lr_fraction must lie in [0,1]");
    }
};

inline double default_peak_lr(int n) { return std::max(3.5, 5.0 * n / 340.0); }

struct SRState {
    OptimizerConfig cfg;
    double peak = 0.0;
    int iteration = 0;

    SRState(const OptimizerConfig& c, int n) : cfg(c), peak(c.peak_lr > 0.0 ? c.peak_lr : default_peak_lr(n)) {
        cfg.validate();
    }
    /// Linear warmup to the peak, then cosine decay to final_lr_fraction * peak.
    double lr(int it) const {
        if (it < cfg.warmup) return peak * (it + 1) / static_cast<double>(cfg.warmup);
        const int rest = std::max(1, cfg.iterations - cfg.warmup);
        const double x = std::min(1.0, (it - cfg.warmup) / static_cast<double>(rest));
        const double lo = cfg.final_lr_fraction * peak;
        return lo + 0.5 * (peak - lo) * (1.0 + std::cos(M_PI * x));
    }
    /// Linear interpolation shift_start -> shift_end over the run.
    double shift(int it) const {
        if (cfg.iterations <= 1) return cfg.shift_start;
        const double x = std::min(1.0, it / static_cast<double>(cfg.iterations - 1));
        return cfg.shift_start + (cfg.shift_end - cfg.shift_start) * x;
    }
};

// ---- sampling for training -----------------------------------------------------------------------

struct SamplingConfig {
    int chains = 512;
    int samples = 2048;
    int burn_in_sweeps = 5;
    double sweep_factor = 1.4;          // sweep = factor * N * C_crit proposals between samples
    std::optional<double> j_critical;   // enables the C_crit factor
    SamplerMode mode = SamplerMode::ExactBound;
    int spacing = 10;                   // tokens
    int inversion_interval = -1;
    double eps_init = 0.2;
    double eps_inflation = 1.5;
    int screened_min_n = 100;           // below this size: exact full-forward ratios
    int abacus_min_n = 50;              // below this size: full-forward local energies

    void validate() const {
        require(chains >= 1, "sampler.chains must be >= 1");
        require(samples >= chains && samples % chains == 0, "sampler.samples must be a positive multiple of sampler.chains");
        require(burn_in_sweeps >= 0, "sampler.burn_in_sweeps must be >= 0");
        require(sweep_factor > 0.0, "sampler.sweep_factor must be > 0");
        require(spacing >= 1, "sampler.spacing must be >= 1");
    }
};

inline double critical_factor(double J, std::optional<double> jc) {
    if (!jc) return 1.0;
    return 4.0 * std::max(0.8 - std::abs(J - *jc), 0.0) + 1.0;
}

inline long sweep_proposals(const SamplingConfig& sc, const HamiltonianSpec& H) {
    return std::max(1L, std::lround(sc.sweep_factor * H.n * critical_factor(H.J, sc.j_critical)));
}

struct SampleBatch {
    std::vector<SpinConfig> configs;
    SamplerCounters counters;
    double acceptance = 0.0;
    double throughput = 0.0;
};

/// Persistent chains; each call draws samples/chains configurations per chain.
class ChainEnsemble {
public:
    ChainEnsemble(const HamiltonianSpec& H, const SamplingConfig& sc, uint64_t seed) : H_(H), sc_(sc), seed_(seed) {
        sc_.validate();
        std::mt19937_64 rng(splitmix64(seed ^ 0xC0FFEEull));
        for (int c = 0; c < sc_.chains; ++c)
            state_.push_back(H.conserves_sz() ? SpinConfig::random_zero_magnetization(H.n, rng) : SpinConfig::random(H.n, rng));
    }

    SamplerConfig chain_config() const {
        SamplerConfig c;
        c.mode = H_.n >= sc_.screened_min_n ? sc_.mode : SamplerMode::ExactRatio;
        c.moves = H_.conserves_sz() ? MoveKind::Exchange : MoveKind::Flip;
        c.spacing = sc_.spacing;
        c.inversion_interval = sc_.inversion_interval;
        c.eps_init = sc_.eps_init;
        c.eps_inflation = sc_.eps_inflation;
        return c;
    }

    SampleBatch draw(const PreparedModel& pm, int threads = 1) {
        const int per = sc_.samples / sc_.chains;
        const long sweep = sweep_proposals(sc_, H_);
        std::vector<SamplerCounters> cnt(static_cast<size_t>(sc_.chains));
        std::vector<std::vector<SpinConfig>> out(static_cast<size_t>(sc_.chains));
        std::vector<std::vector<double>> eps_state = eps_;
        eps_state.resize(static_cast<size_t>(sc_.chains));
        const long call = calls_++;
        parallel_for(sc_.chains, threads, [&](int c) {
            Chain ch(pm, state_[c], splitmix64(seed_ + 0x9E37ull * static_cast<uint64_t>(call) * 1000003ull + c),
                     chain_config());
            if (!eps_state[c].empty()) {
                ch.buffer().eps = eps_state[c];
                ch.buffer().observed.assign(eps_state[c].size(), 1);
            }
            if (call == 0) ch.advance(sc_.burn_in_sweeps * sweep);
            for (int k = 0; k < per; ++k) {
                ch.advance(sweep);
                out[c].push_back(ch.config());
            }
            state_[c] = ch.config();
            cnt[c] = ch.counters();
            eps_state[c] = ch.buffer().eps;
        });
        eps_ = std::move(eps_state);
        SampleBatch b;
        for (int c = 0; c < sc_.chains; ++c) {
            for (auto& s : out[c]) b.configs.push_back(std::move(s));
            const auto& k = cnt[c];
            b.counters.proposals += k.proposals;
            b.counters.accepts += k.accepts;
            b.counters.refreshes += k.refreshes;
            b.counters.cache_builds += k.cache_builds;
            b.counters.ambiguous += k.ambiguous;
            b.counters.freezes += k.freezes;
            b.counters.inversions += k.inversions;
            b.counters.inversion_accepts += k.inversion_accepts;
            b.counters.bound_violations += k.bound_violations;
            b.counters.passes += k.passes;
        }
        b.acceptance = b.counters.proposals ? static_cast<double>(b.counters.accepts) / b.counters.proposals : 0.0;
        b.throughput = b.counters.refreshes ? static_cast<double>(b.counters.proposals) / b.counters.refreshes : 0.0;
        return b;
    }

    const std::vector<SpinConfig>& states() const { return state_; }

private:
    HamiltonianSpec H_;
    SamplingConfig sc_;
    uint64_t seed_;
    long calls_ = 0;
    std::vector<SpinConfig> state_;
    std::vector<std::vector<double>> eps_;  // adaptive buffers survive across iterations
};

// ---- training loop -------------------------------------------------------------------------------

struct TrainConfig {
    HamiltonianSpec hamiltonian;
    ModelConfig model;
    SamplingConfig sampling;
    OptimizerConfig optimizer;
    uint64_t seed = 1;
    int threads = 1;
    double init_readout_scale = 0.1;
    bool marshall = true;  // applied only for Hamiltonians with conserved S^z

    void validate() const {
        hamiltonian.validate();
        model.validate();
        sampling.validate();
        optimizer.validate();
        require(threads >= 1, "threads must be >= 1");
        require(hamiltonian.n % model.token_size == 0, "hamiltonian.n must be a multiple of model.token_size");
    }
    bool uses_marshall() const { return marshall && hamiltonian.conserves_sz(); }
};

struct MetricsRow {
    int iter = 0;
    EnergyEstimate energy;
    double acceptance = 0.0, throughput = 0.0, lr = 0.0, shift = 0.0, wall_ms = 0.0;
    int cg_iterations = 0;
    double fs_length = 0.0;
    double measured_step = 0.0;
    int backtracks = 0;
};

/// Measured size of a step on the current samples: sqrt(Var_sigma[log Psi_new - log Psi_old]).
inline double measured_step(const PreparedModel& next, const std::vector<SpinConfig>& cfgs, const std::vector<cplx>& log_old,
                            int threads) {
    std::vector<cplx> d(cfgs.size());
    parallel_for(static_cast<int>(cfgs.size()), threads, [&](int i) { d[i] = forward(next, cfgs[i]).log_psi - log_old[i]; });
    cplx m = 0.0;
    for (auto x : d) m += x;
    m /= static_cast<double>(d.size());
    double v = 0.0;
    for (auto x : d) v += std::norm(x - m);
    return std::sqrt(v / static_cast<double>(d.size()));
}

/// theta + delta, halving delta while the updated mixers are unstable or, with max_measured > 0,
/// while the measured step on the samples exceeds max_measured.
inline Model apply_step(const Model& m, const Eigen::VectorXd& delta, int n, int max_backtracks, int& backtracks,
                        const std::vector<SpinConfig>* cfgs = nullptr, const std::vector<cplx>* log_old = nullptr,
                        double max_measured = 0.0, int threads = 1, double* measured = nullptr) {
    double scale = 1.0;
    for (backtracks = 0; backtracks <= max_backtracks; ++backtracks, scale *= 0.5) {
        Model next = m;
        for (long p = 0; p < delta.size(); ++p) next.theta[p] += scale * delta(p);
        next.touch();
        try {
            PreparedModel check(next, n);
            if (max_measured > 0.0 && cfgs) {
                const double d = measured_step(check, *cfgs, *log_old, threads);
                if (measured) *measured = d;
                if (!(d <= max_measured)) continue;
            }
            return next;
        } catch (const NumericalError&) {
        }
    }
    throw NumericalError("update rejected after " + std::to_string(max_backtracks) + " halvings");
}

struct TrainResult {
    Model model;          // last parameters with a finite energy
    std::vector<MetricsRow> rows;
    bool aborted = false;
    std::string abort_reason;
};

inline Model initial_model(const TrainConfig& tc) {
    Model m = init_model(tc.model, tc.seed, tc.init_readout_scale);
    std::mt19937_64 rng(splitmix64(tc.seed + 77));
    std::vector<SpinConfig> batch;
    for (int i = 0; i < 256; ++i)
        batch.push_back(tc.hamiltonian.conserves_sz() ? SpinConfig::random_zero_magnetization(tc.hamiltonian.n, rng)
                                                      : SpinConfig::random(tc.hamiltonian.n, rng));
    actnorm_init(m, batch, tc.hamiltonian.n);
    return m;
}

/// Local energies and log-derivatives for a batch of samples.
struct BatchEvaluation {
    std::vector<cplx> eloc;
    std::vector<cplx> log_psi;
    Eigen::MatrixXd Ore, Oim;
};

inline BatchEvaluation evaluate_batch(const TrainConfig& tc, const PreparedModel& pm, const std::vector<SpinConfig>& cfgs,
                                      bool need_grad) {
    EstimatorOptions eo;
    eo.use_abacus = tc.hamiltonian.n >= tc.sampling.abacus_min_n;
    eo.marshall = tc.uses_marshall();
    const LocalEstimator est(tc.hamiltonian, pm, eo);
    const int ns = static_cast<int>(cfgs.size());
    const long P = static_cast<long>(pm.model().theta.size());
    BatchEvaluation b;
    b.eloc.resize(static_cast<size_t>(ns));
    b.log_psi.resize(static_cast<size_t>(ns));
    const bool cplx_out = pm.cfg().complex_readout;
    if (need_grad) {
        b.Ore.resize(ns, P);
        if (cplx_out) b.Oim.resize(ns, P);
    }
    parallel_for(ns, tc.threads, [&](int i) {
        b.eloc[i] = est(cfgs[i]);
        if (need_grad) {
            const auto tr = forward(pm, cfgs[i]);
            b.log_psi[i] = tr.log_psi;
            const auto g = grad_log_amplitude(pm, tr);
            b.Ore.row(i) = Eigen::Map<const Eigen::RowVectorXd>(g.re.data(), P);
            if (cplx_out) b.Oim.row(i) = Eigen::Map<const Eigen::RowVectorXd>(g.im.data(), P);
        }
    });
    return b;
}

using IterationCallback = std::function<void(const MetricsRow&, const Model&)>;

/// rows[k] is measured with the parameters after k updates, so there are iterations + 1 rows.
inline TrainResult train(const TrainConfig& tc, Model model, const IterationCallback& on_row = {}) {
    tc.validate();
    if (model.cfg.layers != tc.model.layers || model.cfg.d != tc.model.d)
        throw DomainError("train: initial model does not match the model config");
    const int n = tc.hamiltonian.n;
    SRState sr(tc.optimizer, n);
    ChainEnsemble chains(tc.hamiltonian, tc.sampling, tc.seed);
    TrainResult res;
    res.model = model;
    for (int it = 0; it <= tc.optimizer.iterations; ++it) {
        const auto t0 = std::chrono::steady_clock::now();
        const bool last = it == tc.optimizer.iterations;
        MetricsRow row;
        row.iter = it;
        try {
            PreparedModel pm(model, n);
            const auto batch = chains.draw(pm, tc.threads);
            auto ev = evaluate_batch(tc, pm, batch.configs, !last);
            row.energy = estimate_energy(ev.eloc, n);
            if (!std::isfinite(row.energy.mean) || !std::isfinite(row.energy.variance))
                throw NumericalError("non-finite energy at iteration " + std::to_string(it));
            row.acceptance = batch.acceptance;
            row.throughput = batch.throughput;
            res.model = model;
            if (!last) {
                row.lr = sr.lr(it);
                row.shift = sr.shift(it);
                const SRSystem sys = make_sr_system(ev.Ore, ev.Oim, ev.eloc);
                auto sol = sr_update(sys, row.shift, row.lr, tc.optimizer.solver);
                clip_step(sys, sol, tc.optimizer.max_step);
                row.cg_iterations = sol.cg_iterations;
                row.fs_length = sol.fs_length;
                model = apply_step(model, sol.delta, n, tc.optimizer.max_backtracks, row.backtracks, &batch.configs,
                                   &ev.log_psi, tc.optimizer.max_measured_step, tc.threads, &row.measured_step);
            }
        } catch (const NumericalError& e) {
            res.aborted = true;
            res.abort_reason = e.what();
            return res;
        }
        row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        res.rows.push_back(row);
        if (on_row) on_row(row, res.model);
    }
    return res;
}

// ---- enumeration and observables ------------------------------------------------------------------

inline constexpr int kMaxEnumerationSites = 20;

/// Normalized amplitudes over the full 2^n basis. With sector_only, configurations outside
/// S^z = 0 are set to zero; with marshall the sign rule is applied.
inline std::vector<cplx> amplitude_table(const PreparedModel& pm, bool sector_only = false, bool marshall = false) {
    const int n = pm.n_spins();
    if (n > kMaxEnumerationSites) throw ResourceError("amplitude_table: n too large to enumerate");
    const uint64_t dim = uint64_t(1) << n;
    std::vector<cplx> lp(dim, cplx(-std::numeric_limits<double>::infinity(), 0.0));
    double mx = -std::numeric_limits<double>::infinity();
    for (uint64_t b = 0; b < dim; ++b) {
        const SpinConfig s = SpinConfig::from_index(b, n);
        if (sector_only && s.magnetization() != 0) continue;
        lp[b] = forward(pm, s).log_psi;
        mx = std::max(mx, lp[b].real());
    }
    std::vector<cplx> psi(dim, 0.0);
    double norm = 0.0;
    for (uint64_t b = 0; b < dim; ++b) {
        if (!std::isfinite(lp[b].real())) continue;
        psi[b] = std::exp(lp[b] - mx);
        if (marshall) psi[b] *= static_cast<double>(marshall_sign(SpinConfig::from_index(b, n)));
        norm += std::norm(psi[b]);
    }
    for (auto& v : psi) v /= std::sqrt(norm);
    return psi;
}

/// |Psi|^2 over all 2^n configurations, normalized.
inline std::vector<double> enumerate_distribution(const PreparedModel& pm, int max_sites = 14) {
    if (pm.n_spins() > max_sites) throw ResourceError("enumerate_distribution: n exceeds the enumeration guard");
    const auto psi = amplitude_table(pm);
    std::vector<double> p(psi.size());
    for (size_t i = 0; i < psi.size(); ++i) p[i] = std::norm(psi[i]);
    return p;
}

/// E_loc(sigma) for an explicit amplitude table (signs included in the table).
inline cplx local_energy_table(const HamiltonianSpec& H, const std::vector<cplx>& psi, const SpinConfig& s) {
    const cplx p0 = psi.at(s.to_index());
    if (std::abs(p0) < 1e-300) throw NumericalError("local_energy_table: amplitude vanishes");
    cplx e = 0.0;
    for (const auto& c : connected_elements(H, s)) {
        if (c.count == 0) {
            e += c.amplitude;
            continue;
        }
        SpinConfig t = s;
        for (int k = 0; k < c.count; ++k) t.flip(c.sites[k]);
        e += c.amplitude * psi.at(t.to_index()) / p0;
    }
    return e;
}

/// <psi|H|psi> for a normalized table.
inline double table_energy(const HamiltonianSpec& H, const std::vector<cplx>& psi) {
    std::vector<double> re(psi.size()), im(psi.size());
    for (size_t i = 0; i < psi.size(); ++i) {
        re[i] = psi[i].real();
        im[i] = psi[i].imag();
    }
    const auto hr = apply_hamiltonian(H, re), hi = apply_hamiltonian(H, im);
    double e = 0.0;
    for (size_t i = 0; i < psi.size(); ++i) e += re[i] * hr[i] + im[i] * hi[i];
    return e;
}

struct Observables {
    double m2 = 0.0, m2_err = 0.0;
    std::vector<double> corr, corr_err;  // C(r) = (1/N) sum_i <s_i s_{i+r}>, r = 0..N-1
};

inline Observables measure_observables(const std::vector<SpinConfig>& samples) {
    require(!samples.empty(), "measure_observables: no samples");
    const int n = samples.front().n();
    const double ns = static_cast<double>(samples.size());
    Observables o;
    o.corr.assign(static_cast<size_t>(n), 0.0);
    o.corr_err.assign(static_cast<size_t>(n), 0.0);
    std::vector<double> c2(static_cast<size_t>(n), 0.0);
    double s2 = 0.0;
    for (const auto& s : samples) {
        const double m = s.magnetization() / static_cast<double>(n);
        o.m2 += m * m;
        s2 += m * m * m * m;
        for (int r = 0; r < n; ++r) {
            double c = 0.0;
            for (int i = 0; i < n; ++i) c += s[i] * s[wrap(i + r, n)];
            c /= n;
            o.corr[r] += c;
            c2[r] += c * c;
        }
    }
    o.m2 /= ns;
    o.m2_err = std::sqrt(std::max(0.0, s2 / ns - o.m2 * o.m2) / ns);
    for (int r = 0; r < n; ++r) {
        o.corr[r] /= ns;
        o.corr_err[r] = std::sqrt(std::max(0.0, c2[r] / ns - o.corr[r] * o.corr[r]) / ns);
    }
    return o;
}

/// Exact observables from a probability table.
inline Observables exact_observables(const std::vector<double>& p, int n) {
    Observables o;
    o.corr.assign(static_cast<size_t>(n), 0.0);
    o.corr_err.assign(static_cast<size_t>(n), 0.0);
    for (uint64_t b = 0; b < p.size(); ++b) {
        if (p[b] == 0.0) continue;
        const SpinConfig s = SpinConfig::from_index(b, n);
        const double m = s.magnetization() / static_cast<double>(n);
        o.m2 += p[b] * m * m;
        for (int r = 0; r < n; ++r) {
            double c = 0.0;
            for (int i = 0; i < n; ++i) c += s[i] * s[wrap(i + r, n)];
            o.corr[r] += p[b] * c / n;
        }
    }
    return o;
}

} // namespace dyson
