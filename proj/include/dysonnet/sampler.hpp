#pragma once

/** @file sampler.hpp
    @brief Screened typewriter Metropolis sampler.

    A pass proposes one move per active block (even blocks, then odd blocks) against one
    frozen background. Ratios come from independent-scattering sums of exact single-move
    updates; the screened rule turns approximate ratios into exact Metropolis decisions.
*/

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "abacus.hpp"
#include "errors.hpp"
#include "network.hpp"
#include "spin_systems.hpp"

namespace dyson {

enum class SamplerMode { ExactBound, AdaptiveBuffer, ExactRatio };
enum class MoveKind { Flip, Exchange };
enum class Decision { FastAccept, FastReject, Ambiguous };

inline std::string to_string(SamplerMode m) {
    switch (m) {
    case SamplerMode::ExactBound: return "exact_bound";
    case SamplerMode::AdaptiveBuffer: return "adaptive_buffer";
    case SamplerMode::ExactRatio: return "exact_ratio";
    }
    return "?";
}

inline SamplerMode sampler_mode_from_string(const std::string& s) {
    if (s == "exact_bound") return SamplerMode::ExactBound;
    if (s == "adaptive_buffer") return SamplerMode::AdaptiveBuffer;
    if (s == "exact_ratio") return SamplerMode::ExactRatio;
    throw DomainError("unknown sampler mode '" + s + "' (expected exact_bound, adaptive_buffer or exact_ratio)");
}

// ---- acceptance rule and bounds --------------------------------------------------------

/// fast_accept iff u < min(1, R - eps); fast_reject iff u > min(1, R + eps).
inline Decision screened_accept(double u, double ratio_approx, double eps) {
    if (u < std::min(1.0, ratio_approx - eps)) return Decision::FastAccept;
    if (u > std::min(1.0, ratio_approx + eps)) return Decision::FastReject;
    return Decision::Ambiguous;
}

/// Same rule with explicit (possibly asymmetric) bounds lo <= R <= hi.
inline Decision screened_accept_bounds(double u, double lo, double hi) {
    if (u < std::min(1.0, lo)) return Decision::FastAccept;
    if (u > std::min(1.0, hi)) return Decision::FastReject;
    return Decision::Ambiguous;
}

/// (e^{|dz|} - 1) f(z_sigma) / f(z0) for the sum-cosh readout.
inline double error_bound(double delta_z_norm, double f_sigma, double f0, Readout readout = Readout::SumCosh) {
    if (readout != Readout::SumCosh) throw DomainError("error_bound: only derived for the sum_cosh readout");
    require(delta_z_norm >= 0.0 && f0 > 0.0, "error_bound: need |dz| >= 0 and f(z0) > 0");
    return std::expm1(delta_z_norm) * f_sigma / f0;
}

struct EpsilonBuffer {
    std::vector<double> eps;
    std::vector<char> observed;
    double init_value = 0.2;
    double inflation = 1.5;
    int burn_in_sweeps = 5;

    double at(int k) {
        grow(k);
        return eps[static_cast<size_t>(k)];
    }
    void update(int k, double observed_err) {
        grow(k);
        auto& e = eps[static_cast<size_t>(k)];
        if (!observed[static_cast<size_t>(k)]) {
            e = observed_err;
            observed[static_cast<size_t>(k)] = 1;
        } else {
            e = std::max(e, inflation * observed_err);
        }
    }

private:
    void grow(int k) {
        require(k >= 0, "EpsilonBuffer: negative index");
        if (static_cast<size_t>(k) >= eps.size()) {
            eps.resize(static_cast<size_t>(k) + 1, init_value);
            observed.resize(static_cast<size_t>(k) + 1, 0);
        }
    }
};

inline void adaptive_eps_update(EpsilonBuffer& buf, int k, double observed_err) { buf.update(k, observed_err); }

// ---- hazard model ------------------------------------------------------------------------

struct HazardModel {
    double p0 = 0.0;
    double gamma = 1.0;
    int K = 1;

    void validate() const {
        require(p0 >= 0.0 && gamma >= 0.0 && K >= 1, "HazardModel: need p0 >= 0, gamma >= 0, K >= 1");
    }
    double hazard(int k) const { return p0 * std::pow(static_cast<double>(k), gamma); }

    /// Tail sum of the survival products.
    double expected_moves() const {
        validate();
        double total = 0.0, surv = 1.0;
        for (int k = 1; k <= K; ++k) {
            const double f = 1.0 - hazard(k);
            if (f <= 0.0) break;
            surv *= f;
            total += surv;
        }
        return total;
    }
    /// Cumulative-hazard length ((gamma + 1) / p0)^{1/(gamma + 1)}.
    double hazard_length() const {
        return p0 > 0.0 ? std::pow((gamma + 1.0) / p0, 1.0 / (gamma + 1.0)) : std::numeric_limits<double>::infinity();
    }
    /// Optimal spacing exponent beta_c for a power-law tail with exponent alpha.
    static double beta_c(double alpha) {
        require(alpha > 0.0, "beta_c: alpha must be > 0");
        return alpha >= 1.0 ? 2.0 / (2.0 + alpha) : (3.0 - alpha) / 3.0;
    }
};

struct FreezeSimulation {
    double mean = 0.0, stderr_ = 0.0;
};

/// Direct simulation of the freezing process: at step k the chain stops with probability p_k.
inline FreezeSimulation simulate_freezing(const HazardModel& hm, int trials, uint64_t seed) {
    hm.validate();
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    double s = 0.0, s2 = 0.0;
    for (int t = 0; t < trials; ++t) {
        int m = 0;
        for (int k = 1; k <= hm.K; ++k) {
            if (U(rng) < hm.hazard(k)) break;
            ++m;
        }
        s += m;
        s2 += static_cast<double>(m) * m;
    }
    FreezeSimulation r;
    r.mean = s / trials;
    const double var = std::max(0.0, s2 / trials - r.mean * r.mean);
    r.stderr_ = std::sqrt(var / trials);
    return r;
}

// ---- rigorous independent-scattering bound -------------------------------------------------

/// Envelope constants of the frozen background, measured when the cache is built.
///   gbar^l(r)   = max_c |g^l_c(r)|
///   beta^l      = max_j ||D0^l_j||_inf
///   H^(l,m)     = gbar^l * (beta^{l-1} gbar^{l-1}) * ... * (beta^{m+1} gbar^{m+1})   (circular)
/// A flip's full perturbation field obeys |G^l dx^l_j|(p) <= sum_m sum_o |q^m_j(o)| H^(l,m)(p - c_j - o).
class IsaBound {
public:
    explicit IsaBound(const LinkCache& cache) : cache_(&cache) {
        const PreparedModel& pm = cache.prepared();
        const auto& cfg = pm.cfg();
        L_ = cfg.layers;
        n_ = pm.n_tok();
        gbar_.assign(static_cast<size_t>(L_), std::vector<double>(static_cast<size_t>(n_), 0.0));
        beta_.assign(static_cast<size_t>(L_), 0.0);
        gsum_.assign(static_cast<size_t>(L_), 0.0);
        for (int l = 1; l <= L_; ++l) {
            for (const auto& k : pm.kernels(l - 1))
                for (int r = 0; r < n_; ++r) gbar_[l - 1][r] = std::max(gbar_[l - 1][r], std::abs(k.g[r]));
            for (double v : gbar_[l - 1]) gsum_[l - 1] += v;
            const LayerView lv = layer_view(pm.model(), l - 1);
            for (int p = 0; p < n_; ++p)
                beta_[l - 1] = std::max(beta_[l - 1], gate_norm(lv, cache.baseline().chi[l - 1].row(p)));
        }
        H_.assign(static_cast<size_t>(L_ * L_), {});
        for (int l = 1; l <= L_; ++l) {
            std::vector<double> chain = gbar_[l - 1];
            H_[idx(l, l - 1)] = chain;
            for (int m = l - 2; m >= 0; --m) {
                std::vector<double> next(static_cast<size_t>(n_), 0.0);
                const auto& g = gbar_[m];  // layer m + 1
                const double b = beta_[m];
                for (int a = 0; a < n_; ++a) {
                    if (chain[a] == 0.0) continue;
                    for (int r = 0; r < n_; ++r) next[wrap(a + r, n_)] += chain[a] * b * g[r];
                }
                chain = std::move(next);
                H_[idx(l, m)] = chain;
            }
        }
        const int D = cfg.d_out, d = cfg.d;
        wnorm_ = 0.0;
        for (int o = 0; o < D; ++o) {
            double row = 0.0;
            for (int c = 0; c < d; ++c) row += std::abs(cache.output_map()[o * d + c]);
            wnorm_ = std::max(wnorm_, row);
        }
    }

    /// Cross-term weight of flip j's field on flip k's gate window at layer l.
    double pair_term(int l, const FlipDetail& k, const FlipDetail& j) const {
        const int lo = cache_->window_lo(l), Wl = cache_->window_size(l);
        double acc = 0.0;
        for (int i = 0; i < Wl; ++i) {
            const double dd = k.dD_norm[l - 1][i];
            if (dd == 0.0) continue;
            const int p = k.anchor + lo + i;
            double env = 0.0;
            for (int m = 0; m < l; ++m) {
                const auto& H = H_[idx(l, m)];
                const int lom = cache_->window_lo(m);
                for (size_t o = 0; o < j.q_abs[m].size(); ++o) {
                    const double qa = j.q_abs[m][o];
                    if (qa != 0.0) env += qa * H[wrap(p - j.anchor - lom - static_cast<int>(o), n_)];
                }
            }
            acc += dd * env;
        }
        return acc;
    }

    /// Bound on ||Omega_ISA - Omega||_inf given per-layer cross sums C^l and the largest
    /// perturbed-gate norms of the flips involved.
    double delta_z(const std::vector<double>& cross, const std::vector<double>& gate_max) const {
        double mass = 0.0, pooled = 0.0;
        for (int l = 1; l <= L_; ++l) {
            const double b = std::max(beta_[l - 1], gate_max[l - 1]);
            mass = b * gsum_[l - 1] * mass + cross[l - 1];
            pooled += mass;
        }
        return wnorm_ * pooled / static_cast<double>(n_);
    }

    /// delta_z for a whole set of flips, each measured against the same background.
    double delta_z_for(const std::vector<FlipDetail>& flips) const {
        std::vector<double> cross(static_cast<size_t>(L_), 0.0), gmax(static_cast<size_t>(L_), 0.0);
        for (int l = 1; l <= L_; ++l)
            for (size_t a = 0; a < flips.size(); ++a) {
                gmax[l - 1] = std::max(gmax[l - 1], flips[a].gate_new_max[l - 1]);
                for (size_t b = 0; b < flips.size(); ++b)
                    if (a != b) cross[l - 1] += pair_term(l, flips[a], flips[b]);
            }
        return delta_z(cross, gmax);
    }

    int layers() const { return L_; }

private:
    size_t idx(int l, int m) const { return static_cast<size_t>((l - 1) * L_ + m); }

    const LinkCache* cache_;
    int L_ = 0, n_ = 0;
    std::vector<std::vector<double>> gbar_;
    std::vector<double> beta_, gsum_;
    std::vector<std::vector<double>> H_;
    double wnorm_ = 0.0;
};

/// Relative amplitude error factor: |Psi - Psi_ISA| <= kappa(dz) |Psi_ISA| for the sum-cosh
/// readout, using f(z) <= e^{|dz|} f(z_ISA) in place of the unknown exact f(z).
inline double amplitude_error_factor(double dz) { return std::expm1(dz) * std::exp(dz); }

// ---- typewriter blocks ----------------------------------------------------------------------

struct BlockLayout {
    std::vector<int> start;  // first token of each block
    std::vector<int> width;  // tokens
};

/// Blocks of `spacing` tokens; an odd count > 1 is reduced by one so even/odd alternate
/// around the ring, and the last block absorbs the remainder.
inline BlockLayout make_blocks(int n_tok, int spacing) {
    require(spacing >= 1, "typewriter: spacing must be >= 1");
    int nb = std::max(1, n_tok / spacing);
    if (nb > 1 && nb % 2 == 1) --nb;
    BlockLayout b;
    for (int i = 0; i < nb; ++i) {
        b.start.push_back(i * spacing);
        b.width.push_back(i + 1 < nb ? spacing : n_tok - i * spacing);
    }
    return b;
}

// ---- chain -----------------------------------------------------------------------------------

struct SamplerConfig {
    SamplerMode mode = SamplerMode::ExactBound;
    MoveKind moves = MoveKind::Flip;
    int spacing = 10;                 // tokens
    int inversion_interval = -1;      // proposals; -1 -> ceil(N / (2 w_eff + 1)); 0 disables
    double eps_init = 0.2;
    double eps_inflation = 1.5;
    double tie_tolerance = 1e-10;     // relative widening of exact bounds (rounding of the fast path)
};

struct SamplerCounters {
    long proposals = 0;       // local moves
    long accepts = 0;
    long refreshes = 0;       // logical background refreshes (pass starts + ambiguous hits)
    long cache_builds = 0;
    long ambiguous = 0;
    long freezes = 0;         // passes cut short by at least one ambiguous hit
    long inversions = 0;
    long inversion_accepts = 0;
    long bound_violations = 0;
    long passes = 0;

    long rejects() const { return proposals - accepts; }
};

struct ThroughputStats {
    double measured = 0.0;   // proposals per refresh
    double ideal = 0.0;      // active blocks per pass
    double ratio = 0.0;
};

struct TraceEvent {
    std::vector<int> sites;  // empty for a global inversion
    double u = 0.0;
    bool accepted = false;
    bool global = false;
    Decision decision = Decision::FastReject;
};

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

class Chain {
public:
    Chain(const PreparedModel& pm, SpinConfig start, uint64_t seed, SamplerConfig cfg = {})
        : pm_(&pm), cfg_(cfg), sigma_(std::move(start)), rng_(splitmix64(seed)) {
        if (sigma_.n() != pm.n_spins()) throw DomainError("sampler: start configuration has the wrong size");
        const auto& mc = pm.cfg();
        margin_ = cfg_.moves == MoveKind::Exchange ? 1 : 0;
        hw_ = abacus_half_width(mc, margin_);
        if (cfg_.mode != SamplerMode::ExactRatio) {
            if (cfg_.spacing < hw_) throw DomainError("sampler: spacing must be >= w_eff tokens");
            const bool bound_ok = mc.readout == Readout::SumCosh && !mc.complex_readout;
            const bool fits = abacus_applicable(mc, pm.n_tok(), margin_);
            const bool separated = cfg_.spacing >= 2 * mc.layers * mc.kernel_half_width + margin_;
            if (!fits) fallback("slice does not fit the chain");
            else if (cfg_.mode == SamplerMode::ExactBound && !bound_ok) fallback("bound needs a real sum_cosh readout");
            else if (cfg_.mode == SamplerMode::ExactBound && !separated)
                fallback("spacing below 2 L w_k + margin: gate supports may overlap");
        }
        blocks_ = make_blocks(pm.n_tok(), cfg_.spacing);
        if (cfg_.inversion_interval < 0) {
            const int N = pm.n_spins();
            cfg_.inversion_interval = (N + 2 * hw_) / (2 * hw_ + 1);
        }
        buffer_.init_value = cfg_.eps_init;
        buffer_.inflation = cfg_.eps_inflation;
        log_psi_ = forward(pm, sigma_).log_psi;
    }

    /// One typewriter sweep: a pass over even blocks, then one over odd blocks.
    void sweep() {
        for (int parity = 0; parity < 2; ++parity) {
            if (cfg_.mode == SamplerMode::ExactRatio) exact_pass(parity);
            else screened_pass(parity);
        }
    }

    /// Exchange-move chains must start in a fixed magnetization sector; this checks it.
    const SpinConfig& config() const { return sigma_; }
    cplx log_psi() const { return log_psi_; }
    const SamplerCounters& counters() const { return counters_; }
    SamplerMode mode() const { return cfg_.mode; }
    const std::string& fallback_reason() const { return fallback_reason_; }
    EpsilonBuffer& buffer() { return buffer_; }
    const BlockLayout& blocks() const { return blocks_; }
    /// Local proposals made by one sweep().
    int proposals_per_sweep() const { return static_cast<int>(blocks_.start.size()); }
    /// Sweeps until at least `proposals` local moves have been proposed.
    void advance(long proposals) {
        const long per = proposals_per_sweep();
        for (long k = 0; k < (proposals + per - 1) / per; ++k) sweep();
    }
    void set_trace(std::function<void(const TraceEvent&)> f) { trace_ = std::move(f); }

    ThroughputStats throughput() const {
        ThroughputStats t;
        if (counters_.refreshes == 0) throw DomainError("throughput: no refresh recorded");
        t.measured = static_cast<double>(counters_.proposals) / static_cast<double>(counters_.refreshes);
        t.ideal = static_cast<double>(blocks_.start.size()) / 2.0;
        if (blocks_.start.size() == 1) t.ideal = 1.0;
        t.ratio = t.measured / t.ideal;
        return t;
    }

private:
    void fallback(const std::string& why) {
        cfg_.mode = SamplerMode::ExactRatio;
        fallback_reason_ = why;
    }

    double uniform() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }

    std::vector<int> propose(int block) {
        const int t = pm_->cfg().token_size, N = sigma_.n();
        const int first = blocks_.start[block] * t, count = blocks_.width[block] * t;
        const int i = first + static_cast<int>(rng_() % static_cast<uint64_t>(count));
        if (cfg_.moves == MoveKind::Flip) return {i};
        const int j = wrap(i + 1 + static_cast<int>(rng_() % 2u), N);
        return {i, j};
    }
    bool is_null(const std::vector<int>& sites) const {
        return sites.size() == 2 && sigma_[sites[0]] == sigma_[sites[1]];
    }
    void emit(const std::vector<int>& sites, double u, bool acc, bool global, Decision d) {
        if (trace_) trace_(TraceEvent{sites, u, acc, global, d});
    }

    // An inversion falls due after inversion_interval local proposals and is attempted at the next
    // pass boundary, where the background is refreshed anyway.
    void count_for_inversion() {
        if (cfg_.inversion_interval > 0 && ++since_inversion_ >= cfg_.inversion_interval) {
            since_inversion_ = 0;
            inversion_pending_ = true;
        }
    }
    void maybe_invert() {
        if (!inversion_pending_) return;
        inversion_pending_ = false;
        global_inversion();
    }

    /// Global inversion, always with full forwards. Returns true if accepted.
    bool global_inversion() {
        SpinConfig flipped = sigma_;
        flipped.invert();
        const cplx lp = forward(*pm_, flipped).log_psi;
        const double R = std::exp(2.0 * (lp - log_psi_).real());
        const double u = uniform();
        const bool acc = u < std::min(1.0, R);
        ++counters_.inversions;
        if (acc) {
            sigma_ = std::move(flipped);
            log_psi_ = lp;
            ++counters_.inversion_accepts;
        }
        emit({}, u, acc, true, acc ? Decision::FastAccept : Decision::FastReject);
        return acc;
    }

    void exact_pass(int parity) {
        ++counters_.passes;
        ++counters_.refreshes;
        maybe_invert();
        for (size_t b = parity; b < blocks_.start.size(); b += 2) {
            const auto sites = propose(static_cast<int>(b));
            const double u = uniform();
            ++counters_.proposals;
            count_for_inversion();
            if (is_null(sites)) {
                emit(sites, u, false, false, Decision::FastReject);
                continue;
            }
            SpinConfig next = sigma_;
            for (int s : sites) next.flip(s);
            const cplx lp = forward(*pm_, next).log_psi;
            const double R = std::exp(2.0 * (lp - log_psi_).real());
            const bool acc = u < std::min(1.0, R);
            if (acc) {
                sigma_ = std::move(next);
                log_psi_ = lp;
                ++counters_.accepts;
            }
            emit(sites, u, acc, false, acc ? Decision::FastAccept : Decision::FastReject);
        }
    }

    // Background state for the screened pass.
    void refresh() {
        ++counters_.refreshes;
        if (!cache_ || cache_->fingerprint() != cache_fingerprint(sigma_, pm_->version())) {
            AbacusOptions opt;
            opt.margin = margin_;
            cache_ = std::make_unique<LinkCache>(*pm_, sigma_, opt);
            ++counters_.cache_builds;
            if (cfg_.mode == SamplerMode::ExactBound) bound_ = std::make_unique<IsaBound>(*cache_);
        }
        log_psi_ = cache_->log_psi0();
        accepted_.clear();
        dOmega_.assign(cache_->omega0().size(), 0.0);
        cross_.assign(static_cast<size_t>(pm_->cfg().layers), 0.0);
        gate_max_.assign(static_cast<size_t>(pm_->cfg().layers), 0.0);
        dz_current_ = 0.0;
    }

    cplx log_f(const std::vector<cplx>& d1, const std::vector<cplx>* d2 = nullptr) const {
        std::vector<cplx> om = cache_->omega0();
        for (size_t o = 0; o < om.size(); ++o) om[o] += d1[o] + (d2 ? (*d2)[o] : 0.0);
        return log_amplitude(pm_->cfg().readout, om);
    }

    void screened_pass(int parity) {
        ++counters_.passes;
        maybe_invert();  // log_psi_ is exact between passes
        refresh();
        bool froze = false;
        for (size_t b = parity; b < blocks_.start.size(); b += 2) {
            const auto sites = propose(static_cast<int>(b));
            const double u = uniform();
            ++counters_.proposals;
            count_for_inversion();
            if (is_null(sites)) {
                emit(sites, u, false, false, Decision::FastReject);
                continue;
            }
            FlipDetail det;
            const bool want_detail = cfg_.mode == SamplerMode::ExactBound && !accepted_.empty();
            std::vector<cplx> dk = cache_->omega_from_pool_delta(cache_->pool_delta(sites, want_detail ? &det : nullptr));
            for (size_t o = 0; o < dk.size(); ++o) dk[o] -= cache_->omega0()[o];
            const cplx lf_cur = log_f(dOmega_);
            const cplx lf_new = log_f(dOmega_, &dk);
            const double Rt = std::exp(2.0 * (lf_new - lf_cur).real());

            Decision dec;
            double lo = Rt, hi = Rt;
            std::vector<double> cross_new;
            std::vector<double> gate_new;
            if (accepted_.empty()) {
                // single move against the background: the ratio is exact up to rounding
                lo = Rt * (1.0 - cfg_.tie_tolerance);
                hi = Rt * (1.0 + cfg_.tie_tolerance);
                dec = screened_accept_bounds(u, lo, hi);
            } else if (cfg_.mode == SamplerMode::ExactBound) {
                cross_new = cross_;
                gate_new = gate_max_;
                for (int l = 1; l <= bound_->layers(); ++l) {
                    for (const auto& a : accepted_)
                        cross_new[l - 1] += bound_->pair_term(l, det, a) + bound_->pair_term(l, a, det);
                    gate_new[l - 1] = std::max(gate_new[l - 1], det.gate_new_max[l - 1]);
                }
                const double ka = amplitude_error_factor(bound_->delta_z(cross_new, gate_new));
                const double kb = amplitude_error_factor(dz_current_);
                lo = ka >= 1.0 ? 0.0 : Rt * std::pow((1.0 - ka) / (1.0 + kb), 2);
                hi = kb >= 1.0 ? std::numeric_limits<double>::infinity() : Rt * std::pow((1.0 + ka) / (1.0 - kb), 2);
                lo *= 1.0 - cfg_.tie_tolerance;
                hi *= 1.0 + cfg_.tie_tolerance;
                dec = screened_accept_bounds(u, lo, hi);
            } else {
                dec = screened_accept(u, Rt, buffer_.at(static_cast<int>(accepted_.size())));
            }

            bool acc = dec == Decision::FastAccept;
            bool refreshed = false;
            if (dec == Decision::Ambiguous) {
                ++counters_.ambiguous;
                froze = true;
                const int k_before = static_cast<int>(accepted_.size());
                refresh();
                refreshed = true;
                std::vector<cplx> d1 = cache_->delta_omega(sites);
                const double R = std::exp(2.0 * (log_f(d1) - cache_->log_psi0()).real());
                if (k_before > 0) {
                    if (cfg_.mode == SamplerMode::AdaptiveBuffer) buffer_.update(k_before, std::abs(Rt - R));
                    else if (R < lo || R > hi) ++counters_.bound_violations;
                }
                acc = u < std::min(1.0, R);
                dk = std::move(d1);
            }
            if (acc) {
                for (int s : sites) sigma_.flip(s);
                ++counters_.accepts;
                if (refreshed || accepted_.empty()) {
                    FlipDetail d0;
                    if (cfg_.mode == SamplerMode::ExactBound) cache_->pool_delta(sites, &d0);
                    accepted_.push_back(std::move(d0));
                    for (size_t l = 0; l < gate_max_.size(); ++l)
                        gate_max_[l] = cfg_.mode == SamplerMode::ExactBound ? accepted_.back().gate_new_max[l] : 0.0;
                    dz_current_ = 0.0;
                } else {
                    accepted_.push_back(std::move(det));
                    if (cfg_.mode == SamplerMode::ExactBound) {
                        cross_ = std::move(cross_new);
                        gate_max_ = std::move(gate_new);
                        dz_current_ = bound_->delta_z(cross_, gate_max_);
                    }
                }
                for (size_t o = 0; o < dOmega_.size(); ++o) dOmega_[o] += dk[o];
                log_psi_ = log_f(dOmega_);
            }
            emit(sites, u, acc, false, dec);
        }
        if (froze) ++counters_.freezes;
        // leave log_psi_ exact for callers
        if (!accepted_.empty() && accepted_.size() > 1) log_psi_ = forward(*pm_, sigma_).log_psi;
    }

    const PreparedModel* pm_;
    SamplerConfig cfg_;
    SpinConfig sigma_;
    std::mt19937_64 rng_;
    int margin_ = 0, hw_ = 0;
    BlockLayout blocks_;
    EpsilonBuffer buffer_;
    SamplerCounters counters_;
    std::function<void(const TraceEvent&)> trace_;
    std::string fallback_reason_;
    int since_inversion_ = 0;
    bool inversion_pending_ = false;
    cplx log_psi_ = 0.0;

    std::unique_ptr<LinkCache> cache_;
    std::unique_ptr<IsaBound> bound_;
    std::vector<FlipDetail> accepted_;
    std::vector<cplx> dOmega_;
    std::vector<double> cross_, gate_max_;
    double dz_current_ = 0.0;
};

} // namespace dyson
