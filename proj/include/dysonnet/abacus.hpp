#pragma once

/** @file abacus.hpp
    @brief Link-tensor cache and the exact local-update recurrence.

    For a flip cluster anchored at token c (extent e <= margin tokens) every perturbation
    lives on offsets o relative to c:
      q^0           = delta h^1 + delta phi^0                      on [0, e]
      du^l          = sum_{m<l} L^(l,m) q^m                          on win(l) = [-l wk, margin + l wk]
      s^l           = Delta D^l (u0^l + du^l)
      q^l           = s^l + delta phi^l                              (l < L)
      Delta pool    = (1/n)[sum delta h^1 + sum_l sum s^l] + sum_m <tau^m, q^m>
    L^(l,m) = P G^l (D0^{l-1} G^{l-1}) ... (D0^{m+1} G^{m+1}) P^T is indexed by the number of
    intermediate background vertices l-1-m: 0 -> Toeplitz block of the kernel (no storage),
    1 -> composite-kernel FFT, >= 2 -> dense propagation of unit probes.
    tau^m is the reverse-mode functional mapping a source on layer m to the pooled output,
    tau^{L-1} = (B^L)^T a, tau^m = (B^{m+1})^T (a + tau^{m+1}), B^k = D0^k G^k, a = e_c / n.
*/

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "fft.hpp"
#include "network.hpp"
#include "spin_systems.hpp"

namespace dyson {

enum class LinkMethod { Auto, FFT, Direct };

struct AbacusOptions {
    int margin = 0;            // largest token extent of a flip cluster (1 for two-site exchanges)
    std::vector<int> centers;  // registered anchor tokens; empty registers every token
    LinkMethod link_method = LinkMethod::Auto;
};

struct SlicePatch {
    int center = 0;
    int half_width = 0;
    std::vector<int> indices;
};

inline SlicePatch make_patch(int center, int half_width, int n_tok) {
    if (2 * half_width + 1 > n_tok) throw DomainError("slice patch wraps onto itself (2 w_eff + 1 > N_tok)");
    if (center < 0 || center >= n_tok) throw DomainError("slice patch center out of range");
    SlicePatch p{center, half_width, {}};
    for (int o = -half_width; o <= half_width; ++o) p.indices.push_back(wrap(center + o, n_tok));
    return p;
}

/// Slice half-width needed for exact updates: L w_k plus the cluster margin.
inline int abacus_half_width(const ModelConfig& c, int margin) { return c.layers * c.kernel_half_width + margin; }

/// Whether the ABACUS path is usable at all for this size (otherwise use full forwards).
inline bool abacus_applicable(const ModelConfig& c, int n_tok, int margin) {
    return 2 * abacus_half_width(c, margin) + 1 <= n_tok;
}

struct FlipCluster {
    int anchor = 0;  // token
    int extent = 0;  // tokens spanned beyond the anchor
};

/// Row-sum (infinity) norm of U diag(chi) V.
inline double gate_norm(const LayerView& lv, const Eigen::Ref<const Eigen::RowVectorXd>& chi) {
    return (lv.U * chi.transpose().asDiagonal() * lv.V).cwiseAbs().rowwise().sum().maxCoeff();
}

/// Magnitudes collected during one exact update; consumed by the screened-sampler bound.
struct FlipDetail {
    int anchor = 0;
    std::vector<std::vector<double>> q_abs;   // [m][o - lo(m)] max over channels of |q^m|, m < L
    std::vector<std::vector<double>> dD_norm; // [l-1][o - lo(l)] ||Delta D^l||_inf
    std::vector<double> gate_new_max;         // [l-1] max over the window of ||D0 + Delta D||_inf
};

inline uint64_t cache_fingerprint(const SpinConfig& s, uint64_t version) {
    return s.hash() ^ (version * 0x9E3779B97F4A7C15ull);
}

class LinkCache {
public:
    LinkCache(const PreparedModel& pm, const SpinConfig& sigma0, AbacusOptions opt = {})
        : pm_(&pm), sigma0_(sigma0), opt_(std::move(opt)) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto& cfg = pm.cfg();
        L_ = cfg.layers;
        d_ = cfg.d;
        wk_ = cfg.kernel_half_width;
        n_ = pm.n_tok();
        if (opt_.margin < 0) throw DomainError("abacus: margin must be >= 0");
        hw_ = abacus_half_width(cfg, opt_.margin);
        if (2 * hw_ + 1 > n_) throw DomainError("abacus: slice patch wraps onto itself (2 w_eff + 1 > N_tok)");
        version_ = pm.version();
        fingerprint_ = cache_fingerprint(sigma0, version_);
        trace_ = forward(pm, sigma0);

        center_index_.assign(static_cast<size_t>(n_), -1);
        if (opt_.centers.empty()) {
            for (int j = 0; j < n_; ++j) centers_.push_back(j);
        } else {
            centers_ = opt_.centers;
            std::sort(centers_.begin(), centers_.end());
            centers_.erase(std::unique(centers_.begin(), centers_.end()), centers_.end());
        }
        for (size_t i = 0; i < centers_.size(); ++i) {
            if (centers_[i] < 0 || centers_[i] >= n_) throw DomainError("abacus: registered center out of range");
            center_index_[centers_[i]] = static_cast<int>(i);
        }

        // Output map Omega = W_out * pool + const.
        const Model& m = pm.model();
        const int D = cfg.d_out;
        w_out_.assign(static_cast<size_t>(D * d_), 0.0);
        for (int o = 0; o < D; ++o)
            for (int ch = 0; ch < d_; ++ch) {
                const double sc = m.theta[m.layout.an_scale + ch] * pm.final_dc()(ch);
                const double re = m.theta[m.layout.A + ch * D + o];
                const double im = m.layout.A_im >= 0 ? m.theta[m.layout.A_im + ch * D + o] : 0.0;
                w_out_[o * d_ + ch] = cplx(re, im) * sc;
            }

        build_tau();
        build_links();
        build_seconds_ = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }

    // ---- accessors -------------------------------------------------------------------
    const PreparedModel& prepared() const { return *pm_; }
    const SpinConfig& reference() const { return sigma0_; }
    const ForwardTrace& baseline() const { return trace_; }
    const std::vector<cplx>& omega0() const { return trace_.omega; }
    cplx log_psi0() const { return trace_.log_psi; }
    uint64_t fingerprint() const { return fingerprint_; }
    int half_width() const { return hw_; }
    int margin() const { return opt_.margin; }
    int n_tok() const { return n_; }
    const std::vector<int>& centers() const { return centers_; }
    double build_seconds() const { return build_seconds_; }
    long fft_count() const { return fft_count_; }
    long probe_count() const { return probe_count_; }
    /// tau^m as an n x (d*d) matrix: row token, column c' * d + ch.
    const Eigen::MatrixXd& tau(int m) const { return tau_[static_cast<size_t>(m)]; }
    const std::vector<cplx>& output_map() const { return w_out_; }
    int window_lo(int l) const { return -l * wk_; }
    int window_size(int l) const { return 2 * l * wk_ + 1 + opt_.margin; }
    bool has_link(int l, int m) const { return l - m >= 2; }

    /// Stored link block for (l, m), center c: d x d matrix at (o, o').
    Eigen::Map<const RowMat> link_block(int l, int m, int center, int o, int op) const {
        const auto& blk = links_[link_slot(l, m)];
        const int ci = center_index_.at(static_cast<size_t>(center));
        if (ci < 0) throw DomainError("abacus: center not registered");
        const int Wl = window_size(l), Wm = window_size(m);
        const size_t idx = ((static_cast<size_t>(ci) * Wl + (o - window_lo(l))) * Wm + (op - window_lo(m))) * d_ * d_;
        return Eigen::Map<const RowMat>(blk.data() + idx, d_, d_);
    }

    size_t memory_bytes() const {
        size_t b = 0;
        for (const auto& t : tau_) b += static_cast<size_t>(t.size()) * sizeof(double);
        for (const auto& l : links_) b += l.size() * sizeof(double);
        auto field = [](const std::vector<Mat>& v) {
            size_t s = 0;
            for (const auto& x : v) s += static_cast<size_t>(x.size()) * sizeof(double);
            return s;
        };
        b += field(trace_.h) + field(trace_.phi) + field(trace_.phit) + field(trace_.pre) + field(trace_.x) +
             field(trace_.u) + field(trace_.a) + field(trace_.chi) + field(trace_.vu);
        b += center_index_.size() * sizeof(int) + centers_.size() * sizeof(int);
        return b;
    }

    /// Stale-use guard: the prepared model must be the one the cache was built with.
    void check(const PreparedModel& pm) const {
        if (&pm != pm_ || pm.version() != version_)
            throw InvariantError("abacus: link cache used with a different parameter version");
    }

    /// Locate a flip cluster: anchor token and extent. Throws if it is not covered.
    FlipCluster locate(const std::vector<int>& sites) const {
        const int t = pm_->cfg().token_size;
        FlipCluster fc;
        if (sites.empty()) return fc;
        std::vector<int> toks;
        for (int s : sites) {
            if (s < 0 || s >= sigma0_.n()) throw DomainError("abacus: flip site out of range");
            toks.push_back(s / t);
        }
        std::sort(toks.begin(), toks.end());
        toks.erase(std::unique(toks.begin(), toks.end()), toks.end());
        // smallest circular arc containing every token
        int best_anchor = toks[0], best_extent = n_;
        for (size_t i = 0; i < toks.size(); ++i) {
            const int a = toks[i];
            int ext = 0;
            for (int x : toks) ext = std::max(ext, wrap(x - a, n_));
            if (ext < best_extent) {
                best_extent = ext;
                best_anchor = a;
            }
        }
        if (best_extent > opt_.margin) throw DomainError("abacus: flip cluster wider than the registered margin");
        if (center_index_[best_anchor] < 0) throw DomainError("abacus: flip outside every registered patch");
        fc.anchor = best_anchor;
        fc.extent = best_extent;
        return fc;
    }

    /// Exact change of the pooled features for flipping all `sites` against the reference.
    Eigen::VectorXd pool_delta(const std::vector<int>& sites, FlipDetail* detail = nullptr) const {
        Eigen::VectorXd dpool = Eigen::VectorXd::Zero(d_);
        if (detail) {
            *detail = FlipDetail{};
            detail->q_abs.assign(static_cast<size_t>(L_), {});
            detail->dD_norm.assign(static_cast<size_t>(L_), {});
            detail->gate_new_max.assign(static_cast<size_t>(L_), 0.0);
            for (int mm = 0; mm < L_; ++mm) detail->q_abs[mm].assign(static_cast<size_t>(window_size(mm)), 0.0);
            for (int l = 1; l <= L_; ++l) detail->dD_norm[l - 1].assign(static_cast<size_t>(window_size(l)), 0.0);
        }
        if (sites.empty()) return dpool;
        for (size_t i = 0; i < sites.size(); ++i)
            for (size_t j = i + 1; j < sites.size(); ++j)
                if (sites[i] == sites[j]) throw DomainError("abacus: duplicate flip site");
        const FlipCluster fc = locate(sites);
        const Model& m = pm_->model();
        const int c = fc.anchor, d = d_, t = pm_->cfg().token_size, margin = opt_.margin;
        CRowMap E(m.at(m.layout.E), d, t), Ephi(m.at(m.layout.Ephi), d, t);

        // q^0 on [0, margin]; delta phi^0 is the same window.
        std::vector<Mat> q(static_cast<size_t>(L_));  // q[m]: window_size(m) x d, row o - lo(m)
        std::vector<Mat> dphi(static_cast<size_t>(L_ + 1));
        q[0] = Mat::Zero(window_size(0), d);
        dphi[0] = Mat::Zero(window_size(0), d);
        Eigen::VectorXd dh1_sum = Eigen::VectorXd::Zero(d);
        {
            Mat dP = Mat::Zero(margin + 1, t);
            for (int s : sites) {
                const int o = wrap(s / t - c, n_);
                dP(o, s % t) = -2.0 * sigma0_[s];
            }
            const Mat dh1 = dP * E.transpose();
            dphi[0] = dP * Ephi.transpose();
            q[0] = dh1 + dphi[0];
            dh1_sum = dh1.colwise().sum().transpose();
        }
        // Offset of token p inside window(l), or -1.
        auto in_window = [&](int l, int p) {
            const int lo = window_lo(l);
            const int o = wrap(p - c - lo, n_);
            return o < window_size(l) ? o : -1;
        };

        Eigen::VectorXd s_sum = Eigen::VectorXd::Zero(d);
        for (int l = 1; l <= L_; ++l) {
            const LayerView lv = layer_view(m, l - 1);
            const int Wl = window_size(l), lo = window_lo(l);
            // new phi^l on the window
            Mat dphi_l = Mat::Zero(Wl, d), dchi = Mat::Zero(Wl, d);
            for (int i = 0; i < Wl; ++i) {
                const int p = wrap(c + lo + i, n_);
                Eigen::VectorXd dpre = Eigen::VectorXd::Zero(d);
                for (int r = -wk_; r <= wk_; ++r) {
                    const int w = in_window(l - 1, wrap(p + r, n_));
                    if (w < 0) continue;
                    const Eigen::VectorXd z = lv.WD * dphi[l - 1].row(w).transpose();
                    for (int ch = 0; ch < d; ++ch) dpre(ch) += lv.K[(r + wk_) * d + ch] * z(ch);
                }
                for (int ch = 0; ch < d; ++ch)
                    dphi_l(i, ch) = silu(trace_.pre[l - 1](p, ch) + dpre(ch)) - trace_.phi[l](p, ch);
                const Eigen::VectorXd da = lv.AD * dphi_l.row(i).transpose();
                for (int ch = 0; ch < d; ++ch)
                    dchi(i, ch) = silu(trace_.a[l - 1](p, ch) + da(ch)) - trace_.chi[l - 1](p, ch);
            }
            dphi[l] = dphi_l;

            // du^l on window(l)
            Mat du = Mat::Zero(Wl, d);
            {
                // Toeplitz part from q^{l-1}
                const int Wm = window_size(l - 1), lom = window_lo(l - 1);
                const auto& G = pm_->kernels(l - 1);
                for (int i = 0; i < Wl; ++i)
                    for (int j = 0; j < Wm; ++j) {
                        const int r = wrap((lo + i) - (lom + j), n_);
                        for (int ch = 0; ch < d; ++ch) du(i, ch) += G[ch].g[r] * q[l - 1](j, ch);
                    }
            }
            for (int mm = 0; mm <= l - 2; ++mm) {
                const int Wm = window_size(mm), lom = window_lo(mm);
                for (int i = 0; i < Wl; ++i)
                    for (int j = 0; j < Wm; ++j) {
                        if (q[mm].row(j).isZero(0.0)) continue;
                        du.row(i) += (link_block(l, mm, c, lo + i, lom + j) * q[mm].row(j).transpose()).transpose();
                    }
            }
            // s^l = U diag(dchi) V (u0 + du)
            Mat s = Mat::Zero(Wl, d);
            for (int i = 0; i < Wl; ++i) {
                if (dchi.row(i).isZero(0.0)) continue;
                const int p = wrap(c + lo + i, n_);
                const Eigen::VectorXd uu = trace_.u[l - 1].row(p).transpose() + du.row(i).transpose();
                const Eigen::VectorXd y = (lv.V * uu).cwiseProduct(dchi.row(i).transpose());
                s.row(i) = (lv.U * y).transpose();
            }
            s_sum += s.colwise().sum().transpose();
            if (l < L_) q[l] = s + dphi_l;
            if (detail) {
                for (int i = 0; i < Wl; ++i) {
                    if (dchi.row(i).isZero(0.0)) continue;
                    const int p = wrap(c + lo + i, n_);
                    detail->dD_norm[l - 1][i] = gate_norm(lv, dchi.row(i));
                    const Eigen::RowVectorXd chi_new = trace_.chi[l - 1].row(p) + dchi.row(i);
                    detail->gate_new_max[l - 1] = std::max(detail->gate_new_max[l - 1], gate_norm(lv, chi_new));
                }
            }
        }

        if (detail) {
            detail->anchor = c;
            for (int mm = 0; mm < L_; ++mm)
                for (int j = 0; j < window_size(mm); ++j) detail->q_abs[mm][j] = q[mm].row(j).cwiseAbs().maxCoeff();
        }
        dpool = (dh1_sum + s_sum) / static_cast<double>(n_);
        for (int mm = 0; mm < L_; ++mm) {
            const int Wm = window_size(mm), lom = window_lo(mm);
            const Eigen::MatrixXd& T = tau_[mm];
            for (int j = 0; j < Wm; ++j) {
                if (q[mm].row(j).isZero(0.0)) continue;
                const int p = wrap(c + lom + j, n_);
                for (int cp = 0; cp < d; ++cp) {
                    double acc = 0.0;
                    for (int ch = 0; ch < d; ++ch) acc += T(p, cp * d + ch) * q[mm](j, ch);
                    dpool(cp) += acc;
                }
            }
        }
        return dpool;
    }

    std::vector<cplx> omega_from_pool_delta(const Eigen::VectorXd& dpool) const {
        const int D = pm_->cfg().d_out;
        std::vector<cplx> om = trace_.omega;
        for (int o = 0; o < D; ++o)
            for (int ch = 0; ch < d_; ++ch) om[o] += w_out_[o * d_ + ch] * dpool(ch);
        return om;
    }

    /// Delta Omega for one cluster flip.
    std::vector<cplx> delta_omega(const std::vector<int>& sites) const {
        const Eigen::VectorXd dp = pool_delta(sites);
        const int D = pm_->cfg().d_out;
        std::vector<cplx> dw(static_cast<size_t>(D), 0.0);
        for (int o = 0; o < D; ++o)
            for (int ch = 0; ch < d_; ++ch) dw[o] += w_out_[o * d_ + ch] * dp(ch);
        return dw;
    }

    /// Negative control for the validation harness: perturbs the stored output functional.
    void corrupt_for_testing(double amount = 1e-3) {
        for (auto& t : tau_) t.array() += amount;
    }

private:
    size_t link_slot(int l, int m) const {
        if (l - m < 2 || m < 0 || l > L_) throw DomainError("abacus: no stored link for this layer pair");
        return static_cast<size_t>((l - 2) * L_ + m);
    }

    // D0^l entries as d^2 token fields: F(p, ch*d + ch') = sum_e U(ch,e) chi(p,e) V(e,ch').
    Eigen::MatrixXd vertex_fields(int l) const {
        const LayerView lv = layer_view(pm_->model(), l - 1);
        Eigen::MatrixXd M(d_, d_ * d_);
        for (int e = 0; e < d_; ++e)
            for (int ch = 0; ch < d_; ++ch)
                for (int cp = 0; cp < d_; ++cp) M(e, ch * d_ + cp) = lv.U(ch, e) * lv.V(e, cp);
        return trace_.chi[l - 1] * M;
    }

    void build_tau() {
        const Model& m = pm_->model();
        tau_.assign(static_cast<size_t>(L_), Eigen::MatrixXd::Zero(n_, d_ * d_));
        for (int cp = 0; cp < d_; ++cp) {
            Mat R = Mat::Zero(n_, d_);
            for (int mm = L_ - 1; mm >= 0; --mm) {
                const int k = mm + 1;  // B^k = D0^k G^k
                const LayerView lv = layer_view(m, k - 1);
                Mat Z = R;
                Z.col(cp).array() += 1.0 / n_;
                const Mat Y = ((Z * lv.U).cwiseProduct(trace_.chi[k - 1])) * lv.V;
                convolve(pm_->kernels(k - 1), Y, R);
                for (int ch = 0; ch < d_; ++ch) tau_[mm].col(cp * d_ + ch) = R.col(ch);
            }
        }
        fft_count_ += 2L * L_ * d_ * d_;
    }

    void build_links() {
        links_.assign(static_cast<size_t>(std::max(0, (L_ - 1) * L_)), {});
        const size_t ncent = centers_.size();
        for (int l = 2; l <= L_; ++l)
            for (int mm = 0; mm <= l - 2; ++mm) {
                auto& blk = links_[link_slot(l, mm)];
                blk.assign(ncent * window_size(l) * window_size(mm) * d_ * d_, 0.0);
                if (l - mm == 2) {
                    bool use_fft = opt_.link_method == LinkMethod::FFT;
                    if (opt_.link_method == LinkMethod::Auto)
                        use_fft = static_cast<double>(ncent) > 2.0 * std::log2(static_cast<double>(n_)) + 2.0;
                    if (use_fft) build_one_vertex_fft(l, mm, blk);
                    else build_one_vertex_direct(l, mm, blk);
                } else {
                    build_dense(l, mm, blk);
                }
            }
    }

    // composite kernel K(kappa) = g^l_ch(o - kappa) g^{l-1}_ch'(kappa - o')
    void composite(int l, int ch, int cp, int o, int op, std::vector<double>& K) const {
        const auto& ga = pm_->kernels(l - 1)[ch].g;
        const auto& gb = pm_->kernels(l - 2)[cp].g;
        K.resize(static_cast<size_t>(n_));
        for (int k = 0; k < n_; ++k) K[k] = ga[wrap(o - k, n_)] * gb[wrap(k - op, n_)];
    }

    void build_one_vertex_fft(int l, int mm, std::vector<double>& blk) {
        const Eigen::MatrixXd F = vertex_fields(l - 1);
        const int Wl = window_size(l), Wm = window_size(mm), dd = d_ * d_;
        std::vector<fft::cvec> FD(static_cast<size_t>(dd));
        std::vector<double> col(static_cast<size_t>(n_)), K, res;
        for (int e = 0; e < dd; ++e) {
            for (int p = 0; p < n_; ++p) col[p] = F(p, e);
            fft::forward(col, FD[e]);
        }
        fft::cvec FK, prod(static_cast<size_t>(n_));
        for (int i = 0; i < Wl; ++i)
            for (int j = 0; j < Wm; ++j)
                for (int ch = 0; ch < d_; ++ch)
                    for (int cp = 0; cp < d_; ++cp) {
                        composite(l, ch, cp, window_lo(l) + i, window_lo(mm) + j, K);
                        fft::forward(K, FK);
                        const auto& D = FD[ch * d_ + cp];
                        for (int k = 0; k < n_; ++k) prod[k] = std::conj(FK[k]) * D[k];
                        fft::inverse_real(prod, res);
                        for (size_t ci = 0; ci < centers_.size(); ++ci)
                            blk[((ci * Wl + i) * Wm + j) * dd + ch * d_ + cp] = res[centers_[ci]];
                    }
        fft_count_ += dd + 2L * Wl * Wm * dd;
    }

    void build_one_vertex_direct(int l, int mm, std::vector<double>& blk) {
        const Eigen::MatrixXd F = vertex_fields(l - 1);
        const int Wl = window_size(l), Wm = window_size(mm), dd = d_ * d_;
        std::vector<double> K;
        for (int i = 0; i < Wl; ++i)
            for (int j = 0; j < Wm; ++j)
                for (int ch = 0; ch < d_; ++ch)
                    for (int cp = 0; cp < d_; ++cp) {
                        composite(l, ch, cp, window_lo(l) + i, window_lo(mm) + j, K);
                        for (size_t ci = 0; ci < centers_.size(); ++ci) {
                            const int c = centers_[ci];
                            double acc = 0.0;
                            for (int k = 0; k < n_; ++k) acc += K[k] * F(wrap(c + k, n_), ch * d_ + cp);
                            blk[((ci * Wl + i) * Wm + j) * dd + ch * d_ + cp] = acc;
                        }
                    }
    }

    // Unit probes pushed through the frozen background: G^l B^{l-1} ... B^{m+1}.
    void build_dense(int l, int mm, std::vector<double>& blk) {
        const Model& m = pm_->model();
        const int Wl = window_size(l), Wm = window_size(mm), dd = d_ * d_;
        Mat y, tmp;
        for (size_t ci = 0; ci < centers_.size(); ++ci) {
            const int c = centers_[ci];
            for (int j = 0; j < Wm; ++j)
                for (int cp = 0; cp < d_; ++cp) {
                    y = Mat::Zero(n_, d_);
                    y(wrap(c + window_lo(mm) + j, n_), cp) = 1.0;
                    for (int k = mm + 1; k <= l - 1; ++k) {
                        convolve(pm_->kernels(k - 1), y, tmp);
                        const LayerView lv = layer_view(m, k - 1);
                        y = (tmp * lv.V.transpose()).cwiseProduct(trace_.chi[k - 1]) * lv.U.transpose();
                    }
                    convolve(pm_->kernels(l - 1), y, tmp);
                    for (int i = 0; i < Wl; ++i) {
                        const int p = wrap(c + window_lo(l) + i, n_);
                        for (int ch = 0; ch < d_; ++ch) blk[((ci * Wl + i) * Wm + j) * dd + ch * d_ + cp] = tmp(p, ch);
                    }
                    ++probe_count_;
                }
        }
    }

    const PreparedModel* pm_;
    SpinConfig sigma0_;
    AbacusOptions opt_;
    int L_ = 0, d_ = 0, wk_ = 0, n_ = 0, hw_ = 0;
    uint64_t version_ = 0, fingerprint_ = 0;
    ForwardTrace trace_;
    std::vector<int> centers_, center_index_;
    std::vector<cplx> w_out_;
    std::vector<Eigen::MatrixXd> tau_;
    std::vector<std::vector<double>> links_;
    double build_seconds_ = 0.0;
    long fft_count_ = 0, probe_count_ = 0;
};

/// Per-flip Delta Omega. A single cluster is exact; several clusters are each evaluated
/// against the shared frozen background (independent scattering).
inline std::vector<std::vector<cplx>> abacus_delta(const LinkCache& cache, const PreparedModel& pm,
                                                   const std::vector<std::vector<int>>& flips) {
    cache.check(pm);
    std::vector<std::vector<cplx>> out;
    out.reserve(flips.size());
    for (const auto& f : flips) out.push_back(cache.delta_omega(f));
    return out;
}

/// Psi(sigma0 + flip) / Psi(sigma0), signed / complex.
inline cplx psi_ratio(const LinkCache& cache, const std::vector<cplx>& delta_omega) {
    const auto& om0 = cache.omega0();
    std::vector<cplx> om(om0.size());
    for (size_t o = 0; o < om.size(); ++o) om[o] = om0[o] + delta_omega[o];
    return std::exp(log_amplitude(cache.prepared().cfg().readout, om) - cache.log_psi0());
}

/// |Psi(sigma0 + flip) / Psi(sigma0)|^2 for every flip.
inline std::vector<double> amplitude_ratio(const LinkCache& cache, const PreparedModel& pm,
                                           const std::vector<std::vector<int>>& flips) {
    const auto dw = abacus_delta(cache, pm, flips);
    std::vector<double> r;
    r.reserve(dw.size());
    for (const auto& w : dw) r.push_back(std::norm(psi_ratio(cache, w)));
    return r;
}

} // namespace dyson
