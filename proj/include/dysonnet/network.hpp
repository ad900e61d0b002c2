#pragma once

/** @file network.hpp
    @brief DysonNet forward pass, trace and reverse-mode gradient of log Psi.

    Indexing used throughout (tokens j = 0..n-1, channels c = 0..d-1):
      h^1 = E patch(sigma),  phi^0 = E_phi patch(sigma)
      layer l = 1..L:
        phi^l   = SiLU(K^l (*) (W_D^l phi^{l-1} + w^l) + k^l)     depthwise, circular
        x^l     = h^l + phi^{l-1}
        u^l     = G^l x^l                                         per-channel circular conv
        chi^l   = SiLU(A_D^l phi^l + b^l)
        h^{l+1} = U^l diag(chi^l) V^l u^l
      S = sum_{m=1}^{L+1} h^m,  pool = mean_j S,  p2 = R^f(0) pool   (mean of G^f S)
      an = scale * p2 + shift,  Omega = A^T an,  logPsi = f(Omega)
*/

#include <cmath>
#include <complex>
#include <memory>
#include <mutex>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "fft.hpp"
#include "model.hpp"
#include "s4_kernel.hpp"
#include "spin_systems.hpp"

namespace dyson {

using Mat = Eigen::MatrixXd;  // n_tok x d, column-major so each channel is contiguous
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CRowMap = Eigen::Map<const RowMat>;

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double silu_prime(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

/// Read-only view of one block's dense parameters.
struct LayerView {
    CRowMap WD, AD, U, V;
    const double *w, *K, *k, *b, *s4;
    int d, wk;
};

inline LayerView layer_view(const Model& m, int l) {
    const auto& lo = m.layout.layer.at(static_cast<size_t>(l));
    const int d = m.cfg.d;
    return LayerView{CRowMap(m.at(lo.WD), d, d), CRowMap(m.at(lo.AD), d, d), CRowMap(m.at(lo.U), d, d),
                     CRowMap(m.at(lo.V), d, d), m.at(lo.w), m.at(lo.K), m.at(lo.k), m.at(lo.b), m.at(lo.s4),
                     d, m.cfg.kernel_half_width};
}

/// Per-channel real kernel: spectrum R(k) and real-space taps g_r.
struct Kernel {
    std::vector<double> R, g;
};

inline constexpr int kDirectConvMax = 24;

/// Y = G X channel-wise (circular). Direct O(n^2) for small n, FFT otherwise.
inline void convolve(const std::vector<Kernel>& kern, const Mat& X, Mat& Y) {
    const int n = static_cast<int>(X.rows()), d = static_cast<int>(X.cols());
    Y.resize(n, d);
    if (n <= kDirectConvMax) {
        for (int c = 0; c < d; ++c) fft::circular_convolve_direct(kern[c].g, X.col(c).data(), Y.col(c).data(), n);
        return;
    }
    thread_local fft::cvec F;
    thread_local std::vector<double> col, out;
    for (int c = 0; c < d; ++c) {
        col.assign(X.col(c).data(), X.col(c).data() + n);
        fft::forward(col, F);
        for (int k = 0; k < n; ++k) F[k] *= kern[c].R[k];
        fft::inverse_real(F, out);
        std::copy(out.begin(), out.end(), Y.col(c).data());
    }
}

/// Real part of IFFT(G_c(k) * FFT(h_c)) for arbitrary complex per-channel spectra.
inline Mat green_convolve(const std::vector<std::vector<cplx>>& G, const Mat& h) {
    const int n = static_cast<int>(h.rows()), d = static_cast<int>(h.cols());
    if (static_cast<int>(G.size()) != d) throw DomainError("green_convolve: channel count mismatch");
    Mat y(n, d);
    fft::cvec F;
    std::vector<double> col, out;
    for (int c = 0; c < d; ++c) {
        if (static_cast<int>(G[c].size()) != n) throw DomainError("green_convolve: length mismatch");
        col.assign(h.col(c).data(), h.col(c).data() + n);
        fft::forward(col, F);
        for (int k = 0; k < n; ++k) F[k] *= G[c][k];
        fft::inverse_real(F, out);
        std::copy(out.begin(), out.end(), y.col(c).data());
    }
    return y;
}

/// Kernels of every S4 block for a given token count, plus lazily built Jacobians.
class PreparedModel {
public:
    PreparedModel(const Model& m, int n_spins) : model_(m) {
        m.cfg.validate();
        if (static_cast<int>(m.theta.size()) != m.layout.total) throw DomainError("PreparedModel: parameter size mismatch");
        if (n_spins < 2 || n_spins % m.cfg.token_size != 0)
            throw DomainError("PreparedModel: N must be a positive multiple of token_size");
        n_spins_ = n_spins;
        n_tok_ = n_spins / m.cfg.token_size;
        const int L = m.cfg.layers, d = m.cfg.d;
        kern_.resize(static_cast<size_t>(L + 1));
        for (int b = 0; b <= L; ++b) {
            kern_[b].resize(static_cast<size_t>(d));
            for (int c = 0; c < d; ++c) {
                auto& k = kern_[b][c];
                try {
                    k.R = s4::real_response(channel(b, c), n_tok_);
                } catch (const NumericalError& e) {
                    throw NumericalError(e.what(), b);
                }
                k.g = fft::kernel_from_response(k.R);
            }
        }
        Rf0_.resize(d);
        for (int c = 0; c < d; ++c) Rf0_(c) = kern_[L][c].R[0];
        jac_once_ = std::make_unique<std::once_flag>();
    }

    const Model& model() const { return model_; }
    const ModelConfig& cfg() const { return model_.cfg; }
    int n_spins() const { return n_spins_; }
    int n_tok() const { return n_tok_; }
    uint64_t version() const { return model_.version; }
    /// Block b in 0..L-1 are the layers, b = L is the final mixer.
    const std::vector<Kernel>& kernels(int b) const { return kern_[static_cast<size_t>(b)]; }
    const Eigen::VectorXd& final_dc() const { return Rf0_; }

    s4::ChannelView channel(int b, int c) const {
        const int off = b < model_.cfg.layers ? model_.layout.layer[b].s4 : model_.layout.s4_final;
        return s4::ChannelView{model_.at(off + c * model_.layout.s4_channel), model_.cfg.s4_state};
    }
    int channel_offset(int b, int c) const {
        const int off = b < model_.cfg.layers ? model_.layout.layer[b].s4 : model_.layout.s4_final;
        return off + c * model_.layout.s4_channel;
    }

    /// dR_c(k)/dtheta for block b, channel c (n_tok x channel_size).
    const Eigen::MatrixXd& jacobian(int b, int c) const {
        std::call_once(*jac_once_, [this] {
            const int L = model_.cfg.layers, d = model_.cfg.d;
            jac_.resize(static_cast<size_t>((L + 1) * d));
            for (int bb = 0; bb <= L; ++bb)
                for (int cc = 0; cc < d; ++cc) jac_[bb * d + cc] = s4::real_response_jacobian(channel(bb, cc), n_tok_);
        });
        return jac_[static_cast<size_t>(b * model_.cfg.d + c)];
    }

private:
    Model model_;
    int n_spins_ = 0, n_tok_ = 0;
    std::vector<std::vector<Kernel>> kern_;
    Eigen::VectorXd Rf0_;
    mutable std::vector<Eigen::MatrixXd> jac_;
    std::unique_ptr<std::once_flag> jac_once_;
};

// ---- building blocks -------------------------------------------------------

inline Mat patch_matrix(const SpinConfig& s, int token_size) {
    const int n = s.n() / token_size;
    Mat P(n, token_size);
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < token_size; ++i) P(j, i) = s[j * token_size + i];
    return P;
}

/// Depthwise conv of phit into pre: pre(j,c) = sum_r K_r[c] phit(j+r, c) + k[c].
inline void depthwise(const LayerView& lv, const Mat& phit, Mat& pre) {
    const int n = static_cast<int>(phit.rows()), d = lv.d, wk = lv.wk;
    pre.resize(n, d);
    for (int c = 0; c < d; ++c)
        for (int j = 0; j < n; ++j) {
            double acc = lv.k[c];
            for (int r = -wk; r <= wk; ++r) acc += lv.K[(r + wk) * d + c] * phit(wrap(j + r, n), c);
            pre(j, c) = acc;
        }
}

/// One phi-stream layer: site-wise dense map, depthwise window, SiLU.
inline Mat phi_stream_step(const Mat& phi, const LayerView& lv) {
    Mat phit = phi * lv.WD.transpose();
    phit.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(lv.w, lv.d);
    Mat pre;
    depthwise(lv, phit, pre);
    return pre.unaryExpr([](double x) { return silu(x); });
}

/// D_j = U diag(SiLU(A_D phi_j + b)) V.
inline Eigen::MatrixXd local_vertex(const Eigen::VectorXd& phi_j, const LayerView& lv) {
    Eigen::VectorXd a = lv.AD * phi_j + Eigen::Map<const Eigen::VectorXd>(lv.b, lv.d);
    Eigen::VectorXd chi = a.unaryExpr([](double x) { return silu(x); });
    return lv.U * chi.asDiagonal() * lv.V;
}

struct ForwardTrace {
    Mat patch;
    std::vector<Mat> h;    // h[m] = h^{m+1}, m = 0..L
    std::vector<Mat> phi;  // phi[l], l = 0..L
    std::vector<Mat> phit, pre, x, u, a, chi, vu;  // per layer, index l-1
    Eigen::VectorXd pool, p2, an;
    std::vector<cplx> omega;
    cplx log_psi = 0.0;
};

inline std::vector<cplx> readout(const Model& m, const Eigen::VectorXd& an) {
    const int d = m.cfg.d, D = m.cfg.d_out;
    std::vector<cplx> om(static_cast<size_t>(D), 0.0);
    for (int o = 0; o < D; ++o) {
        double re = 0.0, im = 0.0;
        for (int c = 0; c < d; ++c) {
            re += m.theta[m.layout.A + c * D + o] * an(c);
            if (m.layout.A_im >= 0) im += m.theta[m.layout.A_im + c * D + o] * an(c);
        }
        om[o] = {re, im};
    }
    return om;
}

/// ActNorm + readout given pooled features p2.
inline Eigen::VectorXd actnorm(const Model& m, const Eigen::VectorXd& p2) {
    const int d = m.cfg.d;
    Eigen::VectorXd an(d);
    for (int c = 0; c < d; ++c) an(c) = m.theta[m.layout.an_scale + c] * p2(c) + m.theta[m.layout.an_shift + c];
    return an;
}

inline ForwardTrace forward(const PreparedModel& pm, const SpinConfig& sigma) {
    const Model& m = pm.model();
    const auto& cfg = m.cfg;
    if (sigma.n() != pm.n_spins()) throw DomainError("forward: configuration size does not match prepared model");
    const int L = cfg.layers, d = cfg.d, t = cfg.token_size;
    ForwardTrace tr;
    tr.patch = patch_matrix(sigma, t);
    CRowMap E(m.at(m.layout.E), d, t), Ephi(m.at(m.layout.Ephi), d, t);
    tr.h.resize(static_cast<size_t>(L + 1));
    tr.phi.resize(static_cast<size_t>(L + 1));
    for (auto* v : {&tr.phit, &tr.pre, &tr.x, &tr.u, &tr.a, &tr.chi, &tr.vu}) v->resize(static_cast<size_t>(L));
    tr.h[0] = tr.patch * E.transpose();
    tr.phi[0] = tr.patch * Ephi.transpose();
    Mat S = tr.h[0];
    for (int l = 0; l < L; ++l) {
        const LayerView lv = layer_view(m, l);
        Mat& phit = tr.phit[l];
        phit = tr.phi[l] * lv.WD.transpose();
        phit.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(lv.w, d);
        depthwise(lv, phit, tr.pre[l]);
        tr.phi[l + 1] = tr.pre[l].unaryExpr([](double v) { return silu(v); });
        tr.x[l] = tr.h[l] + tr.phi[l];
        convolve(pm.kernels(l), tr.x[l], tr.u[l]);
        tr.a[l] = tr.phi[l + 1] * lv.AD.transpose();
        tr.a[l].rowwise() += Eigen::Map<const Eigen::RowVectorXd>(lv.b, d);
        tr.chi[l] = tr.a[l].unaryExpr([](double v) { return silu(v); });
        tr.vu[l] = tr.u[l] * lv.V.transpose();
        tr.h[l + 1] = tr.chi[l].cwiseProduct(tr.vu[l]) * lv.U.transpose();
        if (!tr.h[l + 1].allFinite() || !tr.phi[l + 1].allFinite())
            throw NumericalError("forward: non-finite activation", l + 1);
        S += tr.h[l + 1];
    }
    tr.pool = S.colwise().mean().transpose();
    tr.p2 = pm.final_dc().cwiseProduct(tr.pool);
    tr.an = actnorm(m, tr.p2);
    tr.omega = readout(m, tr.an);
    for (auto w : tr.omega)
        if (!std::isfinite(w.real()) || !std::isfinite(w.imag())) throw NumericalError("forward: non-finite output", L + 1);
    tr.log_psi = log_amplitude(cfg.readout, tr.omega);
    return tr;
}

inline cplx log_psi(const PreparedModel& pm, const SpinConfig& s) { return forward(pm, s).log_psi; }

// ---- reverse mode -----------------------------------------------------------

/// Accumulates d(an_bar . an)/dtheta into grad for every parameter upstream of the readout.
inline void backward_features(const PreparedModel& pm, const ForwardTrace& tr, const Eigen::VectorXd& an_bar,
                              double* grad) {
    const Model& m = pm.model();
    const auto& cfg = m.cfg;
    const auto& lay = m.layout;
    const int L = cfg.layers, d = cfg.d, t = cfg.token_size, n = pm.n_tok();
    const int wk = cfg.kernel_half_width;

    for (int c = 0; c < d; ++c) {
        grad[lay.an_scale + c] += an_bar(c) * tr.p2(c);
        grad[lay.an_shift + c] += an_bar(c);
    }
    Eigen::VectorXd p2_bar(d), pool_bar(d);
    for (int c = 0; c < d; ++c) {
        p2_bar(c) = an_bar(c) * m.theta[lay.an_scale + c];
        pool_bar(c) = p2_bar(c) * pm.final_dc()(c);
        const double rf0_bar = p2_bar(c) * tr.pool(c);
        if (rf0_bar != 0.0) {
            const auto& J = pm.jacobian(L, c);
            double* g = grad + pm.channel_offset(L, c);
            for (Eigen::Index j = 0; j < J.cols(); ++j) g[j] += rf0_bar * J(0, j);
        }
    }
    // S_bar is constant over tokens; every h^m receives it.
    Mat S_bar = Mat::Zero(n, d);
    S_bar.rowwise() = (pool_bar / n).transpose();
    Mat h_bar = S_bar;                 // running adjoint of h^{l+1}
    Mat phi_bar = Mat::Zero(n, d);     // running adjoint of phi^{l+1}
    fft::cvec Fx, Fu;
    std::vector<double> col;
    for (int l = L - 1; l >= 0; --l) {
        const LayerView lv = layer_view(m, l);
        const auto& lo = lay.layer[l];
        const Mat y = tr.chi[l].cwiseProduct(tr.vu[l]);
        Eigen::Map<RowMat>(grad + lo.U, d, d) += h_bar.transpose() * y;
        const Mat y_bar = h_bar * lv.U;
        const Mat chi_bar = y_bar.cwiseProduct(tr.vu[l]);
        const Mat vu_bar = y_bar.cwiseProduct(tr.chi[l]);
        Eigen::Map<RowMat>(grad + lo.V, d, d) += vu_bar.transpose() * tr.u[l];
        const Mat u_bar = vu_bar * lv.V;
        Mat a_bar = chi_bar.cwiseProduct(tr.a[l].unaryExpr([](double v) { return silu_prime(v); }));
        Eigen::Map<RowMat>(grad + lo.AD, d, d) += a_bar.transpose() * tr.phi[l + 1];
        Eigen::Map<Eigen::RowVectorXd>(grad + lo.b, d) += a_bar.colwise().sum();
        phi_bar += a_bar * lv.AD;

        // Convolution: x_bar = G u_bar (G symmetric); R_bar(k) = Re(X(k) conj(U_bar(k))) / n.
        Mat x_bar;
        convolve(pm.kernels(l), u_bar, x_bar);
        for (int c = 0; c < d; ++c) {
            col.assign(tr.x[l].col(c).data(), tr.x[l].col(c).data() + n);
            fft::forward(col, Fx);
            col.assign(u_bar.col(c).data(), u_bar.col(c).data() + n);
            fft::forward(col, Fu);
            const auto& J = pm.jacobian(l, c);
            Eigen::VectorXd Rbar(n);
            for (int k = 0; k < n; ++k) Rbar(k) = (Fx[k] * std::conj(Fu[k])).real() / n;
            Eigen::Map<Eigen::VectorXd>(grad + pm.channel_offset(l, c), J.cols()) += J.transpose() * Rbar;
        }

        // phi^{l+1} = SiLU(pre)
        const Mat pre_bar = phi_bar.cwiseProduct(tr.pre[l].unaryExpr([](double v) { return silu_prime(v); }));
        Mat phit_bar = Mat::Zero(n, d);
        for (int c = 0; c < d; ++c) {
            double ksum = 0.0;
            for (int j = 0; j < n; ++j) ksum += pre_bar(j, c);
            grad[lo.k + c] += ksum;
            for (int r = -wk; r <= wk; ++r) {
                const double kr = lv.K[(r + wk) * d + c];
                double acc = 0.0;
                for (int j = 0; j < n; ++j) {
                    const int src = wrap(j + r, n);
                    acc += pre_bar(j, c) * tr.phit[l](src, c);
                    phit_bar(src, c) += kr * pre_bar(j, c);
                }
                grad[lo.K + (r + wk) * d + c] += acc;
            }
        }
        Eigen::Map<RowMat>(grad + lo.WD, d, d) += phit_bar.transpose() * tr.phi[l];
        Eigen::Map<Eigen::RowVectorXd>(grad + lo.w, d) += phit_bar.colwise().sum();

        // Adjoints flowing into layer l inputs: h^l and phi^{l}.
        Mat phi_prev_bar = phit_bar * lv.WD + x_bar;
        h_bar = x_bar + S_bar;
        phi_bar = phi_prev_bar;
        if (!h_bar.allFinite() || !phi_bar.allFinite()) throw NumericalError("backward: non-finite adjoint", l + 1);
    }
    Eigen::Map<RowMat>(grad + lay.E, d, t) += h_bar.transpose() * tr.patch;
    Eigen::Map<RowMat>(grad + lay.Ephi, d, t) += phi_bar.transpose() * tr.patch;
}

/// d logPsi / dtheta as separate real and imaginary parts.
struct LogDerivative {
    std::vector<double> re, im;
    bool is_complex = false;
};

inline LogDerivative grad_log_amplitude(const PreparedModel& pm, const ForwardTrace& tr) {
    const Model& m = pm.model();
    const auto& lay = m.layout;
    const int d = m.cfg.d, D = m.cfg.d_out;
    const auto psi_bar = log_amplitude_grad(m.cfg.readout, tr.omega);
    LogDerivative out;
    out.re.assign(static_cast<size_t>(lay.total), 0.0);
    out.im.assign(static_cast<size_t>(lay.total), 0.0);
    Eigen::VectorXd an_re = Eigen::VectorXd::Zero(d), an_im = Eigen::VectorXd::Zero(d);
    for (int c = 0; c < d; ++c)
        for (int o = 0; o < D; ++o) {
            const cplx Ac(m.theta[lay.A + c * D + o], lay.A_im >= 0 ? m.theta[lay.A_im + c * D + o] : 0.0);
            const cplx g = psi_bar[o] * Ac;
            an_re(c) += g.real();
            an_im(c) += g.imag();
            const cplx dA = psi_bar[o] * tr.an(c);
            out.re[lay.A + c * D + o] = dA.real();
            out.im[lay.A + c * D + o] = dA.imag();
            if (lay.A_im >= 0) {
                const cplx dAi = cplx(0.0, 1.0) * dA;
                out.re[lay.A_im + c * D + o] = dAi.real();
                out.im[lay.A_im + c * D + o] = dAi.imag();
            }
        }
    backward_features(pm, tr, an_re, out.re.data());
    if (an_im.cwiseAbs().maxCoeff() > 0.0) backward_features(pm, tr, an_im, out.im.data());
    for (double v : out.im)
        if (v != 0.0) {
            out.is_complex = true;
            break;
        }
    return out;
}

/// Data-dependent ActNorm initialization: unit variance, zero mean per channel.
inline void actnorm_init(Model& m, const std::vector<SpinConfig>& batch, int n_spins) {
    require(!batch.empty(), "actnorm_init: empty batch");
    const int d = m.cfg.d;
    for (int c = 0; c < d; ++c) {
        m.theta[m.layout.an_scale + c] = 1.0;
        m.theta[m.layout.an_shift + c] = 0.0;
    }
    PreparedModel pm(m, n_spins);
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d), sq = Eigen::VectorXd::Zero(d);
    for (const auto& s : batch) {
        const auto tr = forward(pm, s);
        mean += tr.p2;
        sq += tr.p2.cwiseProduct(tr.p2);
    }
    mean /= static_cast<double>(batch.size());
    sq /= static_cast<double>(batch.size());
    for (int c = 0; c < d; ++c) {
        const double var = std::max(0.0, sq(c) - mean(c) * mean(c));
        const double scale = 1.0 / std::sqrt(var + 1e-4);
        m.theta[m.layout.an_scale + c] = scale;
        m.theta[m.layout.an_shift + c] = -mean(c) * scale;
    }
    m.touch();
}

} // namespace dyson
