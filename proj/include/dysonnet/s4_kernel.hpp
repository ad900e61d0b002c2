#pragma once

/** @file s4_kernel.hpp
    @brief Diagonal-plus-rank-one S4 Green's function evaluated on the roots of unity.

    One channel owns 10*s + 1 reals laid out as
      lambda_re, lambda_im, p_re, p_im, q_re, q_im, B_re, B_im, C_re, C_im  (s each), log_dt.
    The continuous operator is Abar = diag(lambda) - p q^T (q enters unconjugated, so the
    response is holomorphic in every complex parameter). Bilinear discretization with step dt.

    With a = (1+z) dt / 2 and M_i = (1 - z) - a lambda_i the response
      G(z) = C (I - z A)^{-1} B
    reduces to Cauchy sums K(u, v) = sum_i u_i v_i / M_i:
      G(z) = dt [ K(B,C) - a K(p,C) K(B,q) / (1 + a K(p,q)) ].
    This form stays finite at z = -1, unlike the c(z), g(z) split.
*/

#include <cmath>
#include <complex>
#include <numbers>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"

namespace dyson {

using cplx = std::complex<double>;

namespace s4 {

enum Field { LRE = 0, LIM, PRE, PIM, QRE, QIM, BRE, BIM, CRE, CIM, kFields };

inline constexpr int channel_size(int s) { return kFields * s + 1; }
inline int offset(Field f, int s, int i) { return static_cast<int>(f) * s + i; }
inline int logdt_offset(int s) { return kFields * s; }

struct ChannelView {
    const double* p;
    int s;
    cplx lambda(int i) const { return {p[offset(LRE, s, i)], p[offset(LIM, s, i)]}; }
    cplx pv(int i) const { return {p[offset(PRE, s, i)], p[offset(PIM, s, i)]}; }
    cplx qv(int i) const { return {p[offset(QRE, s, i)], p[offset(QIM, s, i)]}; }
    cplx B(int i) const { return {p[offset(BRE, s, i)], p[offset(BIM, s, i)]}; }
    cplx C(int i) const { return {p[offset(CRE, s, i)], p[offset(CIM, s, i)]}; }
    double dt() const { return std::exp(p[logdt_offset(s)]); }
};

inline cplx root_of_unity(int k, int n) {
    const double th = 2.0 * std::numbers::pi * k / n;
    return {std::cos(th), std::sin(th)};
}

// Cauchy sums shared by the response and its derivatives.
struct CauchySums {
    cplx a, den;
    cplx Kbc, Kpc, Kbq, Kpq;
    std::vector<cplx> invM;
};

inline CauchySums cauchy_sums(const ChannelView& ch, cplx z) {
    CauchySums cs;
    const int s = ch.s;
    const double dt = ch.dt();
    cs.a = 0.5 * (1.0 + z) * dt;
    cs.invM.resize(static_cast<size_t>(s));
    cs.Kbc = cs.Kpc = cs.Kbq = cs.Kpq = 0.0;
    for (int i = 0; i < s; ++i) {
        const cplx M = (1.0 - z) - cs.a * ch.lambda(i);
        if (std::abs(M) < 1e-300) throw NumericalError("s4: Cauchy denominator vanishes (pole on the unit circle)");
        const cplx im = 1.0 / M;
        cs.invM[i] = im;
        const cplx b = ch.B(i), c = ch.C(i), p = ch.pv(i), q = ch.qv(i);
        cs.Kbc += b * c * im;
        cs.Kpc += p * c * im;
        cs.Kbq += b * q * im;
        cs.Kpq += p * q * im;
    }
    cs.den = 1.0 + cs.a * cs.Kpq;
    if (std::abs(cs.den) < 1e-12 * (1.0 + std::abs(cs.a * cs.Kpq)))
        throw NumericalError("s4: singular Woodbury denominator 1 + K(p,q)");
    return cs;
}

/// G(z) for one channel.
inline cplx response(const ChannelView& ch, cplx z) {
    const auto cs = cauchy_sums(ch, z);
    return ch.dt() * (cs.Kbc - cs.a * cs.Kpc * cs.Kbq / cs.den);
}

/// G(z_k), k = 0..n-1, z_k = exp(2 pi i k / n).
inline std::vector<cplx> frequency_kernel(const ChannelView& ch, int n) {
    require(n >= 1, "s4 frequency_kernel: n must be >= 1");
    std::vector<cplx> G(static_cast<size_t>(n));
    for (int k = 0; k < n; ++k) G[k] = response(ch, root_of_unity(k, n));
    return G;
}

/// Bidirectional real response R(k) = Re G(z_k) + Re G(z_{-k}); the spectrum of the
/// real, even kernel Re kappa_r + Re kappa_{-r}.
inline std::vector<double> real_response(const ChannelView& ch, int n) {
    const auto G = frequency_kernel(ch, n);
    std::vector<double> R(static_cast<size_t>(n));
    for (int k = 0; k < n; ++k) R[k] = G[k].real() + G[(n - k) % n].real();
    return R;
}

/// Holomorphic derivatives dG/dtheta at one z, in channel layout order (complex fields
/// give one entry per index; log_dt last, real).
inline void response_derivatives(const ChannelView& ch, cplx z, std::vector<cplx>& dG) {
    const int s = ch.s;
    const auto cs = cauchy_sums(ch, z);
    const double dt = ch.dt();
    const cplx a = cs.a, den = cs.den;
    dG.assign(static_cast<size_t>(5 * s + 1), 0.0);
    cplx dKbc_da = 0.0, dKpc_da = 0.0, dKbq_da = 0.0, dKpq_da = 0.0;
    const cplx r1 = a * cs.Kpc * cs.Kbq / (den * den);
    for (int i = 0; i < s; ++i) {
        const cplx im = cs.invM[i];
        const cplx b = ch.B(i), c = ch.C(i), p = ch.pv(i), q = ch.qv(i);
        const cplx lam = ch.lambda(i);
        // d(1/M_i)/d lambda_i = a / M_i^2
        const cplx dl = a * im * im;
        const cplx dKbc = b * c * dl, dKpc = p * c * dl, dKbq = b * q * dl, dKpq = p * q * dl;
        dG[0 * s + i] = dt * (dKbc - a * (dKpc * cs.Kbq + cs.Kpc * dKbq) / den + a * r1 * dKpq);
        dG[1 * s + i] = dt * (-a * (c * im * cs.Kbq / den - r1 * q * im));
        dG[2 * s + i] = dt * (-a * (cs.Kpc * b * im / den - r1 * p * im));
        dG[3 * s + i] = dt * (c * im - a * cs.Kpc * q * im / den);
        dG[4 * s + i] = dt * (b * im - a * cs.Kbq * p * im / den);
        // d(1/M_i)/da = lambda_i / M_i^2
        const cplx da = lam * im * im;
        dKbc_da += b * c * da;
        dKpc_da += p * c * da;
        dKbq_da += b * q * da;
        dKpq_da += p * q * da;
    }
    const cplx F = cs.Kbc - a * cs.Kpc * cs.Kbq / den;
    const cplx dF_da = dKbc_da - cs.Kpc * cs.Kbq / den - a * (dKpc_da * cs.Kbq + cs.Kpc * dKbq_da) / den +
                       a * cs.Kpc * cs.Kbq * (cs.Kpq + a * dKpq_da) / (den * den);
    // a is proportional to dt, so d/dlog_dt = dt * F + dt * a * dF/da.
    dG[5 * s] = dt * F + dt * a * dF_da;
}

/// Jacobian J(k, j) = dR(k)/dtheta_j for one channel, theta in channel layout order.
inline Eigen::MatrixXd real_response_jacobian(const ChannelView& ch, int n) {
    const int s = ch.s;
    const int P = channel_size(s);
    std::vector<std::vector<cplx>> dG(static_cast<size_t>(n));
    for (int k = 0; k < n; ++k) response_derivatives(ch, root_of_unity(k, n), dG[k]);
    Eigen::MatrixXd J(n, P);
    for (int k = 0; k < n; ++k) {
        const auto& a = dG[k];
        const auto& b = dG[(n - k) % n];
        for (int f = 0; f < 5; ++f)
            for (int i = 0; i < s; ++i) {
                const cplx g = a[f * s + i] + b[f * s + i];
                J(k, offset(static_cast<Field>(2 * f), s, i)) = g.real();
                J(k, offset(static_cast<Field>(2 * f + 1), s, i)) = -g.imag();
            }
        J(k, logdt_offset(s)) = (a[5 * s] + b[5 * s]).real();
    }
    return J;
}

/// Continuous-time operator diag(lambda) - p q^T.
inline Eigen::MatrixXcd continuous_operator(const ChannelView& ch) {
    const int s = ch.s;
    Eigen::MatrixXcd A(s, s);
    for (int i = 0; i < s; ++i)
        for (int j = 0; j < s; ++j) A(i, j) = (i == j ? ch.lambda(i) : cplx(0.0)) - ch.pv(i) * ch.qv(j);
    return A;
}

/// Poles of the bilinear-discretized system.
inline Eigen::VectorXcd discrete_poles(const ChannelView& ch) {
    Eigen::ComplexEigenSolver<Eigen::MatrixXcd> es(continuous_operator(ch));
    Eigen::VectorXcd ev = es.eigenvalues();
    const double dt = ch.dt();
    for (Eigen::Index i = 0; i < ev.size(); ++i) ev(i) = (1.0 + 0.5 * dt * ev(i)) / (1.0 - 0.5 * dt * ev(i));
    return ev;
}

/// Spectrum of the normal part of the HiPPO-LegS matrix: -1/2 + i omega_n.
inline std::vector<cplx> hippo_legs_spectrum(int s) {
    Eigen::MatrixXcd iS = Eigen::MatrixXcd::Zero(s, s);
    for (int n = 0; n < s; ++n)
        for (int k = 0; k < s; ++k) {
            if (n == k) continue;
            const double v = 0.5 * std::sqrt((2.0 * n + 1.0) * (2.0 * k + 1.0)) * (n > k ? -1.0 : 1.0);
            iS(n, k) = cplx(0.0, v);
        }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(iS);
    std::vector<cplx> out(static_cast<size_t>(s));
    // S = -i (iS): eigenvalues of S are -i mu.
    for (int i = 0; i < s; ++i) out[i] = cplx(-0.5, -es.eigenvalues()(i));
    return out;
}

/// HiPPO initialization, then shrink p, q until every discretized pole has |z| <= 1.
inline void init_channel(double* p, int s, std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    const auto lam = hippo_legs_spectrum(s);
    const double scale = 1.0 / std::sqrt(2.0 * s);
    for (int i = 0; i < s; ++i) {
        p[offset(LRE, s, i)] = lam[i].real();
        p[offset(LIM, s, i)] = lam[i].imag();
        for (Field f : {PRE, PIM, QRE, QIM, CRE, CIM}) p[offset(f, s, i)] = nd(rng) * scale;
        p[offset(BRE, s, i)] = 1.0 + 0.1 * nd(rng);
        p[offset(BIM, s, i)] = 0.1 * nd(rng);
    }
    std::uniform_real_distribution<double> ud(std::log(1e-3), std::log(1e-1));
    p[logdt_offset(s)] = ud(rng);
    for (int it = 0; it < 60; ++it) {
        Eigen::ComplexEigenSolver<Eigen::MatrixXcd> es(continuous_operator(ChannelView{p, s}));
        if (es.eigenvalues().real().maxCoeff() <= 0.0) return;
        for (Field f : {PRE, PIM, QRE, QIM})
            for (int i = 0; i < s; ++i) p[offset(f, s, i)] *= 0.7;
    }
    for (Field f : {PRE, PIM, QRE, QIM})
        for (int i = 0; i < s; ++i) p[offset(f, s, i)] = 0.0;
}

} // namespace s4
} // namespace dyson
