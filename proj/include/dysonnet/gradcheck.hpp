#pragma once

/** @file gradcheck.hpp
    @brief Central finite-difference check of the reverse-mode log-derivative.
*/

#include <algorithm>
#include <cmath>
#include <limits>

#include "network.hpp"

namespace dyson {

struct GradCheckReport {
    // max over parameters of |analytic - fd| / (rtol * max(|analytic|, |fd|) + fd_noise);
    // <= 1 means every component agrees to rtol up to the difference scheme's own error.
    double worst_ratio = 0.0;
    double worst_rel_error = 0.0;  // plain relative error at the worst index
    int worst_index = -1;
    int checked = 0;
};

/// fd_noise per component is |D(h) - D(2h)| (truncation plus rounding, measured) plus a
/// rounding floor of 4 eps |logPsi| / h.
inline GradCheckReport gradient_check(const Model& m0, const SpinConfig& s, double step = 1e-5,
                                      double rtol = 1e-5) {
    const int N = s.n();
    PreparedModel pm(m0, N);
    const auto tr = forward(pm, s);
    const auto g = grad_log_amplitude(pm, tr);
    const double eps = std::numeric_limits<double>::epsilon();
    const double floor = 4.0 * eps * (1.0 + std::abs(tr.log_psi)) / step;
    GradCheckReport rep;
    auto eval = [&](size_t i, double h) {
        Model mp = m0, mm = m0;
        mp.theta[i] += h;
        mm.theta[i] -= h;
        return (log_psi(PreparedModel(mp, N), s) - log_psi(PreparedModel(mm, N), s)) / (2.0 * h);
    };
    for (size_t i = 0; i < m0.theta.size(); ++i) {
        const cplx d1 = eval(i, step), d2 = eval(i, 2.0 * step);
        const cplx an(g.re[i], g.im[i]);
        for (int part = 0; part < 2; ++part) {
            const double a = part == 0 ? an.real() : an.imag();
            const double f = part == 0 ? d1.real() : d1.imag();
            const double f2 = part == 0 ? d2.real() : d2.imag();
            const double noise = std::abs(f - f2) + floor;
            const double ratio = std::abs(a - f) / (rtol * std::max(std::abs(a), std::abs(f)) + noise);
            if (ratio > rep.worst_ratio) {
                rep.worst_ratio = ratio;
                rep.worst_index = static_cast<int>(i);
                rep.worst_rel_error = std::abs(a - f) / std::max({std::abs(a), std::abs(f), 1e-300});
            }
        }
        ++rep.checked;
    }
    return rep;
}

} // namespace dyson
