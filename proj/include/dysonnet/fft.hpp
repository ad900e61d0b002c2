#pragma once

/** @file fft.hpp
    @brief Thin wrappers over Eigen's FFT module plus circular convolution helpers.

    Convention: forward X(k) = sum_j x_j e^{-2 pi i jk/n}, inverse carries the 1/n.
*/

#include <complex>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "errors.hpp"

namespace dyson::fft {

using cplx = std::complex<double>;
using cvec = std::vector<cplx>;

inline Eigen::FFT<double>& engine() {
    thread_local Eigen::FFT<double> f;
    return f;
}

inline void forward(const std::vector<double>& x, cvec& X) {
    X.resize(x.size());
    engine().fwd(X, x);
}

inline void forward(const cvec& x, cvec& X) {
    X.resize(x.size());
    engine().fwd(X, x);
}

inline void inverse(const cvec& X, cvec& x) {
    x.resize(X.size());
    engine().inv(x, X);
}

/// Real part of the inverse transform.
inline void inverse_real(const cvec& X, std::vector<double>& x) {
    thread_local cvec tmp;
    inverse(X, tmp);
    x.resize(X.size());
    for (size_t i = 0; i < X.size(); ++i) x[i] = tmp[i].real();
}

/// y_j = sum_r g_r x_{j-r} (indices mod n), computed directly. O(n^2).
inline void circular_convolve_direct(const std::vector<double>& g, const double* x, double* y, int n, int stride = 1) {
    for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int r = 0; r < n; ++r) {
            int src = j - r;
            if (src < 0) src += n;
            acc += g[static_cast<size_t>(r)] * x[static_cast<size_t>(src) * stride];
        }
        y[static_cast<size_t>(j) * stride] = acc;
    }
}

/// Real-space kernel from a real, even frequency response R(k).
inline std::vector<double> kernel_from_response(const std::vector<double>& R) {
    cvec X(R.begin(), R.end());
    std::vector<double> g;
    inverse_real(X, g);
    return g;
}

} // namespace dyson::fft
