#pragma once

/** @file spin_systems.hpp
    @brief Spin configurations, periodic geometry and the two benchmark chains
           (long-range transverse-field Ising, J1-J2 Heisenberg).
*/

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "errors.hpp"

namespace dyson {

class SpinConfig {
public:
    SpinConfig() = default;
    explicit SpinConfig(int n, int8_t value = 1) : s_(static_cast<size_t>(n), value) {
        require(n >= 2, "SpinConfig: n must be >= 2");
        require(value == 1 || value == -1, "SpinConfig: spins must be +-1");
    }
    explicit SpinConfig(std::vector<int8_t> spins) : s_(std::move(spins)) {
        require(s_.size() >= 2, "SpinConfig: n must be >= 2");
        for (int8_t v : s_) require(v == 1 || v == -1, "SpinConfig: spins must be +-1");
    }

    static SpinConfig random(int n, std::mt19937_64& rng) {
        SpinConfig c(n);
        for (auto& v : c.s_) v = (rng() & 1u) ? int8_t(1) : int8_t(-1);
        return c;
    }

    /// Random configuration with zero total magnetization (n even).
    static SpinConfig random_zero_magnetization(int n, std::mt19937_64& rng) {
        require(n % 2 == 0, "zero-magnetization config needs even n");
        std::vector<int8_t> v(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) v[i] = i < n / 2 ? 1 : -1;
        std::shuffle(v.begin(), v.end(), rng);
        return SpinConfig(std::move(v));
    }

    /// Basis index convention shared with the ED oracle: bit i set <=> spin i is -1.
    static SpinConfig from_index(uint64_t idx, int n) {
        std::vector<int8_t> v(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) v[i] = ((idx >> i) & 1u) ? int8_t(-1) : int8_t(1);
        return SpinConfig(std::move(v));
    }
    uint64_t to_index() const {
        uint64_t idx = 0;
        for (int i = 0; i < n(); ++i)
            if (s_[i] < 0) idx |= (uint64_t(1) << i);
        return idx;
    }

    int n() const { return static_cast<int>(s_.size()); }
    int8_t operator[](int i) const { return s_[static_cast<size_t>(i)]; }
    const std::vector<int8_t>& spins() const { return s_; }
    void flip(int i) {
        require(i >= 0 && i < n(), "SpinConfig::flip: index out of range");
        s_[static_cast<size_t>(i)] = static_cast<int8_t>(-s_[static_cast<size_t>(i)]);
    }
    void invert() {
        for (auto& v : s_) v = static_cast<int8_t>(-v);
    }
    int magnetization() const {
        int m = 0;
        for (int8_t v : s_) m += v;
        return m;
    }
    uint64_t hash() const {
        uint64_t h = 1469598103934665603ull;
        for (int8_t v : s_) {
            h ^= static_cast<uint64_t>(v > 0 ? 1 : 2);
            h *= 1099511628211ull;
        }
        return h;
    }
    bool operator==(const SpinConfig& o) const { return s_ == o.s_; }

private:
    std::vector<int8_t> s_;
};

inline int periodic_distance(int i, int j, int n) {
    if (n < 1 || i < 0 || j < 0 || i >= n || j >= n)
        throw DomainError("periodic_distance: index out of range");
    int d = std::abs(i - j);
    return std::min(d, n - d);
}

inline int wrap(int i, int n) {
    int r = i % n;
    return r < 0 ? r + n : r;
}

/// Kac factor 2 * sum_{r=1}^{floor(n/2)} r^-alpha.
inline double kac_norm(double alpha, int n) {
    require(n >= 2, "kac_norm: n must be >= 2");
    double s = 0.0;
    for (int r = 1; r <= n / 2; ++r) s += std::pow(static_cast<double>(r), -alpha);
    return 2.0 * s;
}

enum class ModelKind { TFIM_LR, J1J2 };

struct HamiltonianSpec {
    ModelKind kind = ModelKind::TFIM_LR;
    double J = 1.0;          // TFIM coupling, or J1 for the Heisenberg chain
    double h = 1.0;          // transverse field (TFIM)
    double alpha = 6.0;      // decay exponent (TFIM)
    double j2_over_j1 = 0.0; // frustration (J1J2)
    int n = 14;

    void validate() const {
        require(n >= 2, "HamiltonianSpec: n must be >= 2");
        if (kind == ModelKind::TFIM_LR) require(alpha >= 0.0, "HamiltonianSpec: alpha must be >= 0");
        else require(j2_over_j1 >= 0.0 && j2_over_j1 <= 1.0, "HamiltonianSpec: J2/J1 must lie in [0,1]");
    }
    double J2() const { return J * j2_over_j1; }
    bool conserves_sz() const { return kind == ModelKind::J1J2; }
};

/// One term of H acting on a basis state. count == 0 marks the diagonal entry.
struct ConnectedElement {
    int sites[2] = {-1, -1};
    int count = 0;
    double amplitude = 0.0;
};

/// Pairwise zz couplings of the long-range TFIM, c(r) = -J r^-alpha / N_alpha,
/// applied to every ordered pair i != j.
inline std::vector<double> tfim_couplings(const HamiltonianSpec& H) {
    std::vector<double> c(static_cast<size_t>(H.n / 2 + 1), 0.0);
    const double norm = kac_norm(H.alpha, H.n);
    for (int r = 1; r <= H.n / 2; ++r) c[r] = -H.J * std::pow(static_cast<double>(r), -H.alpha) / norm;
    return c;
}

/// Diagonal energy with O(N) incremental updates per flip.
class DiagonalTracker {
public:
    DiagonalTracker(const HamiltonianSpec& H, const SpinConfig& s) : H_(H), s_(s) {
        require(H.n == s.n(), "DiagonalTracker: size mismatch");
        const int n = H.n;
        if (H.kind == ModelKind::TFIM_LR) {
            c_ = tfim_couplings(H);
        } else {
            c_.assign(static_cast<size_t>(n / 2 + 1), 0.0);
        }
        field_.assign(static_cast<size_t>(n), 0.0);
        for (int i = 0; i < n; ++i) field_[i] = local_field(i);
        energy_ = 0.0;
        for (int i = 0; i < n; ++i) energy_ += s_[i] * field_[i];
        energy_ *= 0.5;
    }

    double energy() const { return energy_; }
    const SpinConfig& config() const { return s_; }

    void flip(int k) {
        const int n = H_.n;
        energy_ -= 2.0 * s_[k] * field_[k];
        const double dk = -2.0 * s_[k];
        for (int i = 0; i < n; ++i)
            if (i != k) field_[i] += coupling(i, k) * dk;
        s_.flip(k);
    }

private:
    // Symmetric pair weight in E = 1/2 sum_{i != j} w_ij s_i s_j.
    double coupling(int i, int j) const {
        const int n = H_.n;
        if (H_.kind == ModelKind::TFIM_LR) return 2.0 * c_[periodic_distance(i, j, n)];
        // Heisenberg zz: J1/4 s_i s_{i+1} + J2/4 s_i s_{i+2}, literal bond sums over i.
        double w = 0.0;
        if (wrap(i + 1, n) == j) w += H_.J / 4.0;
        if (wrap(j + 1, n) == i) w += H_.J / 4.0;
        if (wrap(i + 2, n) == j) w += H_.J2() / 4.0;
        if (wrap(j + 2, n) == i) w += H_.J2() / 4.0;
        return w;
    }
    double local_field(int i) const {
        double f = 0.0;
        for (int j = 0; j < H_.n; ++j)
            if (j != i) f += coupling(i, j) * s_[j];
        return f;
    }

    HamiltonianSpec H_;
    SpinConfig s_;
    std::vector<double> c_, field_;
    double energy_ = 0.0;
};

inline double diagonal_energy(const HamiltonianSpec& H, const SpinConfig& s) {
    require(H.n == s.n(), "diagonal_energy: size mismatch");
    const int n = H.n;
    double e = 0.0;
    if (H.kind == ModelKind::TFIM_LR) {
        const auto c = tfim_couplings(H);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                if (i != j) e += c[periodic_distance(i, j, n)] * s[i] * s[j];
    } else {
        for (int i = 0; i < n; ++i) {
            e += 0.25 * H.J * s[i] * s[wrap(i + 1, n)];
            e += 0.25 * H.J2() * s[i] * s[wrap(i + 2, n)];
        }
    }
    return e;
}

inline std::vector<ConnectedElement> connected_elements(const HamiltonianSpec& H, const SpinConfig& s) {
    require(H.n == s.n(), "connected_elements: size mismatch");
    const int n = H.n;
    std::vector<ConnectedElement> out;
    out.reserve(static_cast<size_t>(2 * n + 1));
    ConnectedElement diag;
    diag.amplitude = diagonal_energy(H, s);
    out.push_back(diag);
    if (H.kind == ModelKind::TFIM_LR) {
        if (H.h != 0.0)
            for (int i = 0; i < n; ++i) {
                ConnectedElement e;
                e.sites[0] = i;
                e.count = 1;
                e.amplitude = -H.h;
                out.push_back(e);
            }
    } else {
        auto bonds = [&](int step, double J) {
            if (J == 0.0) return;
            for (int i = 0; i < n; ++i) {
                const int j = wrap(i + step, n);
                if (s[i] != s[j]) {
                    ConnectedElement e;
                    e.sites[0] = i;
                    e.sites[1] = j;
                    e.count = 2;
                    e.amplitude = 0.5 * J;
                    out.push_back(e);
                }
            }
        };
        bonds(1, H.J);
        bonds(2, H.J2());
    }
    return out;
}

/// Ground-state energy of the periodic nearest-neighbour chain
/// H = -J sum s^z_i s^z_{i+1} - h sum s^x_i via Jordan-Wigner fermions
/// (even-parity sector, antiperiodic momenta). Exact for even n.
inline double jw_exact_energy(int n, double h, double J) {
    require(n >= 2, "jw_exact_energy: n must be >= 2");
    double e = 0.0;
    for (int m = 0; m < n; ++m) {
        const double k = std::numbers::pi * (2.0 * m + 1.0) / n;
        e -= std::sqrt(std::max(0.0, J * J + h * h - 2.0 * J * h * std::cos(k)));
    }
    return e;
}

} // namespace dyson
