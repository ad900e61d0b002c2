#pragma once

/** @file ed.hpp
    @brief Exact diagonalization for small chains: matrix-free H*v, Lanczos with
           full reorthogonalization, dense fallback and subspace fidelities.
*/

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "errors.hpp"
#include "spin_systems.hpp"

namespace dyson {

inline constexpr int kMaxEdSites = 20;

/// Matrix-free Hamiltonian on the full 2^n basis (bit i set <=> spin i down).
class EdOperator {
public:
    explicit EdOperator(const HamiltonianSpec& H) : H_(H) {
        H.validate();
        if (H.n > kMaxEdSites) throw ResourceError("ED: n exceeds the 2^20 basis guard");
        const int n = H.n;
        dim_ = uint64_t(1) << n;
        diag_.resize(dim_);
        for (uint64_t b = 0; b < dim_; ++b) diag_[b] = diagonal_energy(H, SpinConfig::from_index(b, n));
        if (H.kind == ModelKind::J1J2) {
            auto add = [&](int step, double J) {
                if (J == 0.0) return;
                for (int i = 0; i < n; ++i) bonds_.push_back({i, wrap(i + step, n), 0.5 * J});
            };
            add(1, H.J);
            add(2, H.J2());
        }
    }

    uint64_t dim() const { return dim_; }
    const HamiltonianSpec& spec() const { return H_; }
    const std::vector<double>& diagonal() const { return diag_; }

    void apply(const double* v, double* out) const {
        const int n = H_.n;
        for (uint64_t b = 0; b < dim_; ++b) out[b] = diag_[b] * v[b];
        if (H_.kind == ModelKind::TFIM_LR) {
            if (H_.h == 0.0) return;
            for (uint64_t b = 0; b < dim_; ++b) {
                double acc = 0.0;
                for (int i = 0; i < n; ++i) acc += v[b ^ (uint64_t(1) << i)];
                out[b] -= H_.h * acc;
            }
        } else {
            for (uint64_t b = 0; b < dim_; ++b) {
                double acc = 0.0;
                for (const auto& bd : bonds_) {
                    const uint64_t mi = uint64_t(1) << bd.i, mj = uint64_t(1) << bd.j;
                    if (((b & mi) != 0) != ((b & mj) != 0)) acc += bd.amp * v[b ^ mi ^ mj];
                }
                out[b] += acc;
            }
        }
    }

    std::vector<double> apply(const std::vector<double>& v) const {
        if (v.size() != dim_) throw DomainError("EdOperator::apply: dimension mismatch");
        std::vector<double> out(dim_);
        apply(v.data(), out.data());
        return out;
    }

    Eigen::MatrixXd dense() const {
        if (H_.n > 12) throw ResourceError("ED: dense matrix limited to n <= 12");
        Eigen::MatrixXd M(dim_, dim_);
        std::vector<double> e(dim_, 0.0), col(dim_);
        for (uint64_t b = 0; b < dim_; ++b) {
            e[b] = 1.0;
            apply(e.data(), col.data());
            for (uint64_t a = 0; a < dim_; ++a) M(a, b) = col[a];
            e[b] = 0.0;
        }
        return M;
    }

private:
    struct Bond {
        int i, j;
        double amp;
    };
    HamiltonianSpec H_;
    uint64_t dim_ = 0;
    std::vector<double> diag_;
    std::vector<Bond> bonds_;
};

inline std::vector<double> apply_hamiltonian(const HamiltonianSpec& H, const std::vector<double>& v) {
    return EdOperator(H).apply(v);
}

struct GroundStateResult {
    std::vector<double> energies;              // ascending
    std::vector<std::vector<double>> vectors;  // full-basis eigenvectors
    std::vector<double> residuals;
    double degeneracy_threshold = 1e-6;

    /// Indices of the states degenerate with the ground state.
    std::vector<int> ground_group() const {
        std::vector<int> g;
        for (size_t i = 0; i < energies.size(); ++i)
            if (energies[i] - energies[0] < degeneracy_threshold) g.push_back(static_cast<int>(i));
        return g;
    }
    /// Consecutive groups whose internal splitting is below the threshold.
    std::vector<std::vector<int>> degeneracy_groups() const {
        std::vector<std::vector<int>> groups;
        for (size_t i = 0; i < energies.size(); ++i) {
            if (groups.empty() || energies[i] - energies[groups.back().front()] >= degeneracy_threshold)
                groups.push_back({});
            groups.back().push_back(static_cast<int>(i));
        }
        return groups;
    }
};

namespace detail {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline void axpy(double a, const std::vector<double>& x, std::vector<double>& y) {
    for (size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

// Gram-Schmidt twice against a set of orthonormal vectors.
inline void orthogonalize(std::vector<double>& v, const std::vector<std::vector<double>>& basis) {
    for (int pass = 0; pass < 2; ++pass)
        for (const auto& q : basis) axpy(-dot(q, v), q, v);
}

} // namespace detail

/// Lowest eigenpair of H restricted to the complement of `deflate`.
inline std::pair<double, std::vector<double>> lanczos_lowest(const EdOperator& op,
                                                             const std::vector<std::vector<double>>& deflate,
                                                             uint64_t seed, int max_steps = 400) {
    const size_t dim = op.dim();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::vector<double> v(dim);
    for (auto& x : v) x = nd(rng);
    detail::orthogonalize(v, deflate);
    double nrm = std::sqrt(detail::dot(v, v));
    for (auto& x : v) x /= nrm;

    const int m_cap = static_cast<int>(std::min<uint64_t>(static_cast<uint64_t>(max_steps), dim - deflate.size()));
    std::vector<std::vector<double>> Q;
    std::vector<double> alpha, beta;
    std::vector<double> w(dim);
    Eigen::VectorXd ritz;
    for (int m = 0; m < m_cap; ++m) {
        Q.push_back(v);
        op.apply(v.data(), w.data());
        const double a = detail::dot(v, w);
        alpha.push_back(a);
        detail::orthogonalize(w, deflate);
        detail::orthogonalize(w, Q);
        const double b = std::sqrt(detail::dot(w, w));

        const int k = static_cast<int>(alpha.size());
        const bool last = (m + 1 == m_cap) || b < 1e-12;
        if (!last && k % 8 != 0) {
            beta.push_back(b);
            for (size_t i = 0; i < dim; ++i) v[i] = w[i] / b;
            continue;
        }
        Eigen::MatrixXd T = Eigen::MatrixXd::Zero(k, k);
        for (int i = 0; i < k; ++i) {
            T(i, i) = alpha[i];
            if (i + 1 < k) T(i, i + 1) = T(i + 1, i) = beta[i];
        }
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(T);
        ritz = es.eigenvectors().col(0);
        const double resid = std::abs(b * ritz(k - 1));
        if (b < 1e-12 || resid < 1e-10) break;
        beta.push_back(b);
        for (size_t i = 0; i < dim; ++i) v[i] = w[i] / b;
    }
    std::vector<double> x(dim, 0.0);
    for (size_t j = 0; j < Q.size(); ++j) detail::axpy(ritz(static_cast<Eigen::Index>(j)), Q[j], x);
    detail::orthogonalize(x, deflate);
    nrm = std::sqrt(detail::dot(x, x));
    for (auto& e : x) e /= nrm;
    std::vector<double> hx = op.apply(x);
    return {detail::dot(x, hx), x};
}

/// k lowest eigenpairs. Dense diagonalization for n <= 10, Lanczos with
/// deflation otherwise (deflation recovers exactly degenerate multiplets).
inline GroundStateResult ground_states(const HamiltonianSpec& H, int k, bool force_lanczos = false) {
    H.validate();
    if (H.n < 2) throw DomainError("ground_states: need at least two sites");
    EdOperator op(H);
    if (k < 1 || static_cast<uint64_t>(k) > op.dim()) throw DomainError("ground_states: invalid k");
    GroundStateResult res;
    if (H.n <= 10 && !force_lanczos) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(op.dense());
        for (int i = 0; i < k; ++i) {
            res.energies.push_back(es.eigenvalues()(i));
            Eigen::VectorXd c = es.eigenvectors().col(i);
            res.vectors.emplace_back(c.data(), c.data() + c.size());
        }
    } else {
        for (int i = 0; i < k; ++i) {
            auto [e, x] = lanczos_lowest(op, res.vectors, 1234 + 17 * static_cast<uint64_t>(i));
            res.energies.push_back(e);
            res.vectors.push_back(std::move(x));
        }
        // Deflated runs are monotone in exact arithmetic; sort to be safe.
        std::vector<int> order(static_cast<size_t>(k));
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int a, int b) { return res.energies[a] < res.energies[b]; });
        GroundStateResult sorted;
        for (int i : order) {
            sorted.energies.push_back(res.energies[i]);
            sorted.vectors.push_back(std::move(res.vectors[i]));
        }
        res = std::move(sorted);
    }
    for (int i = 0; i < k; ++i) {
        auto hv = op.apply(res.vectors[i]);
        detail::axpy(-res.energies[i], res.vectors[i], hv);
        res.residuals.push_back(std::sqrt(detail::dot(hv, hv)));
        if (res.residuals.back() > 1e-8)
            throw NumericalError("ground_states: eigenpair residual " + std::to_string(res.residuals.back()) +
                                 " exceeds 1e-8");
    }
    return res;
}

/// Sum of squared overlaps of a normalized amplitude table with the ground-state
/// degeneracy group.
inline double fidelity_subspace(const std::vector<std::complex<double>>& psi, const GroundStateResult& gs) {
    double f = 0.0;
    for (int i : gs.ground_group()) {
        const auto& v = gs.vectors[i];
        if (v.size() != psi.size()) throw DomainError("fidelity_subspace: dimension mismatch");
        std::complex<double> ov = 0.0;
        for (size_t b = 0; b < v.size(); ++b) ov += v[b] * psi[b];
        f += std::norm(ov);
    }
    return f;
}

inline double fidelity_subspace(const std::vector<double>& psi, const GroundStateResult& gs) {
    std::vector<std::complex<double>> c(psi.begin(), psi.end());
    return fidelity_subspace(c, gs);
}

} // namespace dyson
