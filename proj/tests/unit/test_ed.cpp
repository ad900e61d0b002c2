#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "dysonnet/ed.hpp"

using namespace dyson;

namespace {

Eigen::MatrixXd kron(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    Eigen::MatrixXd r(a.rows() * b.rows(), a.cols() * b.cols());
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) r.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    return r;
}

// Operator acting with op on `site` (site 0 = least significant bit).
Eigen::MatrixXd site_op(const Eigen::MatrixXd& op, int site, int n) {
    Eigen::MatrixXd r = Eigen::MatrixXd::Identity(1, 1);
    for (int s = n - 1; s >= 0; --s) r = kron(r, s == site ? op : Eigen::MatrixXd::Identity(2, 2));
    return r;
}

Eigen::MatrixXd pauli_z() {
    Eigen::MatrixXd z(2, 2);
    z << 1, 0, 0, -1;  // bit 0 = spin up
    return z;
}
Eigen::MatrixXd pauli_x() {
    Eigen::MatrixXd x(2, 2);
    x << 0, 1, 1, 0;
    return x;
}

std::vector<double> random_vec(size_t dim, std::mt19937_64& rng) {
    std::normal_distribution<double> nd;
    std::vector<double> v(dim);
    for (auto& x : v) x = nd(rng);
    return v;
}

} // namespace

TEST(ApplyHamiltonian, TfimMatchesKroneckerConstruction) {
    const int n = 4;
    HamiltonianSpec H{ModelKind::TFIM_LR, 0.8, 0.6, 1.5, 0.0, n};
    const int dim = 1 << n;
    Eigen::MatrixXd ref = Eigen::MatrixXd::Zero(dim, dim);
    const double norm = kac_norm(H.alpha, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j)
            if (i != j)
                ref -= H.J / norm * std::pow(periodic_distance(i, j, n), -H.alpha) * site_op(pauli_z(), i, n) *
                       site_op(pauli_z(), j, n);
        ref -= H.h * site_op(pauli_x(), i, n);
    }
    EXPECT_LT((EdOperator(H).dense() - ref).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(ApplyHamiltonian, HeisenbergMatchesKroneckerConstruction) {
    const int n = 5;
    HamiltonianSpec H{ModelKind::J1J2, 1.0, 0.0, 0.0, 0.3, n};
    const int dim = 1 << n;
    Eigen::MatrixXd sx = 0.5 * pauli_x(), sz = 0.5 * pauli_z();
    Eigen::MatrixXcd sy(2, 2);
    sy << 0, std::complex<double>(0, -0.5), std::complex<double>(0, 0.5), 0;
    Eigen::MatrixXcd ref = Eigen::MatrixXcd::Zero(dim, dim);
    auto cop = [&](const Eigen::MatrixXcd& op, int site) {
        Eigen::MatrixXcd r = Eigen::MatrixXcd::Identity(1, 1);
        for (int s = n - 1; s >= 0; --s) {
            Eigen::MatrixXcd f = s == site ? op : Eigen::MatrixXcd::Identity(2, 2);
            Eigen::MatrixXcd k(r.rows() * 2, r.cols() * 2);
            for (int a = 0; a < r.rows(); ++a)
                for (int b = 0; b < r.cols(); ++b) k.block(a * 2, b * 2, 2, 2) = r(a, b) * f;
            r = k;
        }
        return r;
    };
    for (int i = 0; i < n; ++i)
        for (int step : {1, 2}) {
            const int j = (i + step) % n;
            const double J = step == 1 ? H.J : H.J2();
            ref += J * (cop(sx.cast<std::complex<double>>(), i) * cop(sx.cast<std::complex<double>>(), j) +
                        cop(sy, i) * cop(sy, j) +
                        cop(sz.cast<std::complex<double>>(), i) * cop(sz.cast<std::complex<double>>(), j));
        }
    EXPECT_LT(ref.imag().cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LT((EdOperator(H).dense() - ref.real()).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(ApplyHamiltonian, DiagonalWhenFieldZero) {
    HamiltonianSpec H{ModelKind::TFIM_LR, 1.0, 0.0, 2.0, 0.0, 6};
    std::vector<double> e(64, 0.0);
    e[37] = 1.0;
    auto r = apply_hamiltonian(H, e);
    for (int b = 0; b < 64; ++b)
        if (b != 37) { EXPECT_EQ(r[b], 0.0); }
    EXPECT_NEAR(r[37], diagonal_energy(H, SpinConfig::from_index(37, 6)), 1e-14);
}

TEST(ApplyHamiltonian, Hermitian) {
    std::mt19937_64 rng(5);
    for (auto H : {HamiltonianSpec{ModelKind::TFIM_LR, 1.2, 0.7, 1.0, 0.0, 9},
                   HamiltonianSpec{ModelKind::J1J2, 1.0, 0.0, 0.0, 0.5, 9}}) {
        EdOperator op(H);
        for (int t = 0; t < 5; ++t) {
            auto u = random_vec(op.dim(), rng), v = random_vec(op.dim(), rng);
            const double a = detail::dot(u, op.apply(v)), b = detail::dot(op.apply(u), v);
            EXPECT_NEAR(a, b, 1e-12 * (1 + std::abs(a)));
        }
    }
}

TEST(ApplyHamiltonian, HeisenbergStaysInSzSector) {
    const int n = 8;
    HamiltonianSpec H{ModelKind::J1J2, 1.0, 0.0, 0.0, 0.5, n};
    std::mt19937_64 rng(2);
    std::vector<double> v(1u << n, 0.0);
    for (uint64_t b = 0; b < v.size(); ++b)
        if (SpinConfig::from_index(b, n).magnetization() == 2) v[b] = std::normal_distribution<double>()(rng);
    auto r = apply_hamiltonian(H, v);
    for (uint64_t b = 0; b < v.size(); ++b)
        if (SpinConfig::from_index(b, n).magnetization() != 2) { EXPECT_EQ(r[b], 0.0); }
}

TEST(ApplyHamiltonian, ResourceGuard) {
    HamiltonianSpec H{ModelKind::TFIM_LR, 1.0, 1.0, 2.0, 0.0, 21};
    EXPECT_THROW(EdOperator{H}, ResourceError);
}

TEST(GroundStates, LanczosAgreesWithDense) {
    HamiltonianSpec H{ModelKind::TFIM_LR, 0.9, 1.1, 2.5, 0.0, 10};
    auto d = ground_states(H, 3);
    auto l = ground_states(H, 3, true);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(d.energies[i], l.energies[i], 1e-9);
    for (int i = 0; i < 3; ++i) {
        EXPECT_LT(l.residuals[i], 1e-8);
        for (int j = 0; j < 3; ++j)
            EXPECT_NEAR(detail::dot(l.vectors[i], l.vectors[j]), i == j ? 1.0 : 0.0, 1e-10);
    }
}

TEST(GroundStates, MajumdarGhoshTwofoldDegenerate) {
    HamiltonianSpec H{ModelKind::J1J2, 1.0, 0.0, 0.0, 0.5, 12};
    auto gs = ground_states(H, 3);
    EXPECT_NEAR(gs.energies[0], -3.0 * 12 / 8.0, 1e-9);
    EXPECT_EQ(gs.ground_group().size(), 2u);
    EXPECT_GT(gs.energies[2] - gs.energies[0], 1e-3);
}

TEST(GroundStates, RejectsSingleSpin) {
    HamiltonianSpec H{ModelKind::TFIM_LR, 1.0, 1.0, 2.0, 0.0, 1};
    EXPECT_THROW(ground_states(H, 1), DomainError);
}

TEST(Fidelity, Examples) {
    HamiltonianSpec H{ModelKind::TFIM_LR, 0.5, 1.0, 3.0, 0.0, 4};
    auto gs = ground_states(H, 2);
    EXPECT_NEAR(fidelity_subspace(gs.vectors[0], gs), 1.0, 1e-12);
    EXPECT_NEAR(fidelity_subspace(gs.vectors[1], gs), 0.0, 1e-12);
    std::mt19937_64 rng(9);
    auto v = random_vec(16, rng);
    const double nrm = std::sqrt(detail::dot(v, v));
    for (auto& x : v) x /= nrm;
    double brute = 0.0;
    for (int i : gs.ground_group()) brute += std::pow(detail::dot(gs.vectors[i], v), 2);
    EXPECT_NEAR(fidelity_subspace(v, gs), brute, 1e-14);
}
