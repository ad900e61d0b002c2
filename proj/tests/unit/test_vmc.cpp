#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dysonnet/vmc.hpp"
#include "model_fixtures.hpp"

using namespace dyson;
using namespace dyson::fixtures;

namespace {

HamiltonianSpec tfim(int n, double J, double h = 1.0, double alpha = 6.0) {
    HamiltonianSpec H;
    H.kind = ModelKind::TFIM_LR;
    H.n = n;
    H.J = J;
    H.h = h;
    H.alpha = alpha;
    return H;
}

HamiltonianSpec j1j2(int n, double j2) {
    HamiltonianSpec H;
    H.kind = ModelKind::J1J2;
    H.n = n;
    H.J = 1.0;
    H.j2_over_j1 = j2;
    return H;
}

// (H psi)(sigma) / psi(sigma) from the full-basis matrix-free Hamiltonian.
cplx hpsi_ratio(const HamiltonianSpec& H, const std::vector<cplx>& psi, uint64_t idx) {
    std::vector<double> re(psi.size()), im(psi.size());
    for (size_t i = 0; i < psi.size(); ++i) {
        re[i] = psi[i].real();
        im[i] = psi[i].imag();
    }
    const auto hr = apply_hamiltonian(H, re), hi = apply_hamiltonian(H, im);
    return cplx(hr[idx], hi[idx]) / psi[idx];
}

TrainConfig tiny_train(int iterations, uint64_t seed = 3) {
    TrainConfig tc;
    tc.hamiltonian = tfim(8, 0.5);
    tc.model = small_config(1, 2);
    tc.sampling.chains = 4;
    tc.sampling.samples = 32;
    tc.optimizer.iterations = iterations;
    tc.optimizer.warmup = 2;
    tc.optimizer.peak_lr = 0.05;
    tc.seed = seed;
    return tc;
}

} // namespace

// ---- local estimator ----------------------------------------------------------------------

TEST(LocalEstimator, ConstantAmplitudeGivesMinusHN) {
    ModelConfig c = small_config(2, 3);
    Model m = init_model(c, 1);
    for (int i = 0; i < c.d * c.d_out; ++i) m.theta[m.layout.A + i] = 0.0;
    const int N = 12;
    PreparedModel pm(m, N);
    const LocalEstimator est(tfim(N, 0.0, 0.7), pm);
    std::mt19937_64 rng(2);
    for (int t = 0; t < 5; ++t) EXPECT_NEAR(est(SpinConfig::random(N, rng)).real(), -0.7 * N, 1e-12);
}

TEST(LocalEstimator, MatchesMatrixFreeHamiltonianOnTable) {
    const int N = 12;
    for (bool cplx_out : {false, true}) {
        ModelConfig c = small_config(2, 3);
        c.complex_readout = cplx_out;
        PreparedModel pm(random_model(c, 5), N);
        const auto H = tfim(N, 0.8, 0.6, 2.0);
        const LocalEstimator est(H, pm);
        const auto psi = amplitude_table(pm);
        std::mt19937_64 rng(8);
        for (int t = 0; t < 20; ++t) {
            const auto s = SpinConfig::random(N, rng);
            const cplx ref = hpsi_ratio(H, psi, s.to_index());
            EXPECT_LT(std::abs(est(s) - ref), 1e-9 * std::max(1.0, std::abs(ref)));
        }
    }
}

TEST(LocalEstimator, MarshallSignMatchesSignedTable) {
    const int N = 12;
    PreparedModel pm(random_model(small_config(2, 3), 6), N);
    const auto H = j1j2(N, 0.3);
    EstimatorOptions eo;
    eo.marshall = true;
    const LocalEstimator est(H, pm, eo);
    const auto psi = amplitude_table(pm, true, true);
    std::mt19937_64 rng(9);
    for (int t = 0; t < 20; ++t) {
        const auto s = SpinConfig::random_zero_magnetization(N, rng);
        const cplx ref = hpsi_ratio(H, psi, s.to_index());
        EXPECT_LT(std::abs(est(s) - ref), 1e-9 * std::max(1.0, std::abs(ref)));
        EXPECT_LT(std::abs(local_energy_table(H, psi, s) - ref), 1e-9 * std::max(1.0, std::abs(ref)));
    }
}

TEST(LocalEstimator, AbacusPathEqualsFullForwardPath) {
    const int N = 64;
    std::mt19937_64 rng(10);
    for (int kind = 0; kind < 2; ++kind) {
        PreparedModel pm(random_model(small_config(2, 3), 11 + kind), N);
        const auto H = kind == 0 ? tfim(N, 1.0, 0.9, 1.5) : j1j2(N, 0.5);
        EstimatorOptions eo;
        eo.use_abacus = true;
        eo.marshall = kind == 1;
        const LocalEstimator est(H, pm, eo);
        ASSERT_TRUE(est.uses_abacus());
        for (int t = 0; t < 5; ++t) {
            const auto s = kind == 0 ? SpinConfig::random(N, rng) : SpinConfig::random_zero_magnetization(N, rng);
            const cplx a = est.via_abacus(s), f = est.via_forward(s);
            EXPECT_LT(std::abs(a - f), 1e-8 * std::abs(f));
        }
    }
}

TEST(LocalEstimator, ExactEigenstateHasZeroVariance) {
    const int N = 10;
    for (const auto& H : {tfim(N, 0.9, 1.0, 3.0), j1j2(N, 0.2)}) {
        const auto gs = ground_states(H, 1);
        std::vector<cplx> psi(gs.vectors[0].begin(), gs.vectors[0].end());
        std::vector<cplx> el;
        for (uint64_t b = 0; b < psi.size(); ++b) {
            if (std::abs(psi[b]) <= 1e-12) continue;
            const cplx e = local_energy_table(H, psi, SpinConfig::from_index(b, N));
            EXPECT_NEAR(e.real(), gs.energies[0], 1e-8);
            el.push_back(e);
        }
        EXPECT_LT(estimate_energy(el, N).variance, 1e-8);
    }
}

TEST(LocalEstimator, RejectsMismatchedSizes) {
    PreparedModel pm(init_model(small_config(), 1), 12);
    EXPECT_THROW(LocalEstimator(tfim(10, 1.0), pm), DomainError);
    PreparedModel odd(init_model(small_config(), 1), 14);
    EstimatorOptions eo;
    eo.marshall = true;
    EXPECT_NO_THROW(LocalEstimator(j1j2(14, 0.1), odd, eo));
}

// ---- SR -----------------------------------------------------------------------------------

TEST(SR, ConstantEnergyGivesZeroStep) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd O(20, 3);
    for (int i = 0; i < O.size(); ++i) O.data()[i] = nd(rng);
    std::vector<cplx> e(20, cplx(-3.0, 0.0));
    const auto sol = sr_update(O, Eigen::MatrixXd(), e, 1e-3, 0.1);
    EXPECT_EQ(sol.delta.norm(), 0.0);
}

TEST(SR, TwoParameterClosedForm) {
    // rows: samples; hand-solvable 2x2 system via Cramer's rule
    Eigen::MatrixXd O(4, 2);
    O << 1, 0, 0, 1, -1, 0, 0, -1;
    const std::vector<cplx> e = {2.0, 1.0, -2.0, 3.0};
    // centered O equals O (zero column means); mean E = 1, eps = (1, 0, -3, 2)
    // S = O^T O / 4 = diag(0.5, 0.5); F = O^T eps / 4 = ((1 + 3) / 4, (0 - 2) / 4) = (1, -0.5)
    const double shift = 0.1, lr = 0.7;
    const double s11 = 0.5 + shift, s22 = 0.5 + shift, s12 = 0.0;
    const double det = s11 * s22 - s12 * s12;
    const double x1 = (-1.0 * s22 - (0.5) * s12) / det;
    const double x2 = (s11 * 0.5 - s12 * -1.0) / det;
    for (int dense : {1, 0}) {
        SRSolverOptions opt;
        opt.dense_below = dense ? 500 : 0;
        opt.cg_tol = 1e-14;
        const auto sol = sr_update(O, Eigen::MatrixXd(), e, shift, lr, opt);
        EXPECT_NEAR(sol.delta(0), lr * x1, 1e-10);
        EXPECT_NEAR(sol.delta(1), lr * x2, 1e-10);
    }
}

TEST(SR, NonDiagonalSystemMatchesDirectSolve) {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd Or(50, 2), Oi(50, 2);
    std::vector<cplx> e(50);
    for (int i = 0; i < 50; ++i) {
        Or(i, 0) = nd(rng);
        Or(i, 1) = 0.5 * Or(i, 0) + nd(rng);
        Oi(i, 0) = 0.3 * nd(rng);
        Oi(i, 1) = 0.3 * nd(rng);
        e[i] = cplx(nd(rng) + Or(i, 0), 0.2 * nd(rng));
    }
    // independent recomputation of S and F with explicit complex arithmetic
    double S[2][2] = {{0, 0}, {0, 0}}, F[2] = {0, 0};
    cplx Om[2] = {0, 0}, Em = 0;
    for (int i = 0; i < 50; ++i) {
        for (int p = 0; p < 2; ++p) Om[p] += cplx(Or(i, p), Oi(i, p)) / 50.0;
        Em += e[i] / 50.0;
    }
    for (int i = 0; i < 50; ++i) {
        for (int p = 0; p < 2; ++p) {
            const cplx op = cplx(Or(i, p), Oi(i, p)) - Om[p];
            F[p] += std::real(std::conj(op) * (e[i] - Em)) / 50.0;
            for (int q = 0; q < 2; ++q) S[p][q] += std::real(std::conj(op) * (cplx(Or(i, q), Oi(i, q)) - Om[q])) / 50.0;
        }
    }
    const double shift = 0.05;
    const double a = S[0][0] + shift, b = S[0][1], c = S[1][0], d = S[1][1] + shift;
    const double det = a * d - b * c;
    const double x0 = (-F[0] * d + F[1] * b) / det, x1 = (-F[1] * a + F[0] * c) / det;
    const auto sol = sr_update(Or, Oi, e, shift, 1.0);
    EXPECT_NEAR(sol.delta(0), x0, 1e-10);
    EXPECT_NEAR(sol.delta(1), x1, 1e-10);
}

TEST(SR, ScalingLogDerivativesMatchesRegularizedSolve) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd O(40, 5);
    for (int i = 0; i < O.size(); ++i) O.data()[i] = nd(rng);
    std::vector<cplx> e(40);
    for (auto& x : e) x = nd(rng);
    const double c = 3.0, shift = 0.01;
    const auto base = make_sr_system(O, Eigen::MatrixXd(), e);
    const auto scaled = make_sr_system(c * O, Eigen::MatrixXd(), e);
    EXPECT_LT((scaled.dense_S() - c * c * base.dense_S()).norm(), 1e-12 * base.dense_S().norm() * c * c);
    EXPECT_LT((scaled.force - c * base.force).norm(), 1e-12 * base.force.norm() * c);
    Eigen::MatrixXd A = c * c * base.dense_S();
    A.diagonal().array() += shift;
    const Eigen::VectorXd ref = A.ldlt().solve(-c * base.force);
    const auto sol = sr_update(scaled, shift, 1.0);
    EXPECT_LT((sol.delta - ref).norm(), 1e-10 * ref.norm());
    // the direction genuinely changes with c because the shift does not scale
    const auto sol1 = sr_update(base, shift, 1.0);
    EXPECT_GT((sol.delta.normalized() - sol1.delta.normalized()).norm(), 1e-6);
}

TEST(SR, LargeShiftApproachesScaledGradient) {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd O(30, 2);
    for (int i = 0; i < O.size(); ++i) O.data()[i] = nd(rng);
    std::vector<cplx> e(30);
    for (auto& x : e) x = nd(rng);
    const auto sys = make_sr_system(O, Eigen::MatrixXd(), e);
    double prev = 1e9;
    for (double shift : {1e2, 1e4, 1e6}) {
        const auto sol = sr_update(sys, shift, 1.0);
        const double err = (shift * sol.delta + sys.force).norm() / sys.force.norm();
        EXPECT_LT(err, prev);
        prev = err;
    }
    EXPECT_LT(prev, 1e-5);
}

TEST(SR, CgDoublesShiftThenFails) {
    std::mt19937_64 rng(7);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd O(200, 60);
    for (int i = 0; i < O.size(); ++i) O.data()[i] = nd(rng) * std::pow(10.0, (i % 60) / 15.0);
    std::vector<cplx> e(200);
    for (auto& x : e) x = nd(rng);
    SRSolverOptions opt;
    opt.dense_below = 0;
    opt.cg_tol = 1e-12;
    opt.cg_max_iter = 3;
    EXPECT_THROW(sr_update(O, Eigen::MatrixXd(), e, 1e-6, 1.0, opt), NumericalError);
    opt.cg_max_iter = 1000;
    const auto ok = sr_update(O, Eigen::MatrixXd(), e, 1e-6, 1.0, opt);
    EXPECT_EQ(ok.doublings, 0);
    EXPECT_THROW(sr_update(O.topRows(1), Eigen::MatrixXd(), {e[0]}, 1e-3, 1.0), DomainError);
}

TEST(SR, StepClippingBoundsFubiniStudyLength) {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd O(30, 4);
    for (int i = 0; i < O.size(); ++i) O.data()[i] = nd(rng);
    std::vector<cplx> e(30);
    for (auto& x : e) x = 5.0 * nd(rng);
    const auto sys = make_sr_system(O, Eigen::MatrixXd(), e);
    auto sol = sr_update(sys, 1e-3, 1.0);
    clip_step(sys, sol, 0.05);
    EXPECT_TRUE(sol.clipped);
    EXPECT_NEAR(std::sqrt(sol.delta.dot(sys.apply_S(sol.delta))), 0.05, 1e-12);
}

// ---- estimates and schedules -------------------------------------------------------------------

TEST(Energy, VScore) {
    EnergyEstimate e;
    e.mean = -10.0;
    e.variance = 0.0;
    EXPECT_EQ(v_score(e, 20), 0.0);
    e.variance = 0.5;
    EXPECT_DOUBLE_EQ(v_score(e, 40), 2.0 * v_score(e, 20));
    e.mean = 0.0;
    EXPECT_THROW(v_score(e, 20), DomainError);
    const auto est = estimate_energy({1.0, 3.0}, 4);
    EXPECT_DOUBLE_EQ(est.mean, 2.0);
    EXPECT_DOUBLE_EQ(est.variance, 1.0);
    EXPECT_DOUBLE_EQ(est.v_score, 1.0);
}

TEST(Schedule, WarmupDecayAndShift) {
    OptimizerConfig oc;
    oc.iterations = 400;
    oc.warmup = 150;
    SRState st(oc, 14);
    EXPECT_DOUBLE_EQ(st.peak, 3.5);
    EXPECT_DOUBLE_EQ(SRState(oc, 680).peak, 10.0);
    EXPECT_NEAR(st.lr(149), 3.5, 1e-12);
    EXPECT_NEAR(st.lr(74), 3.5 * 75 / 150, 1e-12);
    EXPECT_NEAR(st.lr(400), 0.35, 1e-12);
    for (int i = 0; i < 400; ++i) {
        EXPECT_GT(st.shift(i), 0.0);
        if (i > 150) {
            EXPECT_LE(st.lr(i), st.lr(i - 1));
        }
    }
    EXPECT_DOUBLE_EQ(st.shift(0), 1e-2);
    EXPECT_NEAR(st.shift(399), 1e-4, 1e-15);
}

TEST(Schedule, CriticalFactor) {
    EXPECT_DOUBLE_EQ(critical_factor(1.0, std::nullopt), 1.0);
    EXPECT_DOUBLE_EQ(critical_factor(1.0, 1.0), 4.2);
    EXPECT_DOUBLE_EQ(critical_factor(3.0, 1.0), 1.0);
}

// ---- sampling and training -------------------------------------------------------------------

TEST(Ensemble, SectorAndCount) {
    SamplingConfig sc;
    sc.chains = 4;
    sc.samples = 12;
    const auto H = j1j2(12, 0.2);
    PreparedModel pm(random_model(small_config(2, 3), 3), 12);
    ChainEnsemble ens(H, sc, 5);
    const auto b = ens.draw(pm);
    ASSERT_EQ(b.configs.size(), 12u);
    for (const auto& s : b.configs) EXPECT_EQ(s.magnetization(), 0);
    EXPECT_GT(b.counters.proposals, 0);
}

TEST(Train, ZeroIterationsEmitsInitialRowOnly) {
    const auto tc = tiny_train(0);
    const auto res = train(tc, initial_model(tc));
    ASSERT_EQ(res.rows.size(), 1u);
    EXPECT_FALSE(res.aborted);
    EXPECT_TRUE(std::isfinite(res.rows[0].energy.mean));
}

TEST(Train, DeterministicAndRowsEqualIterationsPlusOne) {
    const auto tc = tiny_train(4);
    const auto a = train(tc, initial_model(tc)), b = train(tc, initial_model(tc));
    ASSERT_EQ(a.rows.size(), 5u);
    for (size_t i = 0; i < a.rows.size(); ++i) EXPECT_EQ(a.rows[i].energy.mean, b.rows[i].energy.mean);
    EXPECT_EQ(a.model.theta, b.model.theta);
    auto tc4 = tc;
    tc4.threads = 3;
    const auto c = train(tc4, initial_model(tc4));
    for (size_t i = 0; i < a.rows.size(); ++i) EXPECT_EQ(a.rows[i].energy.mean, c.rows[i].energy.mean);
}

TEST(Train, NonFiniteEnergyAbortsKeepingLastGoodModel) {
    auto tc = tiny_train(3);
    tc.hamiltonian.h = std::numeric_limits<double>::quiet_NaN();
    const Model m0 = initial_model(tc);
    const auto res = train(tc, m0);
    EXPECT_TRUE(res.aborted);
    EXPECT_TRUE(res.rows.empty());
    EXPECT_EQ(res.model.theta, m0.theta);
}

TEST(Train, EnergyDecreasesOnSmallSystem) {
    auto tc = tiny_train(30);
    tc.sampling.chains = 16;
    tc.sampling.samples = 256;
    tc.optimizer.warmup = 5;
    tc.optimizer.peak_lr = 0.1;
    tc.optimizer.max_step = 0.1;
    tc.optimizer.max_measured_step = 0.2;
    const auto res = train(tc, initial_model(tc));
    ASSERT_FALSE(res.aborted) << res.abort_reason;
    const auto gs = ground_states(tc.hamiltonian, 1);
    const double e_first = res.rows.front().energy.mean, e_last = res.rows.back().energy.mean;
    EXPECT_LT(e_last, e_first);
    EXPECT_GT(e_last, gs.energies[0] - 5.0 * res.rows.back().energy.stderr_ - 1e-9);
}

// ---- enumeration and observables ---------------------------------------------------------------

TEST(Enumerate, ConstantAnsatzIsUniform) {
    Model m = init_model(small_config(1, 2), 1);
    for (int i = 0; i < 2 * 2; ++i) m.theta[m.layout.A + i] = 0.0;
    const auto p = enumerate_distribution(PreparedModel(m, 8));
    double s = 0.0;
    for (double x : p) {
        EXPECT_NEAR(x, 1.0 / 256.0, 1e-15);
        s += x;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
    EXPECT_THROW(enumerate_distribution(PreparedModel(m, 16)), ResourceError);
}

TEST(Enumerate, InversionSymmetricParametersGiveSymmetricDistribution) {
    const ModelConfig c = small_config(2, 3);
    Model m = random_model(c, 12);
    const int N = 10;
    auto asym = enumerate_distribution(PreparedModel(m, N));
    double worst_generic = 0.0;
    for (uint64_t b = 0; b < asym.size(); ++b) worst_generic = std::max(worst_generic, std::abs(asym[b] - asym[asym.size() - 1 - b]));
    EXPECT_GT(worst_generic, 1e-6);
    // odd network: no phi stream, zero depthwise biases and zero ActNorm shift
    for (int i = 0; i < c.d * c.token_size; ++i) m.theta[m.layout.Ephi + i] = 0.0;
    for (const auto& lo : m.layout.layer)
        for (int i = 0; i < c.d; ++i) m.theta[lo.w + i] = m.theta[lo.k + i] = 0.0;
    for (int i = 0; i < c.d; ++i) m.theta[m.layout.an_shift + i] = 0.0;
    const auto p = enumerate_distribution(PreparedModel(m, N));
    double s = 0.0;
    for (uint64_t b = 0; b < p.size(); ++b) {
        EXPECT_NEAR(p[b], p[p.size() - 1 - b], 1e-14);
        s += p[b];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
}

TEST(Observables, PolarizedStateAndReflection) {
    std::vector<SpinConfig> up(10, SpinConfig(8, 1));
    const auto o = measure_observables(up);
    EXPECT_DOUBLE_EQ(o.m2, 1.0);
    std::mt19937_64 rng(3);
    std::vector<SpinConfig> rnd;
    for (int i = 0; i < 50; ++i) rnd.push_back(SpinConfig::random(9, rng));
    const auto r = measure_observables(rnd);
    for (int d = 1; d < 9; ++d) EXPECT_NEAR(r.corr[d], r.corr[9 - d], 1e-15);
    EXPECT_DOUBLE_EQ(r.corr[0], 1.0);
}

TEST(Observables, MonteCarloMatchesEnumeration) {
    const int N = 10;
    PreparedModel pm(random_model(small_config(2, 3), 14, 2.0), N);
    const auto exact = exact_observables(enumerate_distribution(pm), N);
    std::vector<SpinConfig> samples;
    SamplerConfig sc;
    sc.mode = SamplerMode::ExactRatio;
    std::mt19937_64 rng(1);
    for (int c = 0; c < 40; ++c) {
        Chain ch(pm, SpinConfig::random(N, rng), 100 + c, sc);
        ch.advance(200);
        for (int k = 0; k < 50; ++k) {
            ch.advance(60);
            samples.push_back(ch.config());
        }
    }
    const auto mc = measure_observables(samples);
    EXPECT_NEAR(mc.m2, exact.m2, 3.0 * mc.m2_err + 1e-12);
    for (int r = 1; r <= N / 2; ++r) EXPECT_NEAR(mc.corr[r], exact.corr[r], 3.0 * mc.corr_err[r] + 1e-12) << r;
}

TEST(Fidelity, TableOfGroundStateIsExact) {
    const auto H = j1j2(10, 0.5);
    const auto gs = ground_states(H, 3);
    EXPECT_EQ(gs.ground_group().size(), 2u);
    std::vector<cplx> psi(gs.vectors[1].begin(), gs.vectors[1].end());
    EXPECT_NEAR(fidelity_subspace(psi, gs), 1.0, 1e-10);
    EXPECT_NEAR(table_energy(H, psi), gs.energies[0], 1e-9);
}
