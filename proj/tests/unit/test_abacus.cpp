#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dysonnet/abacus.hpp"
#include "model_fixtures.hpp"

using namespace dyson;
using namespace dyson::fixtures;

namespace {

ModelConfig config(int L, int d, int wk) {
    ModelConfig c = small_config(L, d);
    c.kernel_half_width = wk;
    return c;
}

double max_abs(const std::vector<cplx>& a, const std::vector<cplx>& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double max_norm(const std::vector<cplx>& a) {
    double m = 0.0;
    for (auto x : a) m = std::max(m, std::abs(x));
    return m;
}

// Worst |Omega_abacus - Omega_full| / (1 + |Omega|) over the given flips.
double worst_flip_error(const PreparedModel& pm, const LinkCache& cache, const SpinConfig& s0,
                        const std::vector<std::vector<int>>& flips) {
    double worst = 0.0;
    for (const auto& f : flips) {
        SpinConfig s1 = s0;
        for (int i : f) s1.flip(i);
        const auto full = forward(pm, s1).omega;
        const auto fast = cache.omega_from_pool_delta(cache.pool_delta(f));
        worst = std::max(worst, max_abs(full, fast) / (1.0 + max_norm(full)));
    }
    return worst;
}

std::vector<std::vector<int>> single_flips(int N, int stride = 1) {
    std::vector<std::vector<int>> f;
    for (int i = 0; i < N; i += stride) f.push_back({i});
    return f;
}

// Dense nd x nd matrix of B^k = D0^k G^k on the frozen background (row index tok*d + ch).
Eigen::MatrixXd dense_B(const PreparedModel& pm, const ForwardTrace& tr, int k) {
    const int n = pm.n_tok(), d = pm.cfg().d;
    const LayerView lv = layer_view(pm.model(), k - 1);
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(n * d, n * d), D = Eigen::MatrixXd::Zero(n * d, n * d);
    for (int j = 0; j < n; ++j) {
        for (int p = 0; p < n; ++p)
            for (int c = 0; c < d; ++c) G(j * d + c, p * d + c) = pm.kernels(k - 1)[c].g[wrap(j - p, n)];
        D.block(j * d, j * d, d, d) = lv.U * tr.chi[k - 1].row(j).transpose().asDiagonal() * lv.V;
    }
    return D * G;
}

Eigen::MatrixXd dense_G(const PreparedModel& pm, int l) {
    const int n = pm.n_tok(), d = pm.cfg().d;
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(n * d, n * d);
    for (int j = 0; j < n; ++j)
        for (int p = 0; p < n; ++p)
            for (int c = 0; c < d; ++c) G(j * d + c, p * d + c) = pm.kernels(l - 1)[c].g[wrap(j - p, n)];
    return G;
}

} // namespace

struct ExactCase {
    int N, L, wk;
};

class AbacusExactness : public ::testing::TestWithParam<ExactCase> {};

TEST_P(AbacusExactness, EverySingleFlipMatchesFullForward) {
    const auto p = GetParam();
    Model m = random_model(config(p.L, 3, p.wk), 11 + p.N + p.L);
    PreparedModel pm(m, p.N);
    std::mt19937_64 rng(p.N * 7 + p.L);
    const SpinConfig s0 = SpinConfig::random(p.N, rng);
    const int stride = p.N > 64 ? 5 : 1;
    LinkCache cache(pm, s0);
    EXPECT_LE(worst_flip_error(pm, cache, s0, single_flips(p.N, stride)), 1e-10);
}

INSTANTIATE_TEST_SUITE_P(Sizes, AbacusExactness,
                         ::testing::Values(ExactCase{16, 1, 1}, ExactCase{16, 2, 1}, ExactCase{16, 3, 1},
                                           ExactCase{64, 1, 2}, ExactCase{64, 2, 2}, ExactCase{64, 3, 2},
                                           ExactCase{256, 2, 2}, ExactCase{256, 3, 1}));

TEST(Abacus, TwoSiteClustersWithMargin) {
    const int N = 32;
    Model m = random_model(config(2, 3, 1), 5);
    PreparedModel pm(m, N);
    std::mt19937_64 rng(3);
    const SpinConfig s0 = SpinConfig::random(N, rng);
    AbacusOptions opt;
    opt.margin = 1;
    LinkCache cache(pm, s0, opt);
    std::vector<std::vector<int>> flips;
    for (int i = 0; i < N; ++i) {
        flips.push_back({i, (i + 1) % N});
        flips.push_back({i, (i + 2) % N});
        flips.push_back({i});
    }
    EXPECT_LE(worst_flip_error(pm, cache, s0, flips), 1e-10);

    // margin 0 cannot hold a cluster straddling two tokens
    LinkCache narrow(pm, s0);
    EXPECT_THROW(narrow.pool_delta({1, 2}), DomainError);
    EXPECT_NO_THROW(narrow.pool_delta({2, 3}));
}

TEST(Abacus, RegisteredSubsetMatchesAllCenters) {
    const int N = 64;
    Model m = random_model(config(3, 2, 1), 8);
    PreparedModel pm(m, N);
    std::mt19937_64 rng(4);
    const SpinConfig s0 = SpinConfig::random(N, rng);
    AbacusOptions sub;
    sub.centers = {0, 5, 31};
    LinkCache a(pm, s0), b(pm, s0, sub);
    for (int c : sub.centers) {
        const std::vector<int> f{2 * c + 1};
        EXPECT_LE((a.pool_delta(f) - b.pool_delta(f)).cwiseAbs().maxCoeff(), 1e-12);
    }
    EXPECT_THROW(b.pool_delta({2 * 7}), DomainError);
    EXPECT_LT(b.memory_bytes(), a.memory_bytes());
}

TEST(Abacus, FftLinkEqualsDirectSum) {
    const int N = 64;
    Model m = random_model(config(3, 3, 2), 21);
    PreparedModel pm(m, N);
    std::mt19937_64 rng(9);
    const SpinConfig s0 = SpinConfig::random(N, rng);
    AbacusOptions fo, dir;
    fo.link_method = LinkMethod::FFT;
    dir.link_method = LinkMethod::Direct;
    LinkCache a(pm, s0, fo), b(pm, s0, dir);
    double worst = 0.0;
    for (int c : {0, 7, 31}) {
        for (auto [l, mm] : {std::pair{2, 0}, std::pair{3, 1}})
            for (int o = a.window_lo(l); o < a.window_lo(l) + a.window_size(l); ++o)
                for (int op = a.window_lo(mm); op < a.window_lo(mm) + a.window_size(mm); ++op)
                    worst = std::max(worst, (a.link_block(l, mm, c, o, op) - b.link_block(l, mm, c, o, op)).cwiseAbs().maxCoeff());
    }
    EXPECT_LT(worst, 1e-12);
    EXPECT_GT(a.fft_count(), 0);
}

TEST(Abacus, LinksEqualDenseBackgroundProducts) {
    const int N = 32, d = 2;
    Model m = random_model(config(3, d, 1), 2);
    PreparedModel pm(m, N);
    std::mt19937_64 rng(12);
    const SpinConfig s0 = SpinConfig::random(N, rng);
    LinkCache cache(pm, s0);
    const auto& tr = cache.baseline();
    const int n = pm.n_tok();
    const Eigen::MatrixXd L20 = dense_G(pm, 2) * dense_B(pm, tr, 1);
    const Eigen::MatrixXd L30 = dense_G(pm, 3) * dense_B(pm, tr, 2) * dense_B(pm, tr, 1);
    const Eigen::MatrixXd L31 = dense_G(pm, 3) * dense_B(pm, tr, 2);
    double worst = 0.0;
    for (int c : {0, 3, 15}) {
        auto cmp = [&](const Eigen::MatrixXd& Ld, int l, int mm) {
            for (int o = cache.window_lo(l); o < cache.window_lo(l) + cache.window_size(l); ++o)
                for (int op = cache.window_lo(mm); op < cache.window_lo(mm) + cache.window_size(mm); ++op) {
                    const Eigen::MatrixXd blk = Ld.block(wrap(c + o, n) * d, wrap(c + op, n) * d, d, d);
                    worst = std::max(worst, (blk - cache.link_block(l, mm, c, o, op)).cwiseAbs().maxCoeff());
                }
        };
        cmp(L20, 2, 0);
        cmp(L30, 3, 0);
        cmp(L31, 3, 1);
    }
    EXPECT_LT(worst, 1e-12);
    EXPECT_GT(cache.probe_count(), 0);
}

TEST(Abacus, TauEqualsForwardPropagatedFunctional) {
    const int N = 24, d = 2, L = 3;
    Model m = random_model(config(L, d, 1), 14);
    PreparedModel pm(m, N);
    std::mt19937_64 rng(1);
    const SpinConfig s0 = SpinConfig::random(N, rng);
    LinkCache cache(pm, s0);
    const int n = pm.n_tok();
    std::vector<Eigen::MatrixXd> B;
    for (int k = 1; k <= L; ++k) B.push_back(dense_B(pm, cache.baseline(), k));
    for (int mm = 0; mm < L; ++mm) {
        // sum_{l > m} (1/n) 1_c^T B^l ... B^{m+1}
        Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(d, n * d), chain = Eigen::MatrixXd::Identity(n * d, n * d);
        Eigen::MatrixXd ones = Eigen::MatrixXd::Zero(d, n * d);
        for (int j = 0; j < n; ++j)
            for (int c = 0; c < d; ++c) ones(c, j * d + c) = 1.0 / n;
        for (int l = mm + 1; l <= L; ++l) {
            chain = B[l - 1] * chain;
            acc += ones * chain;
        }
        double worst = 0.0;
        for (int j = 0; j < n; ++j)
            for (int cp = 0; cp < d; ++cp)
                for (int ch = 0; ch < d; ++ch)
                    worst = std::max(worst, std::abs(acc(cp, j * d + ch) - cache.tau(mm)(j, cp * d + ch)));
        EXPECT_LT(worst, 1e-13) << "layer " << mm;
    }
}

TEST(Abacus, FlipTwiceIsInvolution) {
    const int N = 32;
    Model m = random_model(config(2, 3, 1), 31);
    PreparedModel pm(m, N);
    std::mt19937_64 rng(2);
    const SpinConfig s0 = SpinConfig::random(N, rng);
    for (int i : {0, 9, 31}) {
        SpinConfig s1 = s0;
        s1.flip(i);
        LinkCache c0(pm, s0), c1(pm, s1);
        const Eigen::VectorXd there = c0.pool_delta({i}), back = c1.pool_delta({i});
        EXPECT_LT((there + back).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Abacus, EmptyFlipIsZero) {
    Model m = random_model(config(2, 3, 1), 1);
    PreparedModel pm(m, 16);
    std::mt19937_64 rng(5);
    const SpinConfig s0 = SpinConfig::random(16, rng);
    LinkCache cache(pm, s0);
    EXPECT_EQ(cache.pool_delta({}).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_DOUBLE_EQ(std::abs(psi_ratio(cache, cache.delta_omega({}))), 1.0);
}

TEST(Abacus, ChangedGatesStayInsideSlice) {
    const int N = 64, L = 3, wk = 2;
    Model m = random_model(config(L, 3, wk), 6);
    PreparedModel pm(m, N);
    std::mt19937_64 rng(8);
    const SpinConfig s0 = SpinConfig::random(N, rng);
    const auto t0 = forward(pm, s0);
    const int n = pm.n_tok();
    for (int site : {0, 17, 63}) {
        SpinConfig s1 = s0;
        s1.flip(site);
        const auto t1 = forward(pm, s1);
        const int c = site / 2;
        for (int l = 1; l <= L; ++l)
            for (int j = 0; j < n; ++j) {
                const int dist = std::min(wrap(j - c, n), wrap(c - j, n));
                if (dist > l * wk) {
                    EXPECT_EQ((t1.chi[l - 1].row(j) - t0.chi[l - 1].row(j)).cwiseAbs().maxCoeff(), 0.0);
                }
            }
    }
}

TEST(Abacus, RatioMatchesTwoForwards) {
    const int N = 32;
    for (Readout r : {Readout::SumCosh, Readout::SumLogCosh, Readout::Exp}) {
        for (bool cx : {false, true}) {
            ModelConfig c = config(2, 3, 1);
            c.readout = r;
            c.complex_readout = cx;
            Model m = random_model(c, 40);
            PreparedModel pm(m, N);
            std::mt19937_64 rng(6);
            const SpinConfig s0 = SpinConfig::random(N, rng);
            LinkCache cache(pm, s0);
            const std::vector<std::vector<int>> flips{{0}, {5}, {20}};
            const auto r2 = amplitude_ratio(cache, pm, flips);
            for (size_t k = 0; k < flips.size(); ++k) {
                SpinConfig s1 = s0;
                s1.flip(flips[k][0]);
                const cplx exact = std::exp(log_psi(pm, s1) - log_psi(pm, s0));
                const cplx fast = psi_ratio(cache, cache.delta_omega(flips[k]));
                EXPECT_LT(std::abs(fast - exact), 1e-10 * (1.0 + std::abs(exact)));
                EXPECT_NEAR(r2[k], std::norm(exact), 1e-10 * (1.0 + std::norm(exact)));
            }
        }
    }
}

TEST(Abacus, IsaBatchEvaluatesEachFlipAgainstSameBackground) {
    const int N = 32;
    Model m = random_model(config(2, 3, 1), 44);
    PreparedModel pm(m, N);
    std::mt19937_64 rng(7);
    const SpinConfig s0 = SpinConfig::random(N, rng);
    LinkCache cache(pm, s0);
    const std::vector<std::vector<int>> flips{{1}, {12}, {25}};
    const auto batch = abacus_delta(cache, pm, flips);
    ASSERT_EQ(batch.size(), 3u);
    for (size_t k = 0; k < flips.size(); ++k) EXPECT_LT(max_abs(batch[k], cache.delta_omega(flips[k])), 1e-15);
}

TEST(Abacus, GuardsAgainstMisuse) {
    Model m = random_model(config(3, 2, 2), 3);
    PreparedModel small(m, 16);
    std::mt19937_64 rng(1);
    const SpinConfig s16 = SpinConfig::random(16, rng);
    EXPECT_THROW(LinkCache(small, s16), DomainError);  // 2*(3*2)+1 > 8 tokens
    EXPECT_FALSE(abacus_applicable(m.cfg, 8, 0));
    EXPECT_THROW(make_patch(0, 4, 8), DomainError);
    EXPECT_EQ(make_patch(1, 2, 8).indices, (std::vector<int>{7, 0, 1, 2, 3}));

    PreparedModel pm(m, 64);
    const SpinConfig s0 = SpinConfig::random(64, rng);
    LinkCache cache(pm, s0);
    EXPECT_THROW(cache.pool_delta({64}), DomainError);
    EXPECT_THROW(cache.pool_delta({3, 3}), DomainError);
    Model m2 = m;
    m2.touch();
    PreparedModel pm2(m2, 64);
    EXPECT_THROW(abacus_delta(cache, pm2, {{1}}), InvariantError);
    EXPECT_NE(cache_fingerprint(s0, m.version), cache_fingerprint(s0, m2.version));
}

TEST(Abacus, CorruptedCacheIsDetected) {
    const int N = 32;
    Model m = random_model(config(2, 3, 1), 9);
    PreparedModel pm(m, N);
    std::mt19937_64 rng(10);
    const SpinConfig s0 = SpinConfig::random(N, rng);
    LinkCache cache(pm, s0);
    cache.corrupt_for_testing();
    EXPECT_GT(worst_flip_error(pm, cache, s0, single_flips(N)), 1e-6);
}
