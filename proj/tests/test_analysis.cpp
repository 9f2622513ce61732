#include "icr/analysis.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace icr;

namespace {

RoutingOutput routing(const std::vector<double>& gates, const std::vector<double>& alphas, int r = 4, int h = 2) {
    RoutingOutput o;
    const auto L = static_cast<Eigen::Index>(gates.size());
    o.gamma.resize(L, h);
    o.alpha.resize(L, r);
    for (Eigen::Index l = 0; l < L; ++l) {
        o.gamma.row(l).setConstant(gates[static_cast<std::size_t>(l)]);
        o.alpha.row(l).setConstant(alphas[static_cast<std::size_t>(l)]);
    }
    return o;
}

RoutingOutput random_routing(Rng& rng, int L, int r, int h) {
    RoutingOutput o;
    o.alpha = rng.gaussian(L, r);
    o.gamma.resize(L, h);
    for (int l = 0; l < L; ++l)
        for (int j = 0; j < h; ++j) o.gamma(l, j) = rng.uniform();
    return o;
}

} // namespace

TEST(LayerImportance, EqualStreamsGiveUniformProfile) {
    const ImportanceProfile p = layer_importance({routing({0.5, 0.5, 0.5}, {0.2, 0.2, 0.2})});
    for (int l = 0; l < 3; ++l) EXPECT_NEAR(p.importance(l), 1.0 / 3.0, 1e-12);
}

TEST(LayerImportance, DominantLayerWins) {
    const ImportanceProfile p = layer_importance({routing({0.05, 0.5, 0.04}, {0.03, 0.3, 0.02})});
    EXPECT_GT(p.importance(1), p.importance(0));
    EXPECT_GT(p.importance(1), p.importance(2));
}

TEST(LayerImportance, HandInstance) {
    const ImportanceProfile p = layer_importance({routing({0.2, 0.8, 0.5}, {0.1, 0.4, -0.4})}, {3, 4, 5});
    // Normalized gates (0, 1, 0.5) times normalized |alpha| (0, 1, 1).
    EXPECT_NEAR(p.importance(0), 0.0, 1e-12);
    EXPECT_NEAR(p.importance(1), 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(p.importance(2), 1.0 / 3.0, 1e-12);
    EXPECT_EQ(p.layers, (std::vector<int>{3, 4, 5}));
}

TEST(LayerImportance, SumsToOneOnRandomRoutings) {
    Rng rng(1);
    std::vector<RoutingOutput> outs;
    for (int i = 0; i < 30; ++i) outs.push_back(random_routing(rng, 4, 8, 4));
    EXPECT_NEAR(layer_importance(outs).importance.sum(), 1.0, 1e-9);
}

TEST(LayerImportance, EmptyInputIsError) {
    EXPECT_THROW(layer_importance({}), Error);
}

TEST(HeadImportance, UniformGatesPickHeadZero) {
    RoutingOutput o = routing({0.3, 0.3}, {0.1, 0.1}, 4, 4);
    const HeadImportance h = head_importance({o, o});
    EXPECT_EQ(h.top1, (std::vector<int>{0, 0}));
}

TEST(HeadImportance, PlantedHeadRecovered) {
    RoutingOutput o = routing({0.1, 0.1}, {0.1, 0.1}, 4, 4);
    o.gamma(0, 2) = 0.9;
    o.gamma(1, 3) = 0.9;
    EXPECT_EQ(head_importance({o}).top1, (std::vector<int>{2, 3}));
}

TEST(HeadImportance, TableMatchesStreamingMean) {
    Rng rng(2);
    std::vector<RoutingOutput> outs;
    for (int i = 0; i < 25; ++i) outs.push_back(random_routing(rng, 3, 4, 4));
    const HeadImportance h = head_importance(outs);
    for (int l = 0; l < 3; ++l)
        for (int j = 0; j < 4; ++j) {
            double m = 0.0;
            for (std::size_t i = 0; i < outs.size(); ++i) m += (outs[i].gamma(l, j) - m) / static_cast<double>(i + 1);
            EXPECT_NEAR(h.mean_gate(l, j), m, 1e-12);
        }
}

TEST(Spearman, SelfAndReversed) {
    Vector a(5), b(5);
    a << 0.1, 0.5, 0.3, 0.9, 0.2;
    b = -a;
    EXPECT_NEAR(spearman(a, a), 1.0, 1e-12);
    EXPECT_NEAR(spearman(a, b), -1.0, 1e-12);
}

TEST(Spearman, MatchesRankThenPearsonOracle) {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Vector a = rng.gaussian(8, 1), b = rng.gaussian(8, 1);
        // No ties: ranks by counting smaller entries.
        auto rank = [](const Vector& v) {
            Vector r(v.size());
            for (Eigen::Index i = 0; i < v.size(); ++i) {
                r(i) = 1.0;
                for (Eigen::Index j = 0; j < v.size(); ++j) r(i) += v(j) < v(i);
            }
            return r;
        };
        const Vector ra = rank(a), rb = rank(b);
        double num = 0, da = 0, db = 0;
        for (int i = 0; i < 8; ++i) {
            num += (ra(i) - 4.5) * (rb(i) - 4.5);
            da += (ra(i) - 4.5) * (ra(i) - 4.5);
            db += (rb(i) - 4.5) * (rb(i) - 4.5);
        }
        EXPECT_NEAR(spearman(a, b), num / std::sqrt(da * db), 1e-12);
    }
}

TEST(Spearman, TiesShareAverageRank) {
    Vector v(4);
    v << 2.0, 1.0, 2.0, 3.0;
    const Vector r = average_ranks(v);
    EXPECT_DOUBLE_EQ(r(0), 2.5);
    EXPECT_DOUBLE_EQ(r(1), 1.0);
    EXPECT_DOUBLE_EQ(r(2), 2.5);
    EXPECT_DOUBLE_EQ(r(3), 4.0);
}

TEST(PidCorrelation, SymmetricUnitDiagonal) {
    Rng rng(4);
    std::vector<std::vector<RoutingOutput>> per(3);
    for (auto& d : per)
        for (int i = 0; i < 10; ++i) d.push_back(random_routing(rng, 2, 8, 4));
    const Matrix c = pid_importance_corr(per);
    EXPECT_LT((c - c.transpose()).cwiseAbs().maxCoeff(), 1e-15);
    for (int i = 0; i < 3; ++i) EXPECT_EQ(c(i, i), 1.0);
}

TEST(PidCorrelation, RankOneIsUndefined) {
    Rng rng(5);
    std::vector<std::vector<RoutingOutput>> per(2);
    for (auto& d : per) d.push_back(random_routing(rng, 2, 1, 4));
    try {
        pid_importance_corr(per);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::invalid_rank);
    }
}

TEST(PidCorrelation, NeedsTwoDatasets) {
    Rng rng(6);
    EXPECT_THROW(pid_importance_corr({{random_routing(rng, 2, 4, 2)}}), Error);
}

namespace {

DatasetLogProbs dataset(const std::vector<double>& zs, const std::vector<double>& icr) {
    DatasetLogProbs d;
    d.zero_shot = Eigen::Map<const RowVector>(zs.data(), static_cast<Eigen::Index>(zs.size()));
    d.routed = Eigen::Map<const RowVector>(icr.data(), static_cast<Eigen::Index>(icr.size()));
    return d;
}

const TokenBiasStats& find_token(const std::vector<TokenBiasStats>& s, int token) {
    return *std::find_if(s.begin(), s.end(), [&](const auto& x) { return x.token == token; });
}

} // namespace

TEST(Iclness, HandOracleThreeTokens) {
    // Per-dataset deltas: d1 = (0.2, -0.1, 0.4), d2 = (0.4, 0.1, -0.2).
    const auto stats = iclness_scores({dataset({-1.0, -2.0, -3.0}, {-0.8, -2.1, -2.6}),
                                       dataset({-1.0, -2.0, -3.0}, {-0.6, -1.9, -3.2})});
    ASSERT_EQ(stats.size(), 3u);
    const double eps = 1e-6;
    // Token 0: mean 0.3, std 0.1, pos 1; ranks 2 and 1 -> borda (1/3 + 2/3) / 2 = 0.5.
    const auto& t0 = find_token(stats, 0);
    EXPECT_NEAR(t0.mean, 0.3, 1e-9);
    EXPECT_NEAR(t0.std, 0.1, 1e-9);
    EXPECT_NEAR(t0.pos_rate, 1.0, 1e-9);
    EXPECT_NEAR(t0.borda, 0.5, 1e-9);
    EXPECT_NEAR(t0.stability, 0.3 / (0.1 + eps), 1e-9);
    EXPECT_NEAR(t0.score, 0.3 / (0.1 + eps) * std::log(1.5), 1e-9);
    // Token 1: mean 0, std 0.1, pos 0.5; ranks 3 and 2 -> borda (0 + 1/3) / 2.
    const auto& t1 = find_token(stats, 1);
    EXPECT_NEAR(t1.mean, 0.0, 1e-9);
    EXPECT_NEAR(t1.pos_rate, 0.5, 1e-9);
    EXPECT_NEAR(t1.borda, 1.0 / 6.0, 1e-9);
    EXPECT_NEAR(t1.score, 0.0, 1e-9);
    // Token 2: mean 0.1, std 0.3, pos 0.5; ranks 1 and 3 -> borda (2/3 + 0) / 2.
    const auto& t2 = find_token(stats, 2);
    EXPECT_NEAR(t2.mean, 0.1, 1e-9);
    EXPECT_NEAR(t2.std, 0.3, 1e-9);
    EXPECT_NEAR(t2.borda, 1.0 / 3.0, 1e-9);
    EXPECT_NEAR(t2.score, 0.1 / (0.3 + eps) * 0.5 * std::log(1.0 + 1.0 / 3.0), 1e-9);
    EXPECT_EQ(stats.front().token, 0);
}

TEST(Iclness, NeverPositiveTokenScoresZero) {
    const auto stats = iclness_scores({dataset({0, 0}, {0.5, -0.5}), dataset({0, 0}, {0.2, -0.1})});
    EXPECT_EQ(find_token(stats, 1).pos_rate, 0.0);
    EXPECT_EQ(find_token(stats, 1).score, 0.0);
}

TEST(Iclness, ConstantPositiveDeltaRanksFirstAmongEqualBorda) {
    // Token 0 has a stable delta, token 1 the same borda with a noisy one.
    const auto stats =
        iclness_scores({dataset({0, 0, 0}, {0.5, 0.6, -1}), dataset({0, 0, 0}, {0.5, 0.4, -1})});
    EXPECT_NEAR(find_token(stats, 0).borda, find_token(stats, 1).borda, 1e-12);
    EXPECT_NEAR(find_token(stats, 0).stability, 0.5 / 1e-6, 1e-3);
    EXPECT_EQ(stats.front().token, 0);
}

TEST(Iclness, VocabularyMismatchIsInputError) {
    try {
        iclness_scores({dataset({0, 0}, {1, 1}), dataset({0, 0, 0}, {1, 1, 1})});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::input);
    }
}

TEST(Iclness, BordaInUnitIntervalAndInvariantToMonotoneTransforms) {
    Rng rng(7);
    std::vector<DatasetLogProbs> a, b;
    for (int d = 0; d < 3; ++d) {
        DatasetLogProbs x;
        x.zero_shot = Matrix::Zero(1, 12);
        x.routed = rng.gaussian(1, 12);
        a.push_back(x);
        // exp is monotone; borda only sees per-dataset ranks.
        x.routed = x.routed.array().exp().matrix();
        b.push_back(x);
    }
    const auto sa = iclness_scores(a), sb = iclness_scores(b);
    for (int v = 0; v < 12; ++v) {
        EXPECT_GE(find_token(sa, v).borda, 0.0);
        EXPECT_LE(find_token(sa, v).borda, 1.0);
        EXPECT_DOUBLE_EQ(find_token(sa, v).borda, find_token(sb, v).borda);
    }
}

TEST(Iclness, SortedDescendingByScore) {
    Rng rng(8);
    std::vector<DatasetLogProbs> ds;
    for (int d = 0; d < 3; ++d) {
        DatasetLogProbs x;
        x.zero_shot = rng.gaussian(5, 20);
        x.routed = rng.gaussian(5, 20);
        ds.push_back(x);
    }
    const auto s = iclness_scores(ds);
    for (std::size_t i = 1; i < s.size(); ++i) EXPECT_GE(s[i - 1].score, s[i].score);
    for (const auto& t : s) EXPECT_NEAR(t.score, t.stability * t.pos_rate * std::log1p(t.borda), 1e-12);
}

TEST(Resources, CachedParameterCount) { EXPECT_EQ(cached_parameter_count(8, 64, 2), 2048); }

TEST(Resources, NeedsThirtySamples) {
    const std::vector<double> few(29, 1.0);
    EXPECT_THROW(resource_report(8, 64, 2, few, few, few), Error);
}

TEST(Resources, PairedWinRate) {
    std::vector<double> zs(40, 1.0), icr(40, 2.0), few(40, 3.0);
    icr[0] = 4.0;
    const ResourceReport r = resource_report(8, 64, 2, zs, icr, few);
    EXPECT_NEAR(r.icr_faster_than_few, 39.0 / 40.0, 1e-12);
    EXPECT_NEAR(r.icr.mean, (39 * 2.0 + 4.0) / 40.0, 1e-12);
}
