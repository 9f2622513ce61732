#include "icr/router.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace icr;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.n_layers = 3;
    c.n_heads = 2;
    c.width = 16;
    c.vocab_size = 40;
    c.max_seq_len = 32;
    return c;
}

const BackboneWeights& weights() {
    static const BackboneWeights w = BackboneWeights::init(small_config(), 11);
    return w;
}

PIDSet random_pids(const ModelConfig& c, int r, std::uint64_t seed) {
    PIDSet p;
    p.config_digest = c.digest();
    p.rank = r;
    p.layers = c.routed_layers();
    for (int l : p.layers) {
        p.uq.push_back(random_orthogonal_basis(c.width, r, mix_seed(seed, 2 * l)));
        p.uk.push_back(random_orthogonal_basis(c.width, r, mix_seed(seed, 2 * l + 1)));
    }
    return p;
}

RouterShape shape_for(const ModelConfig& c, int r) {
    RouterShape s;
    s.embed = c.width;
    s.hidden = 4 * c.width;
    s.n_layers = static_cast<int>(c.routed_layers().size());
    s.rank = r;
    s.n_heads = c.n_heads;
    return s;
}

RouterParams random_router(const RouterShape& s, std::uint64_t seed, double scale = 0.5) {
    RouterParams p = RouterParams::zeros(s);
    Rng rng(seed);
    p.for_each([&](const std::string&, Matrix& m) { m = rng.gaussian(m.rows(), m.cols(), scale); });
    return p;
}

const Tokens prompt{1, 14, 8, 9, 2, 30, 31, 2, 33};

} // namespace

TEST(Encoder, DeterministicWithWidthD) {
    const QueryEncoder enc(weights());
    const Vector a = enc.encode(prompt), b = enc.encode(prompt);
    EXPECT_EQ(a.size(), 16);
    EXPECT_TRUE(a == b);
    EXPECT_THROW(enc.encode({}), Error);
}

TEST(Encoder, PermutationInvariantWithoutPositions) {
    const QueryEncoder enc(weights());
    Tokens swapped = prompt;
    std::swap(swapped[1], swapped[5]);
    EXPECT_LT((enc.encode(prompt, true) - enc.encode(swapped, true)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_GT((enc.encode(prompt) - enc.encode(swapped)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Encoder, IgnoresLaterBackboneLayers) {
    BackboneWeights w = weights();
    const Vector before = QueryEncoder(w).encode(prompt);
    w.layers[2].wq.setZero();
    EXPECT_TRUE(QueryEncoder(w).encode(prompt) == before);
}

TEST(Route, ZeroParamsGiveZeroAlphaHalfGates) {
    const RouterShape s = shape_for(small_config(), 4);
    const RoutingOutput r = route(RouterParams::zeros(s), Vector::Ones(16), 0.8);
    EXPECT_EQ(r.alpha.rows(), 1);
    EXPECT_EQ(r.alpha.cols(), 4);
    EXPECT_EQ(r.alpha.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_TRUE(r.gamma == Matrix::Constant(1, 2, 0.5));
}

TEST(Route, RangesHoldForRandomRouters) {
    const RouterShape s = shape_for(small_config(), 4);
    Rng rng(3);
    for (int i = 0; i < 50; ++i) {
        const double scale = 0.1 + rng.uniform();
        const RoutingOutput r = route(random_router(s, i, 2.0), rng.gaussian(16, 1, 3.0), scale);
        EXPECT_LE(r.alpha.cwiseAbs().maxCoeff(), scale);
        EXPECT_GE(r.gamma.minCoeff(), 0.0);
        EXPECT_LE(r.gamma.maxCoeff(), 1.0);
    }
}

TEST(Route, EmbeddingShapeAndFinitenessChecked) {
    const RouterShape s = shape_for(small_config(), 4);
    EXPECT_THROW(route(RouterParams::zeros(s), Vector::Ones(15), 1.0), Error);
    Vector bad = Vector::Ones(16);
    bad(3) = std::numeric_limits<double>::quiet_NaN();
    try {
        route(RouterParams::zeros(s), bad, 1.0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::numeric);
    }
}

TEST(Route, AlphaGradientMatchesFiniteDifferences) {
    RouterShape s = shape_for(small_config(), 3);
    s.hidden = 8;
    const RouterParams base = random_router(s, 5);
    Rng rng(6);
    const Vector emb = rng.gaussian(16, 1);
    // Every entry of the first alpha-branch weight matrix, for alpha entry (0, 1).
    const DifferentiableFn fn = [&](const Vector& x, Vector* g) {
        RouterParams p = base;
        p.a_w1 = Eigen::Map<const Matrix>(x.data(), s.embed, s.hidden);
        ad::Tape t(g != nullptr);
        const RouterVars v = bind_router(t, p, g != nullptr);
        const RoutedVars r = route_graph(t, v, emb, 0.9);
        ad::Var a = ad::slice_cols(t, r.alpha, 1, 1);
        if (g) {
            t.backward(a);
            const Matrix gw = t.grad(v.a_w1);
            *g = Eigen::Map<const Vector>(gw.data(), gw.size());
        }
        return t.value(a)(0, 0);
    };
    EXPECT_LT(grad_check(fn, Eigen::Map<const Vector>(base.a_w1.data(), base.a_w1.size()), 1e-6).max_rel_err, 1e-4);
}

TEST(Route, LipschitzInEmbedding) {
    const RouterShape s = shape_for(small_config(), 4);
    const RouterParams p = random_router(s, 7, 0.3);
    auto op_norm = [](const Matrix& m) { return Eigen::JacobiSVD<Matrix>(m).singularValues()(0); };
    // GELU slope is below 1.13 everywhere; tanh slope at most 1, sigmoid at most 1/4.
    const double la = 1.13 * op_norm(p.a_w1) * op_norm(p.a_w2);
    const double lg = 0.25 * 1.13 * op_norm(p.g_w1) * op_norm(p.g_w2);
    Rng rng(8);
    for (int i = 0; i < 50; ++i) {
        const Vector e = rng.gaussian(16, 1);
        Vector d = rng.gaussian(16, 1);
        d *= 1e-3 / d.norm();
        const RoutingOutput a = route(p, e, 1.0), b = route(p, e + d, 1.0);
        EXPECT_LE((a.alpha - b.alpha).norm(), la * 1e-3 + 1e-12);
        EXPECT_LE((a.gamma - b.gamma).norm(), lg * 1e-3 + 1e-12);
    }
}

TEST(ApplyIcr, ClosedGatesReproduceZeroShot) {
    const PIDSet pids = random_pids(small_config(), 4, 1);
    RouterParams p = random_router(shape_for(small_config(), 4), 9);
    // Zero the gate branch and push its bias far negative: gamma underflows to exactly 0.
    p.g_w2.setZero();
    p.g_b2.setConstant(-1e4);
    const QueryEncoder enc(weights());
    EXPECT_LT((apply_icr(weights(), pids, p, enc, prompt, 0.8) - forward(weights(), prompt)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ApplyIcr, ZeroAlphaRowGivesZeroBias) {
    const PIDSet pids = random_pids(small_config(), 4, 1);
    RoutingOutput r;
    r.alpha = Matrix::Zero(1, 4);
    r.gamma = Matrix::Constant(1, 2, 0.9);
    EXPECT_LT((routed_forward(weights(), pids, r, prompt) - forward(weights(), prompt)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ApplyIcr, MatchesElementwiseBiasOracle) {
    const PIDSet pids = random_pids(small_config(), 4, 2);
    const RouterParams p = random_router(shape_for(small_config(), 4), 10);
    const QueryEncoder enc(weights());
    RoutingOutput routing;
    const Vector icr = apply_icr(weights(), pids, p, enc, prompt, 0.8, &routing);

    // The single routed layer is the last, so its Q and K are those of the plain pass.
    ForwardTrace trace;
    trace.keep_full = true;
    forward(weights(), prompt, nullptr, &trace);
    const Matrix& q = trace.q_full[2];
    const Matrix& k = trace.k_full[2];
    const Matrix& uq = pids.uq[0].columns();
    const Matrix& uk = pids.uk[0].columns();
    const int T = static_cast<int>(prompt.size());
    LayerBias lb;
    lb.shared_bias.resize(T, T);
    for (int i = 0; i < T; ++i)
        for (int j = 0; j < T; ++j) {
            double s = 0.0;
            for (int m = 0; m < 4; ++m) s += routing.alpha(0, m) * q.row(i).dot(uq.col(m)) * k.row(j).dot(uk.col(m));
            lb.shared_bias(i, j) = s;
        }
    lb.gates = {routing.gamma(0, 0), routing.gamma(0, 1)};
    LogitBiasPlan plan;
    plan.layers[2] = lb;
    EXPECT_LT((icr - forward(weights(), prompt, &plan)).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_GT((icr - forward(weights(), prompt)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(ApplyIcr, NeverMutatesWeights) {
    const std::string before = weights().digest();
    const PIDSet pids = random_pids(small_config(), 4, 3);
    apply_icr(weights(), pids, random_router(shape_for(small_config(), 4), 12), QueryEncoder(weights()), prompt, 0.8);
    EXPECT_EQ(weights().digest(), before);
}

TEST(ApplyIcr, DigestMismatchIsCompatibilityError) {
    PIDSet pids = random_pids(small_config(), 4, 3);
    pids.config_digest = "0000000000000000";
    try {
        apply_icr(weights(), pids, RouterParams::zeros(shape_for(small_config(), 4)), QueryEncoder(weights()), prompt, 0.8);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::compatibility);
    }
}

TEST(Container, RouterRoundTrip) {
    const RouterParams p = random_router(shape_for(small_config(), 4), 13);
    const std::string path = (std::filesystem::temp_directory_path() / "icr_router_rt.icrr").string();
    save_router(p, path, Json{{"pids", "abc"}});
    Json meta;
    const RouterParams q = load_router(path, &meta);
    EXPECT_EQ(q.shape, p.shape);
    EXPECT_EQ(meta.at("pids"), "abc");
    p.for_each([&](const std::string& name, const Matrix& m) {
        q.for_each([&](const std::string& n2, const Matrix& m2) {
            if (n2 == name) {
                EXPECT_LE((m - m2).cwiseAbs().maxCoeff(), std::ldexp(std::max(1.0, m.cwiseAbs().maxCoeff()), -23));
            }
        });
    });
    std::filesystem::remove(path);
}
