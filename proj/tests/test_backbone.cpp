#include "icr/backbone.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace icr;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.n_layers = 3;
    c.n_heads = 2;
    c.width = 8;
    c.vocab_size = 20;
    c.max_seq_len = 16;
    return c;
}

Tokens random_tokens(Rng& rng, int n, int vocab) {
    Tokens t;
    for (int i = 0; i < n; ++i) t.push_back(static_cast<int>(rng.index(static_cast<std::size_t>(vocab))));
    return t;
}

// Reference forward written directly against the weights, without the tape.
Matrix ref_layer_norm(const Matrix& x, const Matrix& g, const Matrix& b) {
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double mu = x.row(i).mean();
        const double var = (x.row(i).array() - mu).square().mean();
        for (Eigen::Index j = 0; j < x.cols(); ++j) out(i, j) = (x(i, j) - mu) / std::sqrt(var + 1e-5) * g(0, j) + b(0, j);
    }
    return out;
}

struct RefOut {
    Vector logits;
    std::vector<Vector> q_last, k_last;
};

RefOut ref_forward(const BackboneWeights& w, const Tokens& tokens) {
    const ModelConfig& c = w.config;
    const int T = static_cast<int>(tokens.size()), dk = c.head_dim();
    Matrix x(T, c.width);
    for (int i = 0; i < T; ++i) x.row(i) = w.tok_emb.row(tokens[static_cast<std::size_t>(i)]) + w.pos_emb.row(i);
    RefOut out;
    for (const auto& lw : w.layers) {
        const Matrix h = ref_layer_norm(x, lw.ln1_g, lw.ln1_b);
        Matrix att(T, c.width);
        Vector q_last(c.width), k_last(c.width);
        for (int head = 0; head < c.n_heads; ++head) {
            // Per-head projections from the column blocks of the weight matrices.
            const Matrix qh = h * lw.wq.middleCols(head * dk, dk);
            const Matrix kh = h * lw.wk.middleCols(head * dk, dk);
            const Matrix vh = h * lw.wv.middleCols(head * dk, dk);
            q_last.segment(head * dk, dk) = qh.row(T - 1).transpose();
            k_last.segment(head * dk, dk) = kh.row(T - 1).transpose();
            for (int i = 0; i < T; ++i) {
                std::vector<double> s(static_cast<std::size_t>(i + 1));
                double mx = -1e300, z = 0;
                for (int j = 0; j <= i; ++j) {
                    s[static_cast<std::size_t>(j)] = qh.row(i).dot(kh.row(j)) / std::sqrt(double(dk));
                    mx = std::max(mx, s[static_cast<std::size_t>(j)]);
                }
                for (double& v : s) z += (v = std::exp(v - mx));
                RowVector o = RowVector::Zero(dk);
                for (int j = 0; j <= i; ++j) o += s[static_cast<std::size_t>(j)] / z * vh.row(j);
                att.block(i, head * dk, 1, dk) = o;
            }
        }
        out.q_last.push_back(q_last);
        out.k_last.push_back(k_last);
        x += att * lw.wo;
        Matrix m = ref_layer_norm(x, lw.ln2_g, lw.ln2_b) * lw.w1;
        m.rowwise() += lw.b1.row(0);
        m = m.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::tanh(0.7978845608028654 * (v + 0.044715 * v * v * v))); });
        Matrix y = m * lw.w2;
        y.rowwise() += lw.b2.row(0);
        x += y;
    }
    out.logits = (ref_layer_norm(x.row(T - 1), w.lnf_g, w.lnf_b) * w.unembed).transpose();
    return out;
}

LogitBiasPlan random_plan(const ModelConfig& c, int T, Rng& rng, double gate_value = -1.0) {
    LogitBiasPlan plan;
    for (int l : c.routed_layers()) {
        LayerBias lb;
        lb.shared_bias = rng.gaussian(T, T);
        for (int h = 0; h < c.n_heads; ++h) lb.gates.push_back(gate_value < 0 ? rng.uniform() : gate_value);
        plan.layers[l] = lb;
    }
    return plan;
}

} // namespace

TEST(Config, DefaultsAndLastThird) {
    const ModelConfig c;
    EXPECT_EQ(c.n_layers, 6);
    EXPECT_EQ(c.n_heads, 4);
    EXPECT_EQ(c.width, 64);
    EXPECT_EQ(c.head_dim(), 16);
    EXPECT_EQ(c.routed_layers(), (std::vector<int>{4, 5}));
    EXPECT_EQ(ModelConfig::last_third(7), (std::vector<int>{4, 5, 6}));
    EXPECT_EQ(ModelConfig::last_third(1), (std::vector<int>{0}));
}

TEST(Config, InvalidLayersAndWidthRejected) {
    ModelConfig c = small_config();
    c.intervened_layers = {3};
    EXPECT_THROW(c.validate(), Error);
    c.intervened_layers = {2, 1};
    EXPECT_THROW(c.validate(), Error);
    c.intervened_layers = {};
    c.width = 9;
    EXPECT_THROW(c.validate(), Error);
}

TEST(Forward, MatchesReferenceImplementation) {
    const BackboneWeights w = BackboneWeights::init(small_config(), 3);
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        const Tokens t = random_tokens(rng, 1 + trial, 20);
        ForwardTrace trace;
        const Vector logits = forward(w, t, nullptr, &trace);
        const RefOut ref = ref_forward(w, t);
        EXPECT_LT((logits - ref.logits).cwiseAbs().maxCoeff(), 1e-10);
        for (int l = 0; l < 3; ++l) {
            EXPECT_EQ(trace.q_last[static_cast<std::size_t>(l)].size(), 8);
            EXPECT_LT((trace.q_last[static_cast<std::size_t>(l)] - ref.q_last[static_cast<std::size_t>(l)]).cwiseAbs().maxCoeff(), 1e-10);
            EXPECT_LT((trace.k_last[static_cast<std::size_t>(l)] - ref.k_last[static_cast<std::size_t>(l)]).cwiseAbs().maxCoeff(), 1e-10);
        }
    }
}

TEST(Forward, VocabAndLengthErrors) {
    const BackboneWeights w = BackboneWeights::init(small_config(), 3);
    try {
        forward(w, {1, 20});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::vocab);
    }
    EXPECT_THROW(forward(w, Tokens(17, 1)), Error);
}

TEST(Forward, ZeroGatesAreBitwiseNoOp) {
    const BackboneWeights w = BackboneWeights::init(small_config(), 5);
    Rng rng(6);
    const Tokens t = random_tokens(rng, 9, 20);
    const LogitBiasPlan plan = random_plan(w.config, 9, rng, 0.0);
    EXPECT_TRUE(forward(w, t, &plan) == forward(w, t));
}

TEST(Forward, ZeroBiasIsNoOp) {
    const BackboneWeights w = BackboneWeights::init(small_config(), 5);
    Rng rng(7);
    const Tokens t = random_tokens(rng, 9, 20);
    LogitBiasPlan plan = random_plan(w.config, 9, rng);
    for (auto& [l, lb] : plan.layers) lb.shared_bias.setZero();
    EXPECT_LT((forward(w, t, &plan) - forward(w, t)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, BiasChangesOutputAndShapeIsChecked) {
    const BackboneWeights w = BackboneWeights::init(small_config(), 5);
    Rng rng(8);
    const Tokens t = random_tokens(rng, 9, 20);
    const LogitBiasPlan plan = random_plan(w.config, 9, rng);
    EXPECT_GT((forward(w, t, &plan) - forward(w, t)).cwiseAbs().maxCoeff(), 1e-6);
    const LogitBiasPlan wrong = random_plan(w.config, 8, rng);
    try {
        forward(w, t, &wrong);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::shape);
    }
}

TEST(Forward, BiasedAttentionStaysCausalAndNormalized) {
    const BackboneWeights w = BackboneWeights::init(small_config(), 9);
    Rng rng(10);
    for (int trial = 0; trial < 100; ++trial) {
        const int T = 2 + static_cast<int>(rng.index(10));
        const Tokens t = random_tokens(rng, T, 20);
        LogitBiasPlan plan = random_plan(w.config, T, rng);
        for (auto& [l, lb] : plan.layers) lb.shared_bias *= 100.0;
        ForwardTrace trace;
        trace.keep_full = true;
        forward(w, t, trial % 2 ? &plan : nullptr, &trace);
        for (const auto& layer : trace.attention)
            for (const Matrix& p : layer.per_head)
                for (int i = 0; i < T; ++i) {
                    ASSERT_NEAR(p.row(i).sum(), 1.0, 1e-6);
                    for (int j = i + 1; j < T; ++j) ASSERT_EQ(p(i, j), 0.0);
                }
    }
}

TEST(DeltaLogits, ZeroAlphaAndRankOneExpansion) {
    Rng rng(11);
    const Matrix q = rng.gaussian(4, 3), k = rng.gaussian(4, 3);
    Matrix e1 = Matrix::Zero(3, 1), e2 = Matrix::Zero(3, 1);
    e1(0, 0) = 1.0;
    e2(1, 0) = 1.0;
    EXPECT_EQ(delta_logits(q, k, e1, e2, Vector::Zero(1)).cwiseAbs().maxCoeff(), 0.0);
    Vector a(1);
    a << 2.5;
    const Matrix d = delta_logits(q, k, e1, e2, a);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) EXPECT_NEAR(d(i, j), 2.5 * q(i, 0) * k(j, 1), 1e-14);
}

TEST(DeltaLogits, MatchesTripleLoopOracle) {
    Rng rng(12);
    const Matrix q = rng.gaussian(5, 8), k = rng.gaussian(5, 8);
    const Matrix uq = random_orthogonal_basis(8, 3, 1).columns(), uk = random_orthogonal_basis(8, 3, 2).columns();
    const Vector a = rng.gaussian(3, 1);
    const Matrix d = delta_logits(q, k, uq, uk, a);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
            double s = 0.0;
            for (int m = 0; m < 3; ++m) s += a(m) * q.row(i).dot(uq.col(m)) * k.row(j).dot(uk.col(m));
            EXPECT_NEAR(d(i, j), s, 1e-10);
        }
}

TEST(DeltaLogits, RankMismatchIsShapeError) {
    const Matrix uq = random_orthogonal_basis(8, 3, 1).columns();
    try {
        delta_logits(Matrix::Ones(2, 8), Matrix::Ones(2, 8), uq, uq, Vector::Ones(2));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::shape);
    }
}

TEST(DeltaLogits, RankBoundedByR) {
    Rng rng(13);
    for (int trial = 0; trial < 20; ++trial) {
        const int r = 1 + trial % 4;
        const Matrix q = rng.gaussian(12, 8), k = rng.gaussian(12, 8);
        const Matrix d = delta_logits(q, k, random_orthogonal_basis(8, r, trial).columns(),
                                      random_orthogonal_basis(8, r, trial + 50).columns(), rng.gaussian(r, 1));
        const Vector sv = Eigen::JacobiSVD<Matrix>(d).singularValues();
        for (Eigen::Index i = r; i < sv.size(); ++i) EXPECT_LT(sv(i), 1e-9 * sv(0));
    }
}

TEST(KernelReparam, IdentityAtZeroAndEquivalence) {
    const Matrix uq = random_orthogonal_basis(8, 3, 3).columns(), uk = random_orthogonal_basis(8, 3, 4).columns();
    EXPECT_TRUE(kernel_reparam(uq, uk, Vector::Zero(3)) == Matrix::Identity(8, 8));
    Rng rng(14);
    for (int trial = 0; trial < 20; ++trial) {
        const Vector a = rng.gaussian(3, 1);
        const Matrix q = rng.gaussian(6, 8), k = rng.gaussian(6, 8);
        const Matrix m = kernel_reparam(uq, uk, a);
        EXPECT_LT((q * m * k.transpose() - q * k.transpose() - delta_logits(q, k, uq, uk, a)).cwiseAbs().maxCoeff(), 1e-9);
        const Vector sv = Eigen::JacobiSVD<Matrix>(m - Matrix::Identity(8, 8)).singularValues();
        for (Eigen::Index i = 3; i < sv.size(); ++i) EXPECT_LT(sv(i), 1e-9);
    }
}

TEST(DeltaLogits, GraphVersionMatchesDense) {
    Rng rng(15);
    const Matrix q = rng.gaussian(5, 8), k = rng.gaussian(5, 8);
    const Matrix uq = random_orthogonal_basis(8, 4, 5).columns(), uk = random_orthogonal_basis(8, 4, 6).columns();
    const Vector a = rng.gaussian(4, 1);
    ad::Tape t(false);
    const Matrix g = t.value(delta_logits(t, t.constant(q), t.constant(k), uq, uk, t.constant(a.transpose())));
    EXPECT_LT((g - delta_logits(q, k, uq, uk, a)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ShiftBaseline, ZeroBetaOrVectorIsNoOp) {
    const BackboneWeights w = BackboneWeights::init(small_config(), 16);
    Rng rng(17);
    const Tokens t = random_tokens(rng, 7, 20);
    ShiftVectorBaseline b;
    b.shift.assign(3, rng.gaussian(8, 1));
    b.beta.assign(3, 0.0);
    EXPECT_LT((shift_baseline_apply(w, t, b) - forward(w, t)).cwiseAbs().maxCoeff(), 1e-12);
    b.shift.assign(3, Vector::Zero(8));
    b.beta.assign(3, 0.7);
    EXPECT_LT((shift_baseline_apply(w, t, b) - forward(w, t)).cwiseAbs().maxCoeff(), 1e-12);
    b.shift.assign(3, rng.gaussian(8, 1));
    EXPECT_GT((shift_baseline_apply(w, t, b) - forward(w, t)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(ShiftBaseline, ShapeMismatchIsError) {
    const BackboneWeights w = BackboneWeights::init(small_config(), 16);
    ShiftVectorBaseline b;
    b.shift.assign(3, Vector::Zero(7));
    b.beta.assign(3, 0.1);
    EXPECT_THROW(shift_baseline_apply(w, {1, 2}, b), Error);
}

TEST(ShiftVector, OneDemoAndDuplicates) {
    const BackboneWeights w = BackboneWeights::init(small_config(), 18);
    const Tokens demo{1, 4, 6, 2};
    ForwardTrace trace;
    forward(w, demo, nullptr, &trace);
    const ShiftVectorBaseline one = build_shift_vector(w, {demo});
    for (int l = 0; l < 3; ++l) {
        EXPECT_TRUE(one.shift[static_cast<std::size_t>(l)] == trace.mha_last[static_cast<std::size_t>(l)]);
        EXPECT_EQ(one.beta[static_cast<std::size_t>(l)], 0.1);
    }
    const ShiftVectorBaseline dup = build_shift_vector(w, {demo, demo, demo});
    for (int l = 0; l < 3; ++l)
        EXPECT_LT((dup.shift[static_cast<std::size_t>(l)] - one.shift[static_cast<std::size_t>(l)]).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(ShiftVector, MatchesStreamingMean) {
    const BackboneWeights w = BackboneWeights::init(small_config(), 19);
    Rng rng(20);
    std::vector<Tokens> demos;
    for (int i = 0; i < 16; ++i) demos.push_back(random_tokens(rng, 3 + i % 5, 20));
    const ShiftVectorBaseline b = build_shift_vector(w, demos);
    std::vector<Vector> mean(3, Vector::Zero(8));
    for (std::size_t i = 0; i < demos.size(); ++i) {
        ForwardTrace trace;
        forward(w, demos[i], nullptr, &trace);
        for (std::size_t l = 0; l < 3; ++l) mean[l] += (trace.mha_last[l] - mean[l]) / static_cast<double>(i + 1);
    }
    for (std::size_t l = 0; l < 3; ++l) EXPECT_LT((b.shift[l] - mean[l]).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_THROW(build_shift_vector(w, {}), Error);
}

TEST(Weights, InitIsFiniteDeterministicAndDigestSensitive) {
    const BackboneWeights a = BackboneWeights::init(small_config(), 21);
    const BackboneWeights b = BackboneWeights::init(small_config(), 21);
    EXPECT_EQ(a.digest(), b.digest());
    a.for_each([](const std::string&, const Matrix& m) { EXPECT_TRUE(m.allFinite()); });
    BackboneWeights c = a;
    c.layers[1].wk(0, 0) += 1e-9;
    EXPECT_NE(a.digest(), c.digest());
}

TEST(Weights, Binary32RoundingIsIdempotent) {
    BackboneWeights a = BackboneWeights::init(small_config(), 22);
    round_to_binary32(a);
    const std::string d = a.digest();
    round_to_binary32(a);
    EXPECT_EQ(d, a.digest());
}
