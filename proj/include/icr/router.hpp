#pragma once

// Query-conditioned routing: a frozen encoder embeds the zero-shot prompt, a
// two-branch MLP maps the embedding to per-layer PID weights alpha and
// per-head gates gamma, and the gated low-rank bias is injected into the
// attention logits of the intervened layers.

#include "icr/autograd.hpp"
#include "icr/backbone.hpp"
#include "icr/container.hpp"
#include "icr/errors.hpp"
#include "icr/numcore.hpp"
#include "icr/pidlab.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace icr {

/// Frozen copy of the backbone's embeddings and first block, run
/// bidirectionally and mean-pooled over the span.
class QueryEncoder {
public:
    QueryEncoder() = default;

    explicit QueryEncoder(const BackboneWeights& w) {
        slice_.config = w.config;
        slice_.tok_emb = w.tok_emb;
        slice_.pos_emb = w.pos_emb;
        slice_.layers = {w.layers.front()};
        slice_.lnf_g = w.lnf_g;
        slice_.lnf_b = w.lnf_b;
        slice_.unembed = w.unembed;
    }

    int width() const { return slice_.config.width; }

    Vector encode(const Tokens& span, bool zero_positions = false) const {
        require(!span.empty(), ErrorKind::input, "cannot encode an empty span");
        ad::Tape t(false);
        const WeightVars wv = bind_weights(t, slice_, false);
        ad::Var x = residual_stream(t, wv, slice_.config, span, 1, false, {}, nullptr, nullptr, zero_positions);
        return t.value(x).colwise().mean().transpose();
    }

private:
    BackboneWeights slice_;
};

struct RouterShape {
    int embed = 64;  // e
    int hidden = 256;
    int n_layers = 2; // L_int
    int rank = 8;     // r
    int n_heads = 4;  // H

    bool operator==(const RouterShape&) const = default;
};

struct RouterParams {
    RouterShape shape;
    Matrix a_w1, a_b1, a_w2, a_b2; // alpha branch
    Matrix g_w1, g_b1, g_w2, g_b2; // gamma branch

    template <class F>
    void for_each(F&& f) {
        f("alpha.w1", a_w1);
        f("alpha.b1", a_b1);
        f("alpha.w2", a_w2);
        f("alpha.b2", a_b2);
        f("gamma.w1", g_w1);
        f("gamma.b1", g_b1);
        f("gamma.w2", g_w2);
        f("gamma.b2", g_b2);
    }

    template <class F>
    void for_each(F&& f) const {
        const_cast<RouterParams*>(this)->for_each(
            [&](const std::string& name, Matrix& m) { f(name, static_cast<const Matrix&>(m)); });
    }

    static RouterParams zeros(const RouterShape& s) {
        RouterParams p;
        p.shape = s;
        p.a_w1 = Matrix::Zero(s.embed, s.hidden);
        p.a_b1 = Matrix::Zero(1, s.hidden);
        p.a_w2 = Matrix::Zero(s.hidden, s.n_layers * s.rank);
        p.a_b2 = Matrix::Zero(1, s.n_layers * s.rank);
        p.g_w1 = Matrix::Zero(s.embed, s.hidden);
        p.g_b1 = Matrix::Zero(1, s.hidden);
        p.g_w2 = Matrix::Zero(s.hidden, s.n_layers * s.n_heads);
        p.g_b2 = Matrix::Zero(1, s.n_layers * s.n_heads);
        return p;
    }

    /// Hidden layers ~ N(0, 1/e); the alpha output layer starts at zero so
    /// the untrained router reproduces zero-shot behavior.
    static RouterParams init(const RouterShape& s, std::uint64_t seed) {
        RouterParams p = zeros(s);
        Rng rng(seed);
        const double s1 = 1.0 / std::sqrt(static_cast<double>(s.embed));
        const double s2 = 1.0 / std::sqrt(static_cast<double>(s.hidden));
        p.a_w1 = rng.gaussian(s.embed, s.hidden, s1);
        p.g_w1 = rng.gaussian(s.embed, s.hidden, s1);
        p.g_w2 = rng.gaussian(s.hidden, s.n_layers * s.n_heads, s2);
        return p;
    }

    double abs_sum() const {
        double t = 0.0;
        for_each([&](const std::string&, const Matrix& m) { t += m.cwiseAbs().sum(); });
        return t;
    }
};

struct RoutingOutput {
    Matrix alpha; // L_int x r
    Matrix gamma; // L_int x H
    double alpha_scale = 1.0;
};

struct RouterVars {
    ad::Var a_w1, a_b1, a_w2, a_b2, g_w1, g_b1, g_w2, g_b2;

    std::vector<ad::Var> list() const { return {a_w1, a_b1, a_w2, a_b2, g_w1, g_b1, g_w2, g_b2}; }
};

inline RouterVars bind_router(ad::Tape& t, const RouterParams& p, bool trainable) {
    auto bind = [&](const Matrix& m) { return trainable ? t.param(m) : t.constant_ref(m); };
    return RouterVars{bind(p.a_w1), bind(p.a_b1), bind(p.a_w2), bind(p.a_b2),
                      bind(p.g_w1), bind(p.g_b1), bind(p.g_w2), bind(p.g_b2)};
}

/// Graph outputs of the router: 1 x (L_int r) alpha and 1 x (L_int H) gamma.
struct RoutedVars {
    ad::Var alpha;
    ad::Var gamma;
};

inline RoutedVars route_graph(ad::Tape& t, const RouterVars& v, const Vector& emb, double alpha_scale) {
    ad::Var x = t.constant(emb.transpose());
    ad::Var ha = ad::gelu(t, ad::add_row(t, ad::matmul(t, x, v.a_w1), v.a_b1));
    ad::Var alpha = ad::scale(t, ad::tanh(t, ad::add_row(t, ad::matmul(t, ha, v.a_w2), v.a_b2)), alpha_scale);
    ad::Var hg = ad::gelu(t, ad::add_row(t, ad::matmul(t, x, v.g_w1), v.g_b1));
    ad::Var gamma = ad::sigmoid(t, ad::add_row(t, ad::matmul(t, hg, v.g_w2), v.g_b2));
    return {alpha, gamma};
}

inline void check_router_input(const RouterParams& p, const Vector& emb) {
    require(emb.size() == p.shape.embed, ErrorKind::shape,
            "embedding length " + std::to_string(emb.size()) + " does not match router input " +
                std::to_string(p.shape.embed));
    require(emb.allFinite(), ErrorKind::numeric, "query embedding is not finite");
}

inline RoutingOutput to_routing(const RouterShape& s, const Matrix& alpha_row, const Matrix& gamma_row, double scale) {
    RoutingOutput out;
    out.alpha_scale = scale;
    out.alpha.resize(s.n_layers, s.rank);
    out.gamma.resize(s.n_layers, s.n_heads);
    for (int l = 0; l < s.n_layers; ++l) {
        out.alpha.row(l) = alpha_row.block(0, l * s.rank, 1, s.rank);
        out.gamma.row(l) = gamma_row.block(0, l * s.n_heads, 1, s.n_heads);
    }
    return out;
}

inline RoutingOutput route(const RouterParams& p, const Vector& emb, double alpha_scale) {
    check_router_input(p, emb);
    ad::Tape t(false);
    const RouterVars v = bind_router(t, p, false);
    const RoutedVars r = route_graph(t, v, emb, alpha_scale);
    require(t.value(r.alpha).allFinite() && t.value(r.gamma).allFinite(), ErrorKind::numeric,
            "router produced non-finite output");
    return to_routing(p.shape, t.value(r.alpha), t.value(r.gamma), alpha_scale);
}

inline void check_router_pids(const RouterParams& p, const PIDSet& pids, const ModelConfig& cfg) {
    check_compatible(pids, cfg);
    require(p.shape.n_layers == static_cast<int>(pids.layers.size()) && p.shape.rank == pids.rank &&
                p.shape.n_heads == cfg.n_heads,
            ErrorKind::compatibility, "router shape does not match the PID set and model");
}

/// Bias hook that injects gamma_h * (Q U_q) diag(alpha) (K U_k)^T at each
/// intervened layer, with alpha/gamma taken from 1 x (L r) / 1 x (L H) rows.
inline BiasHook icr_hook(const PIDSet& pids, ad::Var alpha_row, ad::Var gamma_row, int n_heads) {
    return [&pids, alpha_row, gamma_row, n_heads](ad::Tape& t, int layer, ad::Var q,
                                                   ad::Var k) -> std::optional<ad::HeadBias> {
        const int i = pids.slot(layer);
        if (i < 0) return std::nullopt;
        const auto ui = static_cast<std::size_t>(i);
        ad::Var a = ad::slice_cols(t, alpha_row, i * pids.rank, pids.rank);
        ad::Var g = ad::slice_cols(t, gamma_row, i * n_heads, n_heads);
        ad::Var bias = delta_logits(t, q, k, pids.uq[ui].columns(), pids.uk[ui].columns(), a);
        return ad::HeadBias{bias, g};
    };
}

/// Logits at the last position with a given routing applied.
inline Vector routed_forward(const BackboneWeights& w, const PIDSet& pids, const RoutingOutput& routing,
                             const Tokens& tokens) {
    check_compatible(pids, w.config);
    const int L = static_cast<int>(pids.layers.size());
    require(routing.alpha.rows() == L && routing.alpha.cols() == pids.rank && routing.gamma.rows() == L &&
                routing.gamma.cols() == w.config.n_heads,
            ErrorKind::shape, "routing output does not match the PID set");
    ad::Tape t(false);
    const WeightVars wv = bind_weights(t, w, false);
    Matrix a(1, L * pids.rank), g(1, L * w.config.n_heads);
    for (int l = 0; l < L; ++l) {
        a.block(0, l * pids.rank, 1, pids.rank) = routing.alpha.row(l);
        g.block(0, l * w.config.n_heads, 1, w.config.n_heads) = routing.gamma.row(l);
    }
    const BiasHook hook = icr_hook(pids, t.constant(std::move(a)), t.constant(std::move(g)), w.config.n_heads);
    const int last = static_cast<int>(tokens.size()) - 1;
    return t.value(forward_logits(t, wv, w.config, tokens, {last}, hook)).row(0).transpose();
}

/// Routes the zero-shot prompt and returns its next-token logits.
inline Vector apply_icr(const BackboneWeights& w, const PIDSet& pids, const RouterParams& params,
                        const QueryEncoder& encoder, const Tokens& zero_shot_tokens, double alpha_scale,
                        RoutingOutput* routing_out = nullptr) {
    check_router_pids(params, pids, w.config);
    const RoutingOutput routing = route(params, encoder.encode(zero_shot_tokens), alpha_scale);
    if (routing_out) *routing_out = routing;
    return routed_forward(w, pids, routing, zero_shot_tokens);
}

// ---------------------------------------------------------------------------
// Container

inline void save_router(const RouterParams& p, const std::string& path, const Json& extra = Json::object()) {
    BinaryWriter out(router_magic);
    out.u32(container_version);
    for (int v : {p.shape.n_layers, p.shape.rank, p.shape.n_heads, p.shape.embed, p.shape.hidden})
        out.u32(static_cast<std::uint32_t>(v));
    write_tensors(out, p);
    out.json(extra);
    out.commit(path);
}

inline RouterParams load_router(const std::string& path, Json* meta_out = nullptr) {
    BinaryReader in(path, router_magic);
    in.version(container_version);
    RouterShape s;
    s.n_layers = static_cast<int>(in.u32());
    s.rank = static_cast<int>(in.u32());
    s.n_heads = static_cast<int>(in.u32());
    s.embed = static_cast<int>(in.u32());
    s.hidden = static_cast<int>(in.u32());
    require(s.n_layers > 0 && s.rank > 0 && s.n_heads > 0 && s.embed > 0 && s.hidden > 0 && s.hidden <= 65536 &&
                s.embed <= 65536,
            ErrorKind::format, "router header has invalid dimensions");
    RouterParams p = RouterParams::zeros(s);
    read_tensors(in, p, ErrorKind::format);
    const Json meta = in.json();
    in.expect_end();
    if (meta_out) *meta_out = meta;
    return p;
}

} // namespace icr
