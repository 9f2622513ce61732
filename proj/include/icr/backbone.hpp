#pragma once

// Toy pre-norm causal transformer with last-token Q/K capture, per-layer
// attention-logit bias injection and the residual shift-vector baseline.

#include "icr/autograd.hpp"
#include "icr/errors.hpp"
#include "icr/numcore.hpp"

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace icr {

using Tokens = std::vector<int>;

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << v;
    return os.str();
}

struct ModelConfig {
    int n_layers = 6;
    int n_heads = 4;
    int width = 64;
    int vocab_size = 128;
    int max_seq_len = 192;
    int mlp_mult = 4;
    std::vector<int> intervened_layers; // empty means default (last third)

    int head_dim() const { return width / n_heads; }

    static std::vector<int> last_third(int n_layers) {
        const int n = (n_layers + 2) / 3;
        std::vector<int> out;
        for (int l = n_layers - n; l < n_layers; ++l) out.push_back(l);
        return out;
    }

    std::vector<int> routed_layers() const {
        return intervened_layers.empty() ? last_third(n_layers) : intervened_layers;
    }

    void validate() const {
        require(n_layers > 0 && n_heads > 0 && width > 0 && vocab_size > 0 && max_seq_len > 0, ErrorKind::config,
                "model dimensions must be positive");
        require(width % n_heads == 0, ErrorKind::config, "width must equal heads * head_dim");
        int prev = -1;
        for (int l : routed_layers()) {
            require(l >= 0 && l < n_layers, ErrorKind::config, "intervened layer out of range");
            require(l > prev, ErrorKind::config, "intervened layers must be strictly ascending");
            prev = l;
        }
    }

    std::string canonical() const {
        std::ostringstream os;
        os << "L=" << n_layers << ";H=" << n_heads << ";d=" << width << ";V=" << vocab_size << ";T=" << max_seq_len
           << ";mlp=" << mlp_mult << ";int=";
        for (int l : routed_layers()) os << l << ',';
        return os.str();
    }

    std::string digest() const {
        const std::string c = canonical();
        return hex64(fnv1a(c.data(), c.size()));
    }
};

struct LayerWeights {
    Matrix ln1_g, ln1_b;
    Matrix wq, wk, wv, wo;
    Matrix ln2_g, ln2_b;
    Matrix w1, b1, w2, b2;
};

struct BackboneWeights {
    ModelConfig config;
    Matrix tok_emb; // V x d
    Matrix pos_emb; // T_max x d
    std::vector<LayerWeights> layers;
    Matrix lnf_g, lnf_b;
    Matrix unembed; // d x V

    template <class F>
    void for_each(F&& f) {
        f("tok_emb", tok_emb);
        f("pos_emb", pos_emb);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            auto& w = layers[l];
            const std::string p = "layer" + std::to_string(l) + ".";
            f(p + "ln1_g", w.ln1_g);
            f(p + "ln1_b", w.ln1_b);
            f(p + "wq", w.wq);
            f(p + "wk", w.wk);
            f(p + "wv", w.wv);
            f(p + "wo", w.wo);
            f(p + "ln2_g", w.ln2_g);
            f(p + "ln2_b", w.ln2_b);
            f(p + "w1", w.w1);
            f(p + "b1", w.b1);
            f(p + "w2", w.w2);
            f(p + "b2", w.b2);
        }
        f("lnf_g", lnf_g);
        f("lnf_b", lnf_b);
        f("unembed", unembed);
    }

    template <class F>
    void for_each(F&& f) const {
        const_cast<BackboneWeights*>(this)->for_each(
            [&](const std::string& name, Matrix& m) { f(name, static_cast<const Matrix&>(m)); });
    }

    /// Hash of every parameter's bytes; used to prove weights stayed frozen.
    std::string digest() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for_each([&](const std::string&, const Matrix& m) { h = fnv1a(m.data(), sizeof(double) * m.size(), h); });
        return hex64(h);
    }

    static BackboneWeights init(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Rng rng(seed);
        const int d = cfg.width;
        // Fan-in scaling; residual writers shrink with depth.
        const double s = 1.0 / std::sqrt(static_cast<double>(d));
        const double s_out = s / std::sqrt(2.0 * cfg.n_layers);
        const double s_mlp_out = s_out / std::sqrt(static_cast<double>(cfg.mlp_mult));
        BackboneWeights w;
        w.config = cfg;
        w.tok_emb = rng.gaussian(cfg.vocab_size, d, 1.0);
        w.pos_emb = rng.gaussian(cfg.max_seq_len, d, 0.5);
        for (int l = 0; l < cfg.n_layers; ++l) {
            LayerWeights lw;
            lw.ln1_g = Matrix::Ones(1, d);
            lw.ln1_b = Matrix::Zero(1, d);
            lw.wq = rng.gaussian(d, d, s);
            lw.wk = rng.gaussian(d, d, s);
            lw.wv = rng.gaussian(d, d, s);
            lw.wo = rng.gaussian(d, d, s_out);
            lw.ln2_g = Matrix::Ones(1, d);
            lw.ln2_b = Matrix::Zero(1, d);
            lw.w1 = rng.gaussian(d, cfg.mlp_mult * d, s);
            lw.b1 = Matrix::Zero(1, cfg.mlp_mult * d);
            lw.w2 = rng.gaussian(cfg.mlp_mult * d, d, s_mlp_out);
            lw.b2 = Matrix::Zero(1, d);
            w.layers.push_back(std::move(lw));
        }
        w.lnf_g = Matrix::Ones(1, d);
        w.lnf_b = Matrix::Zero(1, d);
        w.unembed = rng.gaussian(d, cfg.vocab_size, s);
        return w;
    }
};

/// Round every entry to the nearest binary32 so the weights survive the
/// container format bit-exactly.
template <class Params>
void round_to_binary32(Params& p) {
    p.for_each([](const std::string&, Matrix& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
    });
}

/// Fixed logit biases: per intervened layer a shared T x T bias and H gates.
struct LayerBias {
    Matrix shared_bias;
    std::vector<double> gates;
};

struct LogitBiasPlan {
    std::map<int, LayerBias> layers;
};

/// Shift-vector baseline: per layer, beta * v added to every position of
/// the concatenated head outputs before the output projection.
struct ShiftVectorBaseline {
    std::vector<Vector> shift; // per layer, length d
    std::vector<double> beta;  // per layer
};

// ---------------------------------------------------------------------------
// Graph construction

struct LayerVars {
    ad::Var ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct WeightVars {
    ad::Var tok_emb, pos_emb;
    std::vector<LayerVars> layers;
    ad::Var lnf_g, lnf_b, unembed;
};

inline WeightVars bind_weights(ad::Tape& t, const BackboneWeights& w, bool trainable) {
    auto bind = [&](const Matrix& m) { return trainable ? t.param(m) : t.constant_ref(m); };
    WeightVars v;
    v.tok_emb = bind(w.tok_emb);
    v.pos_emb = bind(w.pos_emb);
    for (const auto& lw : w.layers) {
        v.layers.push_back(LayerVars{bind(lw.ln1_g), bind(lw.ln1_b), bind(lw.wq), bind(lw.wk), bind(lw.wv),
                                     bind(lw.wo), bind(lw.ln2_g), bind(lw.ln2_b), bind(lw.w1), bind(lw.b1),
                                     bind(lw.w2), bind(lw.b2)});
    }
    v.lnf_g = bind(w.lnf_g);
    v.lnf_b = bind(w.lnf_b);
    v.unembed = bind(w.unembed);
    return v;
}

/// Called once per layer with that layer's full Q and K projections; returns
/// the bias to add to every head's logits, if any.
using BiasHook = std::function<std::optional<ad::HeadBias>(ad::Tape&, int layer, ad::Var q, ad::Var k)>;

struct ForwardTrace {
    bool keep_full = false;       // also keep full Q/K and attention probabilities
    std::vector<Vector> q_last;   // per layer, length d (heads concatenated)
    std::vector<Vector> k_last;
    std::vector<Vector> mha_last; // concatenated head outputs at the last position
    std::vector<Matrix> q_full, k_full;
    std::vector<ad::AttentionProbs> attention;
    std::vector<ad::Var> q_vars, k_vars;
};

inline void check_tokens(const ModelConfig& cfg, const Tokens& tokens) {
    require(!tokens.empty(), ErrorKind::input, "empty token sequence");
    require(static_cast<int>(tokens.size()) <= cfg.max_seq_len, ErrorKind::input,
            "sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                std::to_string(cfg.max_seq_len));
    for (int id : tokens)
        require(id >= 0 && id < cfg.vocab_size, ErrorKind::vocab, "token id " + std::to_string(id) + " outside vocabulary");
}

/// Embedding plus `n_blocks` transformer blocks; returns the residual stream
/// (T x d) before the final norm.
inline ad::Var residual_stream(ad::Tape& t, const WeightVars& wv, const ModelConfig& cfg, const Tokens& tokens,
                               int n_blocks, bool causal, const BiasHook& hook, const ShiftVectorBaseline* shift,
                               ForwardTrace* trace, bool zero_positions = false) {
    check_tokens(cfg, tokens);
    const int T = static_cast<int>(tokens.size());
    ad::Var x = ad::gather_rows(t, wv.tok_emb, tokens);
    if (!zero_positions) {
        std::vector<int> pos(static_cast<std::size_t>(T));
        for (int i = 0; i < T; ++i) pos[static_cast<std::size_t>(i)] = i;
        x = ad::add(t, x, ad::gather_rows(t, wv.pos_emb, std::move(pos)));
    }
    if (shift) {
        require(static_cast<int>(shift->shift.size()) == cfg.n_layers &&
                    static_cast<int>(shift->beta.size()) == cfg.n_layers,
                ErrorKind::shape, "shift baseline needs one vector and beta per layer");
    }
    for (int l = 0; l < n_blocks; ++l) {
        const LayerVars& lv = wv.layers[static_cast<std::size_t>(l)];
        ad::Var h = ad::layer_norm(t, x, lv.ln1_g, lv.ln1_b);
        ad::Var q = ad::matmul(t, h, lv.wq);
        ad::Var k = ad::matmul(t, h, lv.wk);
        ad::Var v = ad::matmul(t, h, lv.wv);
        std::optional<ad::HeadBias> bias;
        if (hook) bias = hook(t, l, q, k);
        ad::AttentionProbs probs;
        const bool keep = trace && trace->keep_full;
        ad::Var att = ad::multi_head_attention(t, q, k, v, cfg.n_heads, causal, bias ? &*bias : nullptr,
                                               keep ? &probs : nullptr);
        if (shift) {
            const Vector& sv = shift->shift[static_cast<std::size_t>(l)];
            require(sv.size() == cfg.width, ErrorKind::shape, "shift vector length must equal width");
            const double beta = shift->beta[static_cast<std::size_t>(l)];
            att = ad::add_row(t, att, t.constant((beta * sv).transpose()));
        }
        if (trace) {
            const Matrix& qv = t.value(q);
            const Matrix& kv = t.value(k);
            trace->q_last.push_back(qv.row(T - 1).transpose());
            trace->k_last.push_back(kv.row(T - 1).transpose());
            trace->mha_last.push_back(t.value(att).row(T - 1).transpose());
            trace->q_vars.push_back(q);
            trace->k_vars.push_back(k);
            if (keep) {
                trace->q_full.push_back(qv);
                trace->k_full.push_back(kv);
                trace->attention.push_back(std::move(probs));
            }
        }
        x = ad::add(t, x, ad::matmul(t, att, lv.wo));
        ad::Var h2 = ad::layer_norm(t, x, lv.ln2_g, lv.ln2_b);
        ad::Var m = ad::gelu(t, ad::add_row(t, ad::matmul(t, h2, lv.w1), lv.b1));
        x = ad::add(t, x, ad::add_row(t, ad::matmul(t, m, lv.w2), lv.b2));
    }
    return x;
}

/// Full forward; returns next-token logits for the requested rows (R x V).
inline ad::Var forward_logits(ad::Tape& t, const WeightVars& wv, const ModelConfig& cfg, const Tokens& tokens,
                              const std::vector<int>& rows, const BiasHook& hook = {},
                              const ShiftVectorBaseline* shift = nullptr, ForwardTrace* trace = nullptr) {
    ad::Var x = residual_stream(t, wv, cfg, tokens, cfg.n_layers, true, hook, shift, trace);
    ad::Var sel = ad::gather_rows(t, x, rows);
    ad::Var hf = ad::layer_norm(t, sel, wv.lnf_g, wv.lnf_b);
    return ad::matmul(t, hf, wv.unembed);
}

inline BiasHook plan_hook(const ModelConfig& cfg, const LogitBiasPlan& plan, int seq_len) {
    const std::vector<int> routed = cfg.routed_layers();
    for (const auto& [layer, lb] : plan.layers) {
        require(std::find(routed.begin(), routed.end(), layer) != routed.end(), ErrorKind::input,
                "bias plan targets layer " + std::to_string(layer) + " which is not intervened");
        require(lb.shared_bias.rows() == seq_len && lb.shared_bias.cols() == seq_len, ErrorKind::shape,
                "bias plan is " + std::to_string(lb.shared_bias.rows()) + "x" +
                    std::to_string(lb.shared_bias.cols()) + " but the sequence has " + std::to_string(seq_len) +
                    " tokens");
        require(static_cast<int>(lb.gates.size()) == cfg.n_heads, ErrorKind::shape, "one gate per head required");
        require(lb.shared_bias.allFinite(), ErrorKind::numeric, "bias plan has non-finite entries");
    }
    return [&plan](ad::Tape& t, int layer, ad::Var, ad::Var) -> std::optional<ad::HeadBias> {
        auto it = plan.layers.find(layer);
        if (it == plan.layers.end()) return std::nullopt;
        Matrix g(1, static_cast<Eigen::Index>(it->second.gates.size()));
        for (std::size_t h = 0; h < it->second.gates.size(); ++h) g(0, static_cast<Eigen::Index>(h)) = it->second.gates[h];
        return ad::HeadBias{t.constant_ref(it->second.shared_bias), t.constant(std::move(g))};
    };
}

/// Next-token logits at the last position, optionally biased and traced.
inline Vector forward(const BackboneWeights& w, const Tokens& tokens, const LogitBiasPlan* bias = nullptr,
                      ForwardTrace* trace = nullptr) {
    ad::Tape t(false);
    const WeightVars wv = bind_weights(t, w, false);
    BiasHook hook;
    if (bias) hook = plan_hook(w.config, *bias, static_cast<int>(tokens.size()));
    const int last = static_cast<int>(tokens.size()) - 1;
    ad::Var logits = forward_logits(t, wv, w.config, tokens, {last}, hook, nullptr, trace);
    return t.value(logits).row(0).transpose();
}

/// Plain forward with the residual shift applied at every layer and position.
inline Vector shift_baseline_apply(const BackboneWeights& w, const Tokens& tokens, const ShiftVectorBaseline& baseline) {
    ad::Tape t(false);
    const WeightVars wv = bind_weights(t, w, false);
    const int last = static_cast<int>(tokens.size()) - 1;
    ad::Var logits = forward_logits(t, wv, w.config, tokens, {last}, {}, &baseline);
    return t.value(logits).row(0).transpose();
}

/// V_shift per layer = mean last-token head output over the demo prompts;
/// beta starts at 0.1 everywhere.
inline ShiftVectorBaseline build_shift_vector(const BackboneWeights& w, const std::vector<Tokens>& demos) {
    require(!demos.empty(), ErrorKind::input, "shift vector needs at least one demonstration prompt");
    const int L = w.config.n_layers;
    ShiftVectorBaseline out;
    out.shift.assign(static_cast<std::size_t>(L), Vector::Zero(w.config.width));
    out.beta.assign(static_cast<std::size_t>(L), 0.1);
    for (const auto& tokens : demos) {
        ForwardTrace trace;
        forward(w, tokens, nullptr, &trace);
        for (int l = 0; l < L; ++l) out.shift[static_cast<std::size_t>(l)] += trace.mha_last[static_cast<std::size_t>(l)];
    }
    for (auto& v : out.shift) v /= static_cast<double>(demos.size());
    return out;
}

// ---------------------------------------------------------------------------
// Low-rank routing bias

inline void check_pid_shapes(const Matrix& uq, const Matrix& uk, Eigen::Index r) {
    require(uq.rows() == uk.rows(), ErrorKind::shape, "PID bases must share their dimension");
    require(uq.cols() == r && uk.cols() == r, ErrorKind::shape, "routing vector length must equal PID rank");
}

/// (Q U_q) diag(alpha) (K U_k)^T, unscaled.
inline Matrix delta_logits(const Matrix& q, const Matrix& k, const Matrix& uq, const Matrix& uk, const Vector& alpha) {
    check_pid_shapes(uq, uk, alpha.size());
    require(q.cols() == uq.rows() && k.cols() == uk.rows(), ErrorKind::shape, "projection width must match PID dim");
    return (q * uq) * alpha.asDiagonal() * (k * uk).transpose();
}

/// M(alpha) = I + U_q diag(alpha) U_k^T; Q M K^T - Q K^T equals delta_logits.
inline Matrix kernel_reparam(const Matrix& uq, const Matrix& uk, const Vector& alpha) {
    check_pid_shapes(uq, uk, alpha.size());
    return Matrix::Identity(uq.rows(), uq.rows()) + uq * alpha.asDiagonal() * uk.transpose();
}

/// Graph version of delta_logits; alpha is a 1 x r Var.
inline ad::Var delta_logits(ad::Tape& t, ad::Var q, ad::Var k, const Matrix& uq, const Matrix& uk, ad::Var alpha) {
    check_pid_shapes(uq, uk, t.value(alpha).cols());
    ad::Var zq = ad::matmul(t, q, t.constant_ref(uq));
    ad::Var zk = ad::matmul(t, k, t.constant_ref(uk));
    return ad::matmul_nt(t, ad::col_scale(t, zq, alpha), zk);
}

} // namespace icr
