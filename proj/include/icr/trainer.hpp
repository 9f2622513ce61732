#pragma once

// Router training: cross-entropy, confidence (entropy-drop), layer-weighted
// alpha sparsity and gate sparsity, optimized with AdamW on the router only.

#include "icr/autograd.hpp"
#include "icr/backbone.hpp"
#include "icr/csv.hpp"
#include "icr/errors.hpp"
#include "icr/numcore.hpp"
#include "icr/pidlab.hpp"
#include "icr/pretrain.hpp"
#include "icr/router.hpp"
#include "icr/taskgen.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace icr {

struct TrainConfig {
    double lr = 1e-4;
    int batch_size = 4;
    int epochs = 2;
    double grad_clip = 1.0;
    double lambda_conf = 0.01;
    double lambda_spar = 1e-3;
    double lambda_gate = 0.02;
    double w_max = 3.0;
    double alpha_scale_start = 1.0;
    double alpha_scale_end = 0.8;
    std::uint64_t seed = 42;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    int hidden = 0; // 0 means 4 * encoder width

    void validate() const {
        require(lr > 0.0 && batch_size >= 1 && epochs >= 1 && grad_clip >= 0.0, ErrorKind::config,
                "training needs lr > 0, batch >= 1, epochs >= 1 and clip >= 0");
        require(lambda_conf >= 0.0 && lambda_spar >= 0.0 && lambda_gate >= 0.0, ErrorKind::config,
                "loss weights must be non-negative");
        require(w_max >= 1.0, ErrorKind::config, "w_max must be at least 1");
    }
};

/// Cosine anneal from start (epoch 0) to end (epoch E-1).
inline double alpha_scale_at(const TrainConfig& cfg, int epoch) {
    if (cfg.epochs <= 1) return cfg.alpha_scale_start;
    const double c = std::cos(std::numbers::pi * epoch / static_cast<double>(cfg.epochs - 1));
    return cfg.alpha_scale_end + (cfg.alpha_scale_start - cfg.alpha_scale_end) * (1.0 + c) / 2.0;
}

/// Sparsity weight of the i-th of n intervened layers: linear from 1 to w_max.
inline double layer_weight(int i, int n, double w_max) {
    if (n <= 1) return 1.0;
    return 1.0 + (w_max - 1.0) * i / static_cast<double>(n - 1);
}

// ---------------------------------------------------------------------------
// Loss terms on plain values

inline double loss_ce(const std::vector<Vector>& icr_logits, const std::vector<int>& gold) {
    require(icr_logits.size() == gold.size() && !gold.empty(), ErrorKind::shape, "logit/label batch mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        require(gold[i] >= 0 && gold[i] < icr_logits[i].size(), ErrorKind::vocab, "gold id outside vocabulary");
        total -= ad::log_softmax(icr_logits[i].transpose())(gold[i]);
    }
    return total / static_cast<double>(gold.size());
}

inline double softmax_entropy(const Vector& logits) { return entropy(ad::softmax(logits.transpose())); }

inline double loss_conf(const std::vector<Vector>& icr_logits, const std::vector<Vector>& zs_logits) {
    require(icr_logits.size() == zs_logits.size() && !icr_logits.empty(), ErrorKind::shape, "batch size mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < icr_logits.size(); ++i) {
        require(icr_logits[i].size() == zs_logits[i].size(), ErrorKind::shape, "logit length mismatch");
        total += std::max(0.0, softmax_entropy(icr_logits[i]) - softmax_entropy(zs_logits[i]));
    }
    return total / static_cast<double>(icr_logits.size());
}

struct SparsityTerms {
    double spar = 0.0;
    double gate = 0.0;
};

inline SparsityTerms loss_sparsity(const RoutingOutput& r, double w_max = 3.0) {
    const auto L = static_cast<int>(r.alpha.rows());
    require(L >= 1 && r.gamma.rows() == L, ErrorKind::shape, "routing needs matching alpha and gamma rows");
    SparsityTerms s;
    for (int l = 0; l < L; ++l) {
        s.spar += layer_weight(l, L, w_max) * r.alpha.row(l).cwiseAbs().sum() / static_cast<double>(r.alpha.cols());
        s.gate += r.gamma.row(l).cwiseAbs().sum() / static_cast<double>(r.gamma.cols());
    }
    s.spar /= L;
    s.gate /= L;
    return s;
}

struct LossParts {
    double ce = 0.0, conf = 0.0, spar = 0.0, gate = 0.0;
};

inline double total_loss(const LossParts& p, const TrainConfig& cfg) {
    return p.ce + cfg.lambda_conf * p.conf + cfg.lambda_spar * p.spar + cfg.lambda_gate * p.gate;
}

// ---------------------------------------------------------------------------
// Differentiable objective

/// One labelled zero-shot training query.
struct RouterExample {
    Tokens tokens; // zero-shot prompt
    int gold = 0;
    std::string domain_id;
};

inline RouterExample to_router_example(const PromptSpec& p, int max_len) {
    require(p.demos.empty(), ErrorKind::input, "router training uses zero-shot prompts");
    return RouterExample{p.tokens(max_len), p.gold, p.domain_id};
}

struct BatchEval {
    LossParts parts;
    double total = 0.0;
    std::vector<Vector> zs_logits, icr_logits;
};

/// Batch objective; when `grads` is set, the gradient w.r.t. each router
/// tensor (for_each order) is written there.
inline BatchEval batch_objective(const BackboneWeights& w, const PIDSet& pids, const QueryEncoder& encoder,
                                 const RouterParams& params, const std::vector<RouterExample>& batch,
                                 const TrainConfig& cfg, double alpha_scale, std::vector<Matrix>* grads) {
    require(!batch.empty(), ErrorKind::input, "empty batch");
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    const int L = static_cast<int>(pids.layers.size());
    const int H = w.config.n_heads;
    BatchEval out;
    if (grads) {
        grads->clear();
        params.for_each([&](const std::string&, const Matrix& m) { grads->push_back(Matrix::Zero(m.rows(), m.cols())); });
    }
    for (const auto& ex : batch) {
        const Vector zs = forward(w, ex.tokens);
        const double h_zs = softmax_entropy(zs);
        const Vector emb = encoder.encode(ex.tokens);
        check_router_input(params, emb);

        ad::Tape t(grads != nullptr);
        const RouterVars rv = bind_router(t, params, grads != nullptr);
        const RoutedVars routed = route_graph(t, rv, emb, alpha_scale);
        const WeightVars wv = bind_weights(t, w, false);
        const BiasHook hook = icr_hook(pids, routed.alpha, routed.gamma, H);
        const int last = static_cast<int>(ex.tokens.size()) - 1;
        ad::Var logits = forward_logits(t, wv, w.config, ex.tokens, {last}, hook);

        ad::Var ce = ad::cross_entropy_rows(t, logits, {ex.gold});
        ad::Var h_icr = ad::softmax_entropy(t, logits);
        Matrix neg(1, 1);
        neg(0, 0) = -h_zs;
        ad::Var conf = ad::relu(t, ad::add(t, h_icr, t.constant(std::move(neg))));
        std::vector<ad::Var> spar_parts, gate_parts;
        std::vector<double> spar_w, gate_w;
        for (int l = 0; l < L; ++l) {
            spar_parts.push_back(ad::mean_abs(t, ad::slice_cols(t, routed.alpha, l * pids.rank, pids.rank)));
            spar_w.push_back(layer_weight(l, L, cfg.w_max) / L);
            gate_parts.push_back(ad::mean_abs(t, ad::slice_cols(t, routed.gamma, l * H, H)));
            gate_w.push_back(1.0 / L);
        }
        ad::Var spar = ad::weighted_sum(t, spar_parts, spar_w);
        ad::Var gate = ad::weighted_sum(t, gate_parts, gate_w);
        ad::Var total = ad::weighted_sum(t, {ce, conf, spar, gate},
                                         {1.0, cfg.lambda_conf, cfg.lambda_spar, cfg.lambda_gate});

        out.parts.ce += inv_b * t.value(ce)(0, 0);
        out.parts.conf += inv_b * t.value(conf)(0, 0);
        out.parts.spar += inv_b * t.value(spar)(0, 0);
        out.parts.gate += inv_b * t.value(gate)(0, 0);
        out.zs_logits.push_back(zs);
        out.icr_logits.push_back(t.value(logits).row(0).transpose());
        if (grads) {
            t.backward(total);
            const auto vars = rv.list();
            for (std::size_t i = 0; i < vars.size(); ++i) (*grads)[i] += inv_b * t.grad(vars[i]);
        }
    }
    out.total = total_loss(out.parts, cfg);
    require(std::isfinite(out.total), ErrorKind::numeric, "router objective is not finite");
    return out;
}

/// Flat view of router parameters in for_each order.
inline Vector flatten(const RouterParams& p) {
    std::vector<double> v;
    p.for_each([&](const std::string&, const Matrix& m) { v.insert(v.end(), m.data(), m.data() + m.size()); });
    return Eigen::Map<Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline void unflatten(RouterParams& p, const Vector& flat) {
    Eigen::Index off = 0;
    p.for_each([&](const std::string&, Matrix& m) {
        require(off + m.size() <= flat.size(), ErrorKind::shape, "flat parameter vector too short");
        std::copy(flat.data() + off, flat.data() + off + m.size(), m.data());
        off += m.size();
    });
    require(off == flat.size(), ErrorKind::shape, "flat parameter vector too long");
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochMetrics {
    int epoch = 0;
    double alpha_scale = 0.0;
    LossParts parts;
    double total = 0.0;
};

struct RouterTrainResult {
    RouterParams params;
    std::vector<EpochMetrics> epochs;
    CsvTable steps{{"epoch", "step", "L_total", "L_CE", "L_conf", "L_spar", "L_gate", "alpha_scale", "grad_norm"}};
    std::vector<double> step_losses;
};

inline RouterShape default_router_shape(const ModelConfig& cfg, const PIDSet& pids, const TrainConfig& tc) {
    RouterShape s;
    s.embed = cfg.width;
    s.hidden = tc.hidden > 0 ? tc.hidden : 4 * cfg.width;
    s.n_layers = static_cast<int>(pids.layers.size());
    s.rank = pids.rank;
    s.n_heads = cfg.n_heads;
    return s;
}

inline RouterTrainResult train_router(const BackboneWeights& w, const PIDSet& pids, const TrainConfig& cfg,
                                      const std::vector<RouterExample>& train_set) {
    cfg.validate();
    check_compatible(pids, w.config);
    require(!train_set.empty(), ErrorKind::input, "empty router training set");
    const QueryEncoder encoder(w);
    RouterTrainResult res;
    res.params = RouterParams::init(default_router_shape(w.config, pids, cfg), mix_seed(cfg.seed, 11));
    std::vector<Matrix*> ptrs;
    res.params.for_each([&](const std::string&, Matrix& m) { ptrs.push_back(&m); });
    AdamW opt(ptrs, {cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay});

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double scale = alpha_scale_at(cfg, epoch);
        Rng shuffle_rng(mix_seed(cfg.seed, 100 + static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        EpochMetrics em;
        em.epoch = epoch;
        em.alpha_scale = scale;
        int batches = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            std::vector<RouterExample> batch;
            for (std::size_t j = start; j < std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size)); ++j)
                batch.push_back(train_set[order[j]]);
            std::vector<Matrix> grads;
            BatchEval be;
            try {
                be = batch_objective(w, pids, encoder, res.params, batch, cfg, scale, &grads);
            } catch (const Error& e) {
                fail(e.kind(), "router training aborted at epoch " + std::to_string(epoch) + " step " +
                                   std::to_string(step) + ": " + e.what());
            }
            const double gnorm = clip_global_norm(grads, cfg.grad_clip);
            opt.step(grads, cfg.lr);
            res.steps.row(epoch, step, be.total, be.parts.ce, be.parts.conf, be.parts.spar, be.parts.gate, scale, gnorm);
            res.step_losses.push_back(be.total);
            em.parts.ce += be.parts.ce;
            em.parts.conf += be.parts.conf;
            em.parts.spar += be.parts.spar;
            em.parts.gate += be.parts.gate;
            em.total += be.total;
            ++batches;
            ++step;
        }
        em.parts.ce /= batches;
        em.parts.conf /= batches;
        em.parts.spar /= batches;
        em.parts.gate /= batches;
        em.total /= batches;
        res.epochs.push_back(em);
    }
    return res;
}

} // namespace icr
