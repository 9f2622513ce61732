#pragma once

// Backbone pretraining on the synthetic meta-distribution, plus the AdamW
// optimizer shared with router training.

#include "icr/autograd.hpp"
#include "icr/backbone.hpp"
#include "icr/errors.hpp"
#include "icr/numcore.hpp"
#include "icr/taskgen.hpp"

#include <cmath>
#include <functional>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

namespace icr {

/// Decoupled-weight-decay Adam over a fixed list of matrices.
class AdamW {
public:
    struct Options {
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.01;
    };

    AdamW(std::vector<Matrix*> params, Options opt, std::vector<bool> decay_mask = {})
        : params_(std::move(params)), opt_(opt), decay_(std::move(decay_mask)) {
        if (decay_.empty()) decay_.assign(params_.size(), true);
        require(decay_.size() == params_.size(), ErrorKind::shape, "decay mask length mismatch");
        for (Matrix* p : params_) {
            m_.push_back(Matrix::Zero(p->rows(), p->cols()));
            v_.push_back(Matrix::Zero(p->rows(), p->cols()));
        }
    }

    void step(const std::vector<Matrix>& grads, double lr) {
        require(grads.size() == params_.size(), ErrorKind::shape, "one gradient per parameter required");
        ++t_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Matrix& p = *params_[i];
            if (decay_[i]) p *= 1.0 - lr * opt_.weight_decay;
            m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * grads[i];
            v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * grads[i].cwiseProduct(grads[i]);
            p.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + opt_.eps);
        }
    }

    long steps() const { return t_; }

private:
    std::vector<Matrix*> params_;
    Options opt_;
    std::vector<bool> decay_;
    std::vector<Matrix> m_, v_;
    long t_ = 0;
};

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
inline double clip_global_norm(std::vector<Matrix>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads) sq += g.squaredNorm();
    const double norm = std::sqrt(sq);
    require(std::isfinite(norm), ErrorKind::numeric, "gradient norm is not finite");
    if (max_norm > 0.0 && norm > max_norm)
        for (auto& g : grads) g *= max_norm / norm;
    return norm;
}

/// Weight variables in BackboneWeights::for_each order.
inline std::vector<ad::Var> flatten(const WeightVars& wv) {
    std::vector<ad::Var> out{wv.tok_emb, wv.pos_emb};
    for (const auto& l : wv.layers)
        out.insert(out.end(), {l.ln1_g, l.ln1_b, l.wq, l.wk, l.wv, l.wo, l.ln2_g, l.ln2_b, l.w1, l.b1, l.w2, l.b2});
    out.insert(out.end(), {wv.lnf_g, wv.lnf_b, wv.unembed});
    return out;
}

/// One training sequence: a rendered prompt with a label target after every input.
struct TrainingSequence {
    Tokens tokens;
    std::vector<int> rows;  // last token of each input
    std::vector<int> golds; // label expected there
};

inline TrainingSequence to_training_sequence(const PromptSpec& p, int max_len) {
    TrainingSequence s;
    int dropped = 0;
    s.tokens = p.tokens(max_len, &dropped, &s.rows);
    for (std::size_t i = static_cast<std::size_t>(dropped); i < p.demos.size(); ++i) s.golds.push_back(p.demos[i].label);
    s.golds.push_back(p.gold);
    return s;
}

struct MetaDistribution {
    std::vector<Family> families{Family::cluster_label, Family::pattern_label, Family::arithmetic_mod};
    std::vector<double> family_weights{0.4, 0.4, 0.2};
    std::vector<int> class_counts{2, 3, 4};
    int max_k_per_class = 5;

    /// Fresh domain and a balanced prompt with 0..max_k demos per class.
    PromptSpec sample(Rng& rng) const {
        require(!families.empty() && families.size() == family_weights.size(), ErrorKind::config,
                "meta-distribution needs one weight per family");
        double total = 0.0;
        for (double w : family_weights) total += w;
        double u = rng.uniform() * total;
        std::size_t fi = 0;
        while (fi + 1 < families.size() && u >= family_weights[fi]) u -= family_weights[fi++];
        const int c = class_counts[rng.index(class_counts.size())];
        const DomainSpec d = make_domain(families[fi], rng.engine()(), c);
        const int k = static_cast<int>(rng.index(static_cast<std::size_t>(max_k_per_class + 1)));
        const std::uint64_t seed = rng.engine()();
        if (k == 0) return build_zero_shot_prompt(d, seed);
        SamplingStrategy s;
        s.k = k;
        return build_icl_prompt(d, s, seed);
    }
};

/// Index of the highest-scoring candidate label (ties: first candidate).
inline int argmax_candidate(const Vector& logits, const std::vector<int>& candidates) {
    int best = candidates.front();
    for (int c : candidates)
        if (logits(c) > logits(best)) best = c;
    return best;
}

struct PretrainConfig {
    int max_steps = 12000;
    int batch_size = 8;
    double lr = 1.5e-3;
    double min_lr = 1.5e-4;
    int warmup = 100;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    int eval_every = 500;
    int eval_prompts = 150;
    double plateau_delta = 0.005;
    int plateau_patience = 6;
    std::uint64_t seed = 42;
    MetaDistribution meta;
};

struct PretrainPoint {
    int step = 0;
    double train_loss = 0.0;
    double few_shot_acc = 0.0;
    double zero_shot_acc = 0.0;
};

struct PretrainResult {
    BackboneWeights weights;
    std::vector<PretrainPoint> curve;
    bool plateaued = false;
};

/// Next-token CE at every answer row of one sequence; writes gradients in
/// for_each order into `grads` (accumulating).
inline double sequence_loss_and_grad(const BackboneWeights& w, const TrainingSequence& s, std::vector<Matrix>& grads) {
    ad::Tape t(true);
    const WeightVars wv = bind_weights(t, w, true);
    ad::Var logits = forward_logits(t, wv, w.config, s.tokens, s.rows);
    ad::Var loss = ad::cross_entropy_rows(t, logits, s.golds);
    t.backward(loss);
    const auto vars = flatten(wv);
    for (std::size_t i = 0; i < vars.size(); ++i) grads[i] += t.grad(vars[i]);
    return t.value(loss)(0, 0);
}

/// Few-shot and zero-shot accuracy of the backbone on a fixed prompt set.
inline std::pair<double, double> prompt_set_accuracy(const BackboneWeights& w, const std::vector<PromptSpec>& prompts) {
    int few = 0, zs = 0;
    for (const auto& p : prompts) {
        const Tokens ft = p.tokens(w.config.max_seq_len);
        if (argmax_candidate(forward(w, ft), p.candidate_labels) == p.gold) ++few;
        const Tokens zt = p.zero_shot().tokens(w.config.max_seq_len);
        if (argmax_candidate(forward(w, zt), p.candidate_labels) == p.gold) ++zs;
    }
    const double n = static_cast<double>(prompts.size());
    return {few / n, zs / n};
}

inline double cosine_lr(const PretrainConfig& cfg, int step) {
    if (step < cfg.warmup) return cfg.lr * (step + 1) / cfg.warmup;
    const double prog = static_cast<double>(step - cfg.warmup) / std::max(1, cfg.max_steps - cfg.warmup);
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * std::min(1.0, prog)));
}

using ProgressFn = std::function<void(const PretrainPoint&)>;

/// Trains from a fresh init until held-out few-shot accuracy stops improving
/// by `plateau_delta` for `plateau_patience` evaluations, or `max_steps`.
inline PretrainResult pretrain_backbone(const ModelConfig& mcfg, const PretrainConfig& cfg,
                                        const ProgressFn& progress = {}) {
    require(cfg.batch_size >= 1 && cfg.max_steps >= 1 && cfg.eval_every >= 1, ErrorKind::config,
            "pretraining needs positive batch, steps and eval interval");
    PretrainResult res;
    res.weights = BackboneWeights::init(mcfg, mix_seed(cfg.seed, 1));
    BackboneWeights& w = res.weights;

    std::vector<Matrix*> params;
    std::vector<bool> decay;
    w.for_each([&](const std::string&, Matrix& m) {
        params.push_back(&m);
        decay.push_back(m.rows() > 1);
    });
    AdamW opt(params, {0.9, 0.999, 1e-8, cfg.weight_decay}, decay);

    Rng eval_rng(mix_seed(cfg.seed, 2));
    std::vector<PromptSpec> held_out;
    MetaDistribution eval_meta = cfg.meta;
    for (int i = 0; i < cfg.eval_prompts; ++i) {
        PromptSpec p;
        do {
            p = eval_meta.sample(eval_rng);
        } while (p.demos.empty());
        held_out.push_back(std::move(p));
    }

    Rng rng(mix_seed(cfg.seed, 3));
    double initial_loss = -1.0, window_loss = 0.0, best_acc = -1.0;
    int window_n = 0, stale = 0, above_initial = 0;
    for (int step = 0; step < cfg.max_steps; ++step) {
        std::vector<Matrix> grads;
        for (Matrix* p : params) grads.push_back(Matrix::Zero(p->rows(), p->cols()));
        double loss = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const TrainingSequence s = to_training_sequence(cfg.meta.sample(rng), mcfg.max_seq_len);
            loss += sequence_loss_and_grad(w, s, grads);
        }
        loss /= cfg.batch_size;
        require(std::isfinite(loss), ErrorKind::numeric, "pretraining loss is not finite at step " + std::to_string(step));
        for (auto& g : grads) g /= static_cast<double>(cfg.batch_size);
        clip_global_norm(grads, cfg.grad_clip);
        opt.step(grads, cosine_lr(cfg, step));
        if (initial_loss < 0.0) initial_loss = loss;
        window_loss += loss;
        ++window_n;

        if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.max_steps) {
            const auto [few, zs] = prompt_set_accuracy(w, held_out);
            PretrainPoint pt{step + 1, window_loss / window_n, few, zs};
            res.curve.push_back(pt);
            if (progress) progress(pt);
            above_initial = pt.train_loss > initial_loss ? above_initial + 1 : 0;
            require(above_initial < 3, ErrorKind::numeric,
                    "pretraining diverged: loss above its initial value for 3 consecutive evaluations");
            window_loss = 0.0;
            window_n = 0;
            if (few > best_acc + cfg.plateau_delta) {
                best_acc = few;
                stale = 0;
            } else if (++stale >= cfg.plateau_patience) {
                res.plateaued = true;
                break;
            }
        }
    }
    round_to_binary32(w);
    return res;
}

} // namespace icr
