#pragma once

// Run configuration, artifact layout and the experiment stages behind the
// command-line tool: pretrain, collect, extract, train-router, eval,
// baseline, theory and analyze.

#include "icr/analysis.hpp"
#include "icr/backbone.hpp"
#include "icr/container.hpp"
#include "icr/csv.hpp"
#include "icr/errors.hpp"
#include "icr/pidlab.hpp"
#include "icr/pretrain.hpp"
#include "icr/router.hpp"
#include "icr/taskgen.hpp"
#include "icr/theoryval.hpp"
#include "icr/trainer.hpp"

#include <chrono>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <string>
#include <vector>

namespace icr {

// ---------------------------------------------------------------------------
// Configuration

namespace detail {

/// Reads typed keys from one JSON object and rejects keys it never asked for.
class Section {
public:
    Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        require(j_.is_object(), ErrorKind::config, "'" + path_ + "' must be an object");
    }

    template <class T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const Json::exception&) {
            fail(ErrorKind::config, "'" + name(key) + "' has the wrong type");
        }
    }

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key);
    }

    Section sub(const std::string& key) {
        seen_.insert(key);
        return Section(j_.contains(key) ? j_.at(key) : empty(), name(key));
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            require(seen_.count(k) > 0, ErrorKind::config, "unknown key '" + name(k) + "'");
    }

private:
    static const Json& empty() {
        static const Json e = Json::object();
        return e;
    }
    std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    const Json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

} // namespace detail

/// Intervened-layer presets for the routing-layer ablation.
inline std::vector<int> layer_preset(const std::string& name, int n_layers) {
    const int n = (n_layers + 2) / 3;
    std::vector<int> out;
    auto range = [&](int a, int b) {
        for (int l = a; l < b; ++l) out.push_back(l);
    };
    if (name == "late")
        range(n_layers - n, n_layers);
    else if (name == "early")
        range(0, n);
    else if (name == "middle")
        range((n_layers - n) / 2, (n_layers - n) / 2 + n);
    else if (name == "all")
        range(0, n_layers);
    else
        fail(ErrorKind::config, "unknown layer preset '" + name + "' (early, middle, late, all)");
    return out;
}

struct TaskConfig {
    std::uint64_t suite_seed = 7;
    int k_per_class = 5;
    std::string strategy = "balance";
    int pool_size = 64;

    SamplingStrategy sampling() const {
        SamplingStrategy s;
        require(strategy == "balance" || strategy == "similarity", ErrorKind::config,
                "strategy must be 'balance' or 'similarity'");
        s.mode = strategy == "balance" ? SamplingStrategy::Mode::balance : SamplingStrategy::Mode::similarity;
        s.k = k_per_class;
        s.pool_size = pool_size;
        s.validate();
        return s;
    }
};

struct CollectConfig {
    int prompts_per_domain = 200;
    int first_domain_factor = 2; // the first ID domain gets this many times the budget
    int shards = 1;
    bool all_layers = false;
};

struct ExtractConfig {
    int rank = 8;
    std::string mode = "pca";
};

struct RouterStageConfig {
    TrainConfig train;
    int queries_per_domain = 400;
};

struct EvalConfig {
    int queries = 500;
    int seeds = 3;
    bool force_zero_gates = false;
    bool shift_baseline = true;
    std::vector<double> betas{0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0};
    int shift_prompts = 32;
    int validation_queries = 100;
};

struct TheoryConfig {
    SpikedDefaults spiked;
    std::vector<int> n_grid{200, 1000, 5000};
    int n_grid_domains = 4;
    std::vector<int> d_grid{1, 2, 4, 8};
    int d_grid_total = 2000;
    int seeds = 20;
    std::vector<double> eps{0.0, 0.05, 0.1, 0.2, 0.4, 0.8};
    int perturb_total = 5000;
    int perturb_seeds = 20;
};

struct AnalysisConfig {
    int queries_per_domain = 100;
    int timing_samples = 50;
};

struct RunConfig {
    std::uint64_t seed = 42;
    std::string out = "icr_out";
    ModelConfig model;
    std::string layer_preset = "late";
    PretrainConfig pretrain;
    TaskConfig tasks;
    CollectConfig collection;
    ExtractConfig extraction;
    RouterStageConfig training;
    EvalConfig evaluation;
    TheoryConfig theory;
    AnalysisConfig analysis;

    /// Seeds of every stage derive from the global seed.
    void resolve() {
        model.intervened_layers = icr::layer_preset(layer_preset, model.n_layers);
        if (explicit_layers.has_value()) model.intervened_layers = *explicit_layers;
        model.validate();
        pretrain.seed = seed;
        training.train.seed = seed;
        tasks.sampling();
        training.train.validate();
        require(model.vocab_size >= tok::min_vocab, ErrorKind::config,
                "vocab_size must be at least " + std::to_string(tok::min_vocab));
        require(extraction.rank >= 1 && extraction.rank <= model.width, ErrorKind::config,
                "extraction rank must lie in [1, width]");
        extraction_mode_from_string(extraction.mode);
        require(evaluation.queries >= 1 && evaluation.seeds >= 1, ErrorKind::config,
                "evaluation needs at least one query and one seed");
        require(collection.prompts_per_domain >= 1 && collection.first_domain_factor >= 1 &&
                    training.queries_per_domain >= 1,
                ErrorKind::config,
                "collection and training need at least one prompt per domain");
    }

    std::optional<std::vector<int>> explicit_layers;

    static RunConfig from_json(const Json& j) {
        RunConfig c;
        detail::Section root(j, "");
        root.get("seed", c.seed);
        root.get("out", c.out);
        {
            auto m = root.sub("model");
            m.get("n_layers", c.model.n_layers);
            m.get("n_heads", c.model.n_heads);
            m.get("width", c.model.width);
            m.get("vocab_size", c.model.vocab_size);
            m.get("max_seq_len", c.model.max_seq_len);
            m.get("mlp_mult", c.model.mlp_mult);
            m.get("layer_preset", c.layer_preset);
            if (m.has("intervened_layers")) {
                std::vector<int> l;
                m.get("intervened_layers", l);
                c.explicit_layers = l;
            }
            m.finish();
        }
        {
            auto p = root.sub("pretrain");
            p.get("max_steps", c.pretrain.max_steps);
            p.get("batch_size", c.pretrain.batch_size);
            p.get("lr", c.pretrain.lr);
            p.get("min_lr", c.pretrain.min_lr);
            p.get("warmup", c.pretrain.warmup);
            p.get("weight_decay", c.pretrain.weight_decay);
            p.get("grad_clip", c.pretrain.grad_clip);
            p.get("eval_every", c.pretrain.eval_every);
            p.get("eval_prompts", c.pretrain.eval_prompts);
            p.get("plateau_delta", c.pretrain.plateau_delta);
            p.get("plateau_patience", c.pretrain.plateau_patience);
            p.get("max_k_per_class", c.pretrain.meta.max_k_per_class);
            p.get("family_weights", c.pretrain.meta.family_weights);
            p.finish();
        }
        {
            auto t = root.sub("tasks");
            t.get("suite_seed", c.tasks.suite_seed);
            t.get("k_per_class", c.tasks.k_per_class);
            t.get("strategy", c.tasks.strategy);
            t.get("pool_size", c.tasks.pool_size);
            t.finish();
        }
        {
            auto s = root.sub("collection");
            s.get("prompts_per_domain", c.collection.prompts_per_domain);
            s.get("first_domain_factor", c.collection.first_domain_factor);
            s.get("shards", c.collection.shards);
            s.get("all_layers", c.collection.all_layers);
            s.finish();
        }
        {
            auto s = root.sub("extraction");
            s.get("rank", c.extraction.rank);
            s.get("mode", c.extraction.mode);
            s.finish();
        }
        {
            auto s = root.sub("training");
            auto& t = c.training.train;
            s.get("lr", t.lr);
            s.get("batch_size", t.batch_size);
            s.get("epochs", t.epochs);
            s.get("grad_clip", t.grad_clip);
            s.get("lambda_conf", t.lambda_conf);
            s.get("lambda_spar", t.lambda_spar);
            s.get("lambda_gate", t.lambda_gate);
            s.get("w_max", t.w_max);
            s.get("alpha_scale_start", t.alpha_scale_start);
            s.get("alpha_scale_end", t.alpha_scale_end);
            s.get("beta1", t.beta1);
            s.get("beta2", t.beta2);
            s.get("weight_decay", t.weight_decay);
            s.get("hidden", t.hidden);
            s.get("queries_per_domain", c.training.queries_per_domain);
            s.finish();
        }
        {
            auto s = root.sub("evaluation");
            auto& e = c.evaluation;
            s.get("queries", e.queries);
            s.get("seeds", e.seeds);
            s.get("force_zero_gates", e.force_zero_gates);
            s.get("shift_baseline", e.shift_baseline);
            s.get("betas", e.betas);
            s.get("shift_prompts", e.shift_prompts);
            s.get("validation_queries", e.validation_queries);
            s.finish();
        }
        {
            auto s = root.sub("theory");
            auto& t = c.theory;
            s.get("dim", t.spiked.dim);
            s.get("shared_rank", t.spiked.shared_rank);
            s.get("domain_rank", t.spiked.domain_rank);
            s.get("shared_energy", t.spiked.shared_energy);
            s.get("domain_energy", t.spiked.domain_energy);
            s.get("noise_var", t.spiked.noise_var);
            s.get("correlated_domains", t.spiked.correlated_domains);
            s.get("n_grid", t.n_grid);
            s.get("n_grid_domains", t.n_grid_domains);
            s.get("d_grid", t.d_grid);
            s.get("d_grid_total", t.d_grid_total);
            s.get("seeds", t.seeds);
            s.get("eps", t.eps);
            s.get("perturb_total", t.perturb_total);
            s.get("perturb_seeds", t.perturb_seeds);
            s.finish();
        }
        {
            auto s = root.sub("analysis");
            s.get("queries_per_domain", c.analysis.queries_per_domain);
            s.get("timing_samples", c.analysis.timing_samples);
            s.finish();
        }
        root.finish();
        c.resolve();
        return c;
    }

    Json to_json() const {
        const auto& p = pretrain;
        const auto& t = training.train;
        const auto& e = evaluation;
        const auto& th = theory;
        return Json{
            {"seed", seed},
            {"out", out},
            {"model",
             {{"n_layers", model.n_layers},
              {"n_heads", model.n_heads},
              {"width", model.width},
              {"vocab_size", model.vocab_size},
              {"max_seq_len", model.max_seq_len},
              {"mlp_mult", model.mlp_mult},
              {"layer_preset", layer_preset},
              {"intervened_layers", model.routed_layers()}}},
            {"pretrain",
             {{"max_steps", p.max_steps},
              {"batch_size", p.batch_size},
              {"lr", p.lr},
              {"min_lr", p.min_lr},
              {"warmup", p.warmup},
              {"weight_decay", p.weight_decay},
              {"grad_clip", p.grad_clip},
              {"eval_every", p.eval_every},
              {"eval_prompts", p.eval_prompts},
              {"plateau_delta", p.plateau_delta},
              {"plateau_patience", p.plateau_patience},
              {"max_k_per_class", p.meta.max_k_per_class},
              {"family_weights", p.meta.family_weights}}},
            {"tasks",
             {{"suite_seed", tasks.suite_seed},
              {"k_per_class", tasks.k_per_class},
              {"strategy", tasks.strategy},
              {"pool_size", tasks.pool_size}}},
            {"collection",
             {{"prompts_per_domain", collection.prompts_per_domain},
              {"first_domain_factor", collection.first_domain_factor},
              {"shards", collection.shards},
              {"all_layers", collection.all_layers}}},
            {"extraction", {{"rank", extraction.rank}, {"mode", extraction.mode}}},
            {"training",
             {{"lr", t.lr},
              {"batch_size", t.batch_size},
              {"epochs", t.epochs},
              {"grad_clip", t.grad_clip},
              {"lambda_conf", t.lambda_conf},
              {"lambda_spar", t.lambda_spar},
              {"lambda_gate", t.lambda_gate},
              {"w_max", t.w_max},
              {"alpha_scale_start", t.alpha_scale_start},
              {"alpha_scale_end", t.alpha_scale_end},
              {"beta1", t.beta1},
              {"beta2", t.beta2},
              {"weight_decay", t.weight_decay},
              {"hidden", t.hidden},
              {"queries_per_domain", training.queries_per_domain}}},
            {"evaluation",
             {{"queries", e.queries},
              {"seeds", e.seeds},
              {"force_zero_gates", e.force_zero_gates},
              {"shift_baseline", e.shift_baseline},
              {"betas", e.betas},
              {"shift_prompts", e.shift_prompts},
              {"validation_queries", e.validation_queries}}},
            {"theory",
             {{"dim", th.spiked.dim},
              {"shared_rank", th.spiked.shared_rank},
              {"domain_rank", th.spiked.domain_rank},
              {"shared_energy", th.spiked.shared_energy},
              {"domain_energy", th.spiked.domain_energy},
              {"noise_var", th.spiked.noise_var},
              {"correlated_domains", th.spiked.correlated_domains},
              {"n_grid", th.n_grid},
              {"n_grid_domains", th.n_grid_domains},
              {"d_grid", th.d_grid},
              {"d_grid_total", th.d_grid_total},
              {"seeds", th.seeds},
              {"eps", th.eps},
              {"perturb_total", th.perturb_total},
              {"perturb_seeds", th.perturb_seeds}}},
            {"analysis",
             {{"queries_per_domain", analysis.queries_per_domain}, {"timing_samples", analysis.timing_samples}}}};
    }
};

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open config '" + path + "'");
    Json j;
    try {
        j = Json::parse(in);
    } catch (const Json::exception& e) {
        fail(ErrorKind::config, "config '" + path + "' is not valid JSON: " + e.what());
    }
    return RunConfig::from_json(j);
}

// ---------------------------------------------------------------------------
// Artifacts

namespace artifact {
inline constexpr const char* backbone = "backbone.icrw";
inline constexpr const char* pretrain_curve = "pretrain_curve.csv";
inline constexpr const char* bases = "bases.icra";
inline constexpr const char* pids = "pids.icrp";
inline constexpr const char* router = "router.icrr";
inline constexpr const char* router_steps = "router_steps.csv";
inline constexpr const char* router_epochs = "router_epochs.csv";
inline constexpr const char* eval_accuracy = "eval_accuracy.csv";
inline constexpr const char* eval_summary = "eval_summary.csv";
inline constexpr const char* eval_trace = "eval_trace.csv";
inline constexpr const char* eval_latency = "eval_latency.json";
inline constexpr const char* baseline = "baseline.csv";
inline constexpr const char* theory_recovery = "theory_recovery.csv";
inline constexpr const char* theory_cells = "theory_recovery_cells.csv";
inline constexpr const char* theory_perturbation = "theory_perturbation.csv";
inline constexpr const char* layer_importance = "layer_importance.csv";
inline constexpr const char* head_importance = "head_importance.csv";
inline constexpr const char* pid_correlation = "pid_correlation.csv";
inline constexpr const char* iclness = "iclness.csv";
inline constexpr const char* resources = "resources.json";
} // namespace artifact

class Workspace {
public:
    explicit Workspace(std::string dir) : dir_(std::move(dir)) { std::filesystem::create_directories(dir_); }

    std::string path(const std::string& name) const { return (std::filesystem::path(dir_) / name).string(); }

    /// Path of an upstream artifact; a missing one names the command that makes it.
    std::string need(const std::string& name, const std::string& producer) const {
        const std::string p = path(name);
        require(std::filesystem::exists(p), ErrorKind::dependency,
                "missing '" + p + "'; run the '" + producer + "' command first");
        return p;
    }

    void write_text(const std::string& name, const std::string& text) const { CsvTable::write_text(path(name), text); }

private:
    std::string dir_;
};

inline void check_model_matches(const RunConfig& cfg, const BackboneWeights& w) {
    require(cfg.model.digest() == w.config.digest(), ErrorKind::compatibility,
            "config digest " + cfg.model.digest() + " does not match backbone digest " + w.config.digest());
}

struct Artifacts {
    BackboneWeights weights;
    PIDSet pids;
    RouterParams router;
};

inline BackboneWeights load_backbone(const RunConfig& cfg, const Workspace& ws) {
    BackboneWeights w = load_weights(ws.need(artifact::backbone, "pretrain"));
    check_model_matches(cfg, w);
    return w;
}

inline Artifacts load_artifacts(const RunConfig& cfg, const Workspace& ws) {
    Artifacts a;
    a.weights = load_backbone(cfg, ws);
    a.pids = load_pids(ws.need(artifact::pids, "extract"), &a.weights.config);
    a.router = load_router(ws.need(artifact::router, "train-router"));
    check_router_pids(a.router, a.pids, a.weights.config);
    return a;
}

// ---------------------------------------------------------------------------
// Stages as library calls

/// Zero-shot router training queries: `n` per domain, mixed and keyed by the
/// domain seed on a stream disjoint from evaluation.
inline std::vector<RouterExample> router_training_set(const std::vector<DomainSpec>& domains, int n, int max_len,
                                                      std::uint64_t seed) {
    std::vector<RouterExample> out;
    for (const auto& d : domains)
        for (int i = 0; i < n; ++i)
            out.push_back(to_router_example(
                build_zero_shot_prompt(d, mix_seed(mix_seed(d.seed, 0x7A1 + seed), static_cast<std::uint64_t>(i))),
                max_len));
    return out;
}

inline std::uint64_t eval_query_seed(const DomainSpec& d, int eval_seed, int i) {
    return mix_seed(mix_seed(d.seed, 0xE0A1 + static_cast<std::uint64_t>(eval_seed)), static_cast<std::uint64_t>(i));
}

inline std::uint64_t validation_seed(const DomainSpec& d, int i) {
    return mix_seed(mix_seed(d.seed, 0x5A11), static_cast<std::uint64_t>(i));
}

/// Shift-vector baseline for one domain: V_shift from few-shot prompts and a
/// single beta for all layers picked on held-out validation queries.
struct ShiftChoice {
    ShiftVectorBaseline baseline;
    std::vector<double> validation_acc; // per beta
    double beta = 0.0;
};

inline ShiftChoice fit_shift_baseline(const BackboneWeights& w, const DomainSpec& d, const SamplingStrategy& s,
                                      const EvalConfig& e) {
    std::vector<Tokens> demos;
    for (int i = 0; i < e.shift_prompts; ++i)
        demos.push_back(build_icl_prompt(d, s, mix_seed(mix_seed(d.seed, 0x5B1F), static_cast<std::uint64_t>(i)))
                            .tokens(w.config.max_seq_len));
    ShiftChoice c;
    c.baseline = build_shift_vector(w, demos);
    double best = -1.0;
    for (double beta : e.betas) {
        ShiftVectorBaseline b = c.baseline;
        std::fill(b.beta.begin(), b.beta.end(), beta);
        int hit = 0;
        for (int i = 0; i < e.validation_queries; ++i) {
            const PromptSpec p = build_zero_shot_prompt(d, validation_seed(d, i));
            hit += argmax_candidate(shift_baseline_apply(w, p.tokens(w.config.max_seq_len), b), p.candidate_labels) == p.gold;
        }
        const double acc = hit / static_cast<double>(std::max(1, e.validation_queries));
        c.validation_acc.push_back(acc);
        if (acc > best) {
            best = acc;
            c.beta = beta;
        }
    }
    std::fill(c.baseline.beta.begin(), c.baseline.beta.end(), c.beta);
    return c;
}

struct DomainScore {
    Split split = Split::id;
    std::string domain_id;
    int seed = 0;
    int n = 0;
    int zs = 0, icr = 0, few = 0, shift = 0;

    double pct(int hits) const { return 100.0 * hits / std::max(1, n); }
};

struct EvalOptions {
    int queries = 500;
    std::vector<int> seeds{0};
    double alpha_scale = 0.8;
    bool force_zero_gates = false;
    bool few_shot = true;
    bool shift_baseline = false;
    std::vector<Split> splits{Split::id, Split::near_ood, Split::far_ood};
};

struct EvalResult {
    std::vector<DomainScore> scores;
    CsvTable trace{{"split", "domain_id", "seed", "index", "gold", "zs_choice", "icr_choice", "few_choice",
                    "shift_choice", "zs_logits_digest", "gate_mean", "alpha_abs_mean"}};
    std::vector<double> icr_latency_s;
    double zs_entropy = 0.0, icr_entropy = 0.0; // means over all evaluated queries
};

inline std::string logits_digest(const Vector& v) { return hex64(fnv1a(v.data(), sizeof(double) * v.size())); }

inline std::string join_reals(const Vector& v) {
    std::string s;
    for (Eigen::Index i = 0; i < v.size(); ++i) s += (i ? ";" : "") + fmt6(v(i));
    return s;
}

/// Zero-shot, routed and (optionally) few-shot and shift-baseline accuracy
/// per domain and evaluation seed, with one trace record per query.
inline EvalResult evaluate(const Artifacts& a, const DomainSuite& suite, const SamplingStrategy& strategy,
                           const EvalOptions& opt, const EvalConfig& shift_cfg = {}) {
    const BackboneWeights& w = a.weights;
    const QueryEncoder encoder(w);
    const int T = w.config.max_seq_len;
    EvalResult res;
    std::size_t count = 0;
    for (Split sp : opt.splits) {
        for (const auto& d : suite.split(sp)) {
            std::optional<ShiftChoice> shift;
            if (opt.shift_baseline) shift = fit_shift_baseline(w, d, strategy, shift_cfg);
            for (int s : opt.seeds) {
                DomainScore sc{sp, d.domain_id, s, opt.queries};
                for (int i = 0; i < opt.queries; ++i) {
                    const std::uint64_t qs = eval_query_seed(d, s, i);
                    const PromptSpec zp = build_zero_shot_prompt(d, qs);
                    const Tokens zt = zp.tokens(T);
                    const Vector zs = forward(w, zt);

                    const auto t0 = std::chrono::steady_clock::now();
                    RoutingOutput routing = route(a.router, encoder.encode(zt), opt.alpha_scale);
                    if (opt.force_zero_gates) routing.gamma.setZero();
                    const Vector icr = routed_forward(w, a.pids, routing, zt);
                    res.icr_latency_s.push_back(
                        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());

                    const int zc = argmax_candidate(zs, zp.candidate_labels);
                    const int ic = argmax_candidate(icr, zp.candidate_labels);
                    sc.zs += zc == zp.gold;
                    sc.icr += ic == zp.gold;
                    res.zs_entropy += softmax_entropy(zs);
                    res.icr_entropy += softmax_entropy(icr);
                    ++count;

                    int fc = -1, shc = -1;
                    if (opt.few_shot) {
                        const PromptSpec fp = build_icl_prompt(d, strategy, qs);
                        fc = argmax_candidate(forward(w, fp.tokens(T)), fp.candidate_labels);
                        sc.few += fc == fp.gold;
                    }
                    if (shift) {
                        shc = argmax_candidate(shift_baseline_apply(w, zt, shift->baseline), zp.candidate_labels);
                        sc.shift += shc == zp.gold;
                    }
                    res.trace.row(to_string(sp), d.domain_id, s, i, zp.gold, zc, ic, fc, shc, logits_digest(zs),
                                  join_reals(routing.gamma.rowwise().mean()),
                                  join_reals(routing.alpha.cwiseAbs().rowwise().mean()));
                }
                res.scores.push_back(sc);
            }
        }
    }
    if (count) {
        res.zs_entropy /= static_cast<double>(count);
        res.icr_entropy /= static_cast<double>(count);
    }
    return res;
}

inline CsvTable accuracy_table(const std::vector<DomainScore>& scores, bool with_few, bool with_shift) {
    CsvTable t({"split", "domain_id", "seed", "n", "zero_shot", "icr", "few_shot", "shift_baseline"});
    for (const auto& s : scores)
        t.row_strings({to_string(s.split), s.domain_id, std::to_string(s.seed), std::to_string(s.n), fmt6(s.pct(s.zs)),
                       fmt6(s.pct(s.icr)), with_few ? fmt6(s.pct(s.few)) : "", with_shift ? fmt6(s.pct(s.shift)) : ""});
    return t;
}

/// Seed-averaged accuracy per (split, domain) in points.
struct DomainMean {
    Split split = Split::id;
    std::string domain_id;
    double zs = 0.0, icr = 0.0, few = 0.0, shift = 0.0;
};

inline std::vector<DomainMean> domain_means(const std::vector<DomainScore>& scores) {
    std::vector<DomainMean> out;
    std::vector<int> counts;
    for (const auto& s : scores) {
        auto it = std::find_if(out.begin(), out.end(),
                               [&](const DomainMean& m) { return m.split == s.split && m.domain_id == s.domain_id; });
        if (it == out.end()) {
            out.push_back({s.split, s.domain_id});
            counts.push_back(0);
            it = out.end() - 1;
        }
        const auto i = static_cast<std::size_t>(it - out.begin());
        it->zs += s.pct(s.zs);
        it->icr += s.pct(s.icr);
        it->few += s.pct(s.few);
        it->shift += s.pct(s.shift);
        ++counts[i];
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i].zs /= counts[i];
        out[i].icr /= counts[i];
        out[i].few /= counts[i];
        out[i].shift /= counts[i];
    }
    return out;
}

/// Per-domain means, then per split an Average row and a Collapse row
/// counting the cells strictly below the zero-shot cell.
inline CsvTable summary_table(const std::vector<DomainScore>& scores, bool with_few, bool with_shift) {
    CsvTable t({"split", "domain_id", "zero_shot", "icr", "few_shot", "shift_baseline"});
    const auto means = domain_means(scores);
    auto opt = [](bool on, const std::string& v) { return on ? v : std::string(); };
    for (Split sp : {Split::id, Split::near_ood, Split::far_ood}) {
        double zs = 0, icr = 0, few = 0, shift = 0;
        int n = 0, c_icr = 0, c_few = 0, c_shift = 0;
        for (const auto& m : means) {
            if (m.split != sp) continue;
            t.row_strings({to_string(sp), m.domain_id, fmt6(m.zs), fmt6(m.icr), opt(with_few, fmt6(m.few)),
                           opt(with_shift, fmt6(m.shift))});
            zs += m.zs;
            icr += m.icr;
            few += m.few;
            shift += m.shift;
            c_icr += m.icr < m.zs;
            c_few += m.few < m.zs;
            c_shift += m.shift < m.zs;
            ++n;
        }
        if (n == 0) continue;
        t.row_strings({to_string(sp), "Average", fmt6(zs / n), fmt6(icr / n), opt(with_few, fmt6(few / n)),
                       opt(with_shift, fmt6(shift / n))});
        t.row_strings({to_string(sp), "Collapse", "0", std::to_string(c_icr), opt(with_few, std::to_string(c_few)),
                       opt(with_shift, std::to_string(c_shift))});
    }
    return t;
}

// ---------------------------------------------------------------------------
// Commands

using Log = std::function<void(const std::string&)>;

inline void write_resolved(const RunConfig& cfg, const Workspace& ws, const std::string& command) {
    ws.write_text(command + ".config.json", cfg.to_json().dump(2) + "\n");
}

inline void cmd_pretrain(const RunConfig& cfg, const Workspace& ws, const Log& log) {
    const PretrainResult r = pretrain_backbone(cfg.model, cfg.pretrain, [&](const PretrainPoint& p) {
        log("step " + std::to_string(p.step) + " loss " + fmt6(p.train_loss) + " few " + fmt6(p.few_shot_acc) +
            " zs " + fmt6(p.zero_shot_acc));
    });
    save_weights(r.weights, ws.path(artifact::backbone), Json{{"seed", cfg.seed}, {"plateaued", r.plateaued}});
    CsvTable curve({"step", "train_loss", "few_shot_acc", "zero_shot_acc"});
    for (const auto& p : r.curve) curve.row(p.step, p.train_loss, p.few_shot_acc, p.zero_shot_acc);
    curve.write(ws.path(artifact::pretrain_curve));
}

inline std::vector<int> collection_counts(const CollectConfig& c, std::size_t n_domains) {
    std::vector<int> counts(n_domains, c.prompts_per_domain);
    if (!counts.empty()) counts.front() *= c.first_domain_factor;
    return counts;
}

inline CollectionResult collect_for(const RunConfig& cfg, const BackboneWeights& w, const DomainSuite& suite) {
    return collect_icl_bases(w, suite.id, collection_counts(cfg.collection, suite.id.size()),
                             cfg.tasks.sampling(), mix_seed(cfg.seed, 0xC011), cfg.collection.all_layers,
                             cfg.collection.shards);
}

inline void cmd_collect(const RunConfig& cfg, const Workspace& ws, const Log& log) {
    const BackboneWeights w = load_backbone(cfg, ws);
    const CollectionResult c = collect_for(cfg, w, default_suite(cfg.tasks.suite_seed));
    save_bases(c, ws.path(artifact::bases));
    log("collected " + std::to_string(c.bases.front().q_acc.sample_count()) + " prompts, " +
        std::to_string(c.truncated_prompts) + " truncated");
}

inline PIDSet extract_for(const RunConfig& cfg, const ModelConfig& model, const CollectionResult& c,
                          const std::string& mode) {
    PIDProvenance prov;
    prov.seed = mix_seed(cfg.seed, 0xE7);
    prov.truncated_prompts = c.truncated_prompts;
    return extract_pids(select_layers(c.bases, model.routed_layers()), cfg.extraction.rank,
                        extraction_mode_from_string(mode), model, prov);
}

inline void cmd_extract(const RunConfig& cfg, const Workspace& ws, const Log& log) {
    const BackboneWeights w = load_backbone(cfg, ws);
    const CollectionResult c = load_bases(ws.need(artifact::bases, "collect"));
    const PIDSet p = extract_for(cfg, w.config, c, cfg.extraction.mode);
    save_pids(p, ws.path(artifact::pids));
    log("extracted rank-" + std::to_string(p.rank) + " " + cfg.extraction.mode + " PIDs for " +
        std::to_string(p.layers.size()) + " layers");
}

inline RouterTrainResult train_for(const RunConfig& cfg, const BackboneWeights& w, const PIDSet& pids,
                                   const DomainSuite& suite) {
    return train_router(w, pids, cfg.training.train,
                        router_training_set(suite.id, cfg.training.queries_per_domain, w.config.max_seq_len, cfg.seed));
}

inline void cmd_train_router(const RunConfig& cfg, const Workspace& ws, const Log& log) {
    const BackboneWeights w = load_backbone(cfg, ws);
    const PIDSet pids = load_pids(ws.need(artifact::pids, "extract"), &w.config);
    const RouterTrainResult r = train_for(cfg, w, pids, default_suite(cfg.tasks.suite_seed));
    save_router(r.params, ws.path(artifact::router), Json{{"seed", cfg.seed}, {"pid_digest", pids.digest()}});
    r.steps.write(ws.path(artifact::router_steps));
    CsvTable ep({"epoch", "alpha_scale", "L_total", "L_CE", "L_conf", "L_spar", "L_gate"});
    for (const auto& e : r.epochs) {
        ep.row(e.epoch, e.alpha_scale, e.total, e.parts.ce, e.parts.conf, e.parts.spar, e.parts.gate);
        log("epoch " + std::to_string(e.epoch) + " loss " + fmt6(e.total));
    }
    ep.write(ws.path(artifact::router_epochs));
}

inline EvalOptions eval_options(const RunConfig& cfg) {
    EvalOptions o;
    o.queries = cfg.evaluation.queries;
    o.seeds.clear();
    for (int s = 0; s < cfg.evaluation.seeds; ++s) o.seeds.push_back(s);
    o.alpha_scale = cfg.training.train.alpha_scale_end;
    o.force_zero_gates = cfg.evaluation.force_zero_gates;
    o.shift_baseline = cfg.evaluation.shift_baseline;
    return o;
}

inline void cmd_eval(const RunConfig& cfg, const Workspace& ws, const Log& log) {
    const Artifacts a = load_artifacts(cfg, ws);
    const EvalOptions o = eval_options(cfg);
    const EvalResult r =
        evaluate(a, default_suite(cfg.tasks.suite_seed), cfg.tasks.sampling(), o, cfg.evaluation);
    accuracy_table(r.scores, o.few_shot, o.shift_baseline).write(ws.path(artifact::eval_accuracy));
    const CsvTable summary = summary_table(r.scores, o.few_shot, o.shift_baseline);
    summary.write(ws.path(artifact::eval_summary));
    r.trace.write(ws.path(artifact::eval_trace));
    ws.write_text(artifact::eval_latency, Json{{"icr_latency_s", r.icr_latency_s}}.dump() + "\n");
    log(summary.str());
}

inline void cmd_baseline(const RunConfig& cfg, const Workspace& ws, const Log& log) {
    const BackboneWeights w = load_backbone(cfg, ws);
    const DomainSuite suite = default_suite(cfg.tasks.suite_seed);
    const SamplingStrategy s = cfg.tasks.sampling();
    CsvTable t({"split", "domain_id", "beta", "validation_acc", "chosen"});
    for (Split sp : {Split::id, Split::near_ood, Split::far_ood})
        for (const auto& d : suite.split(sp)) {
            const ShiftChoice c = fit_shift_baseline(w, d, s, cfg.evaluation);
            for (std::size_t i = 0; i < cfg.evaluation.betas.size(); ++i)
                t.row(to_string(sp), d.domain_id, cfg.evaluation.betas[i], c.validation_acc[i],
                      cfg.evaluation.betas[i] == c.beta ? 1 : 0);
            log(d.domain_id + " beta " + fmt6(c.beta));
        }
    t.write(ws.path(artifact::baseline));
}

inline void cmd_theory(const RunConfig& cfg, const Workspace& ws, const Log& log) {
    const TheoryConfig& th = cfg.theory;
    RecoveryResult by_n = recovery_experiment(th.spiked, th.n_grid, {th.n_grid_domains}, th.spiked.shared_rank,
                                              th.seeds, mix_seed(cfg.seed, 1));
    const RecoveryResult by_d = recovery_experiment(th.spiked, {th.d_grid_total}, th.d_grid, th.spiked.shared_rank,
                                                    th.seeds, mix_seed(cfg.seed, 2));
    by_n.reports.insert(by_n.reports.end(), by_d.reports.begin(), by_d.reports.end());
    by_n.cells.insert(by_n.cells.end(), by_d.cells.begin(), by_d.cells.end());
    subspace_table(by_n.reports).write(ws.path(artifact::theory_recovery));
    CsvTable cells({"N", "D", "median_sin_theta", "expectation_error"});
    for (const auto& c : by_n.cells) cells.row(c.n, c.n_domains, c.median_sin_theta, c.expectation_error);
    cells.write(ws.path(artifact::theory_cells));
    const PerturbationResult pr = perturbation_experiment(th.spiked, th.eps, th.perturb_seeds, th.perturb_total,
                                                          th.n_grid_domains, mix_seed(cfg.seed, 3));
    subspace_table(pr.reports).write(ws.path(artifact::theory_perturbation));
    log("bound checked on " + std::to_string(pr.checked) + " runs, " + std::to_string(pr.violations) + " violations");
}

/// Routing outputs and full-vocabulary log-probs over fresh zero-shot queries.
struct RoutingTrace {
    std::string domain_id;
    std::vector<RoutingOutput> routings;
    DatasetLogProbs logprobs;
};

inline RoutingTrace trace_domain(const Artifacts& a, const QueryEncoder& enc, const DomainSpec& d, int n,
                                 double alpha_scale) {
    RoutingTrace tr;
    tr.domain_id = d.domain_id;
    const int V = a.weights.config.vocab_size;
    tr.logprobs.name = d.domain_id;
    tr.logprobs.zero_shot.resize(n, V);
    tr.logprobs.routed.resize(n, V);
    for (int i = 0; i < n; ++i) {
        const Tokens zt = build_zero_shot_prompt(d, mix_seed(mix_seed(d.seed, 0xA7A1), static_cast<std::uint64_t>(i)))
                              .tokens(a.weights.config.max_seq_len);
        RoutingOutput r = route(a.router, enc.encode(zt), alpha_scale);
        tr.logprobs.zero_shot.row(i) = ad::log_softmax(forward(a.weights, zt).transpose());
        tr.logprobs.routed.row(i) = ad::log_softmax(routed_forward(a.weights, a.pids, r, zt).transpose());
        tr.routings.push_back(std::move(r));
    }
    return tr;
}

/// Wall-clock seconds of `f`.
template <class F>
double time_call(F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Paired per-query timings for zero-shot, ICR and few-shot inference.
inline ResourceReport measure_resources(const Artifacts& a, const DomainSpec& d, const SamplingStrategy& s, int n,
                                        double alpha_scale) {
    const QueryEncoder enc(a.weights);
    const int T = a.weights.config.max_seq_len;
    std::vector<double> zs, icr, few;
    for (int i = 0; i < n; ++i) {
        const PromptSpec fp = build_icl_prompt(d, s, mix_seed(mix_seed(d.seed, 0x71AE), static_cast<std::uint64_t>(i)));
        const Tokens zt = fp.zero_shot().tokens(T);
        const Tokens ft = fp.tokens(T);
        zs.push_back(time_call([&] { forward(a.weights, zt); }));
        icr.push_back(time_call([&] { apply_icr(a.weights, a.pids, a.router, enc, zt, alpha_scale); }));
        few.push_back(time_call([&] { forward(a.weights, ft); }));
    }
    return resource_report(a.pids.rank, a.weights.config.width, static_cast<int>(a.pids.layers.size()), zs, icr, few);
}

inline void cmd_analyze(const RunConfig& cfg, const Workspace& ws, const Log& log) {
    const Artifacts a = load_artifacts(cfg, ws);
    const DomainSuite suite = default_suite(cfg.tasks.suite_seed);
    const QueryEncoder enc(a.weights);
    const double scale = cfg.training.train.alpha_scale_end;
    std::vector<RoutingTrace> traces;
    for (Split sp : {Split::id, Split::near_ood, Split::far_ood})
        for (const auto& d : suite.split(sp))
            traces.push_back(trace_domain(a, enc, d, cfg.analysis.queries_per_domain, scale));

    std::vector<RoutingOutput> all;
    std::vector<std::vector<RoutingOutput>> per;
    std::vector<DatasetLogProbs> lps;
    for (const auto& t : traces) {
        all.insert(all.end(), t.routings.begin(), t.routings.end());
        per.push_back(t.routings);
        lps.push_back(t.logprobs);
    }

    const ImportanceProfile lp = layer_importance(all, a.pids.layers);
    CsvTable lt({"layer", "importance"});
    for (std::size_t i = 0; i < lp.layers.size(); ++i) lt.row(lp.layers[i], lp.importance(static_cast<Eigen::Index>(i)));
    lt.write(ws.path(artifact::layer_importance));

    const HeadImportance hi = head_importance(all);
    CsvTable ht({"layer", "head", "mean_gate", "top1"});
    for (Eigen::Index l = 0; l < hi.mean_gate.rows(); ++l)
        for (Eigen::Index h = 0; h < hi.mean_gate.cols(); ++h)
            ht.row(a.pids.layers[static_cast<std::size_t>(l)], static_cast<int>(h), hi.mean_gate(l, h),
                   hi.top1[static_cast<std::size_t>(l)] == h ? 1 : 0);
    ht.write(ws.path(artifact::head_importance));

    const Matrix corr = pid_importance_corr(per);
    std::vector<std::string> header{"domain_id"};
    for (const auto& t : traces) header.push_back(t.domain_id);
    CsvTable ct(header);
    for (Eigen::Index i = 0; i < corr.rows(); ++i) {
        std::vector<std::string> row{traces[static_cast<std::size_t>(i)].domain_id};
        for (Eigen::Index j = 0; j < corr.cols(); ++j) row.push_back(fmt6(corr(i, j)));
        ct.row_strings(row);
    }
    ct.write(ws.path(artifact::pid_correlation));

    iclness_table(iclness_scores(lps)).write(ws.path(artifact::iclness));

    const ResourceReport rr =
        measure_resources(a, suite.id.front(), cfg.tasks.sampling(), cfg.analysis.timing_samples, scale);
    const Json res{{"cached_params", rr.cached_params},
                   {"zero_shot_mean_s", rr.zero_shot.mean},
                   {"zero_shot_std_s", rr.zero_shot.std},
                   {"icr_mean_s", rr.icr.mean},
                   {"icr_std_s", rr.icr.std},
                   {"few_shot_mean_s", rr.few_shot.mean},
                   {"few_shot_std_s", rr.few_shot.std},
                   {"icr_faster_than_few_rate", rr.icr_faster_than_few}};
    ws.write_text(artifact::resources, res.dump(2) + "\n");
    log("cached parameters " + std::to_string(rr.cached_params));
}

inline const std::vector<std::string>& command_names() {
    static const std::vector<std::string> n{"pretrain", "collect",  "extract", "train-router",
                                            "eval",     "baseline", "theory",  "analyze"};
    return n;
}

inline void run_command(const std::string& command, const RunConfig& cfg, const Log& log = {}) {
    const Log say = log ? log : Log([](const std::string&) {});
    const Workspace ws(cfg.out);
    if (command == "pretrain")
        cmd_pretrain(cfg, ws, say);
    else if (command == "collect")
        cmd_collect(cfg, ws, say);
    else if (command == "extract")
        cmd_extract(cfg, ws, say);
    else if (command == "train-router")
        cmd_train_router(cfg, ws, say);
    else if (command == "eval")
        cmd_eval(cfg, ws, say);
    else if (command == "baseline")
        cmd_baseline(cfg, ws, say);
    else if (command == "theory")
        cmd_theory(cfg, ws, say);
    else if (command == "analyze")
        cmd_analyze(cfg, ws, say);
    else
        fail(ErrorKind::config, "unknown command '" + command + "'");
    write_resolved(cfg, ws, command);
}

} // namespace icr
