#pragma once

// Principal ICL Directions: pool last-token Q/K projections of multi-domain
// ICL prompts into per-layer second-moment accumulators, take the top-r
// eigenvectors, and persist them.

#include "icr/backbone.hpp"
#include "icr/container.hpp"
#include "icr/errors.hpp"
#include "icr/numcore.hpp"
#include "icr/taskgen.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace icr {

struct ICLBasis {
    int layer = 0;
    CovarianceAccumulator q_acc;
    CovarianceAccumulator k_acc;
    std::map<std::string, int> per_domain_counts;
};

enum class ExtractionMode : std::uint8_t { pca = 0, random_orthogonal = 1 };

inline std::string to_string(ExtractionMode m) { return m == ExtractionMode::pca ? "pca" : "random-orthogonal"; }

inline ExtractionMode extraction_mode_from_string(const std::string& s) {
    if (s == "pca") return ExtractionMode::pca;
    if (s == "random-orthogonal") return ExtractionMode::random_orthogonal;
    fail(ErrorKind::config, "unknown extraction mode '" + s + "'");
}

struct PIDProvenance {
    std::vector<std::string> domains;
    std::vector<int> prompt_counts;
    int truncated_prompts = 0;
    std::uint64_t seed = 0;
    ExtractionMode mode = ExtractionMode::pca;

    bool operator==(const PIDProvenance&) const = default;
};

struct PIDSet {
    std::string config_digest;
    int rank = 0;
    std::vector<int> layers;
    std::vector<OrthonormalBasis> uq, uk; // one per layer
    PIDProvenance provenance;

    Eigen::Index dim() const { return uq.empty() ? 0 : uq.front().dim(); }

    /// Index of `layer` within `layers`, or -1.
    int slot(int layer) const {
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layers[i] == layer) return static_cast<int>(i);
        return -1;
    }

    /// Hash of the basis payload; routers record it to detect a PID swap.
    std::string digest() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            h = fnv1a(&layers[i], sizeof(int), h);
            h = fnv1a(uq[i].columns().data(), sizeof(double) * uq[i].columns().size(), h);
            h = fnv1a(uk[i].columns().data(), sizeof(double) * uk[i].columns().size(), h);
        }
        return hex64(h);
    }
};

/// Requires that `pids` were extracted from a backbone with this config.
inline void check_compatible(const PIDSet& pids, const ModelConfig& cfg) {
    require(pids.config_digest == cfg.digest(), ErrorKind::compatibility,
            "PIDs were extracted for model config " + pids.config_digest + ", current config is " + cfg.digest());
    require(pids.dim() == cfg.width, ErrorKind::compatibility, "PID dimension does not match model width");
    require(pids.layers == cfg.routed_layers(), ErrorKind::compatibility,
            "PID layers do not match the model's intervened layers");
}

struct CollectionResult {
    std::vector<ICLBasis> bases;
    int truncated_prompts = 0;
};

inline std::vector<ICLBasis> empty_bases(const std::vector<int>& layers, Eigen::Index d) {
    std::vector<ICLBasis> out;
    for (int l : layers) out.push_back(ICLBasis{l, CovarianceAccumulator(d), CovarianceAccumulator(d), {}});
    return out;
}

/// Runs prompts [begin, end) of one domain and accumulates their captures.
inline int collect_shard(const BackboneWeights& w, const DomainSpec& domain, const SamplingStrategy& strategy,
                         std::uint64_t domain_seed, int begin, int end, std::vector<ICLBasis>& bases) {
    int truncated = 0;
    for (int i = begin; i < end; ++i) {
        const PromptSpec p = build_icl_prompt(domain, strategy, mix_seed(domain_seed, static_cast<std::uint64_t>(i)));
        int dropped = 0;
        const Tokens tokens = p.tokens(w.config.max_seq_len, &dropped);
        if (dropped > 0) ++truncated;
        ForwardTrace trace;
        forward(w, tokens, nullptr, &trace);
        for (auto& b : bases) {
            b.q_acc.add(trace.q_last[static_cast<std::size_t>(b.layer)]);
            b.k_acc.add(trace.k_last[static_cast<std::size_t>(b.layer)]);
        }
    }
    return truncated;
}

/// Collects last-token captures for `counts[i]` prompts of `domains[i]`.
/// Prompts are split into `shards` contiguous chunks whose accumulators are
/// merged in ascending (domain, shard) order.
inline CollectionResult collect_icl_bases(const BackboneWeights& w, const std::vector<DomainSpec>& domains,
                                          const std::vector<int>& counts, const SamplingStrategy& strategy,
                                          std::uint64_t seed, bool all_layers = false, int shards = 1) {
    require(!domains.empty() && domains.size() == counts.size(), ErrorKind::input,
            "one prompt count per domain required");
    require(shards >= 1, ErrorKind::input, "shard count must be positive");
    strategy.validate();
    for (int c : counts) require(c >= 1, ErrorKind::input, "every domain needs at least one prompt");

    std::vector<int> layers;
    if (all_layers)
        for (int l = 0; l < w.config.n_layers; ++l) layers.push_back(l);
    else
        layers = w.config.routed_layers();

    CollectionResult res;
    res.bases = empty_bases(layers, w.config.width);
    for (std::size_t di = 0; di < domains.size(); ++di) {
        const std::uint64_t domain_seed = mix_seed(seed, di);
        const int n = counts[di];
        for (int s = 0; s < shards; ++s) {
            const int begin = n * s / shards;
            const int end = n * (s + 1) / shards;
            if (begin == end) continue;
            std::vector<ICLBasis> part = empty_bases(layers, w.config.width);
            res.truncated_prompts += collect_shard(w, domains[di], strategy, domain_seed, begin, end, part);
            for (std::size_t b = 0; b < part.size(); ++b) {
                res.bases[b].q_acc.merge(part[b].q_acc);
                res.bases[b].k_acc.merge(part[b].k_acc);
            }
        }
        for (auto& b : res.bases) b.per_domain_counts[domains[di].domain_id] += n;
    }
    return res;
}

/// PCA (or the random-orthogonal ablation) per layer, Q and K independently.
inline PIDSet extract_pids(const std::vector<ICLBasis>& bases, int r, ExtractionMode mode, const ModelConfig& cfg,
                           PIDProvenance provenance = {}) {
    require(!bases.empty(), ErrorKind::extraction, "no ICL bases to extract from");
    PIDSet out;
    out.config_digest = cfg.digest();
    out.rank = r;
    provenance.mode = mode;
    for (const auto& b : bases) {
        require(b.q_acc.sample_count() == b.k_acc.sample_count(), ErrorKind::extraction,
                "Q and K accumulators disagree on sample count");
        require(r >= 1 && r <= b.q_acc.dim(), ErrorKind::invalid_rank,
                "rank " + std::to_string(r) + " invalid for dim " + std::to_string(b.q_acc.dim()));
        require(b.q_acc.sample_count() >= static_cast<std::size_t>(r), ErrorKind::extraction,
                "layer " + std::to_string(b.layer) + " has " + std::to_string(b.q_acc.sample_count()) +
                    " samples, fewer than rank " + std::to_string(r));
        out.layers.push_back(b.layer);
        if (mode == ExtractionMode::pca) {
            out.uq.push_back(pca_top_r(b.q_acc, r));
            out.uk.push_back(pca_top_r(b.k_acc, r));
        } else {
            const auto l = static_cast<std::uint64_t>(b.layer);
            out.uq.push_back(random_orthogonal_basis(b.q_acc.dim(), r, mix_seed(provenance.seed, 2 * l)));
            out.uk.push_back(random_orthogonal_basis(b.k_acc.dim(), r, mix_seed(provenance.seed, 2 * l + 1)));
        }
    }
    if (provenance.domains.empty() && !bases.front().per_domain_counts.empty()) {
        for (const auto& [id, n] : bases.front().per_domain_counts) {
            provenance.domains.push_back(id);
            provenance.prompt_counts.push_back(n);
        }
    }
    out.provenance = std::move(provenance);
    return out;
}

/// Keeps only the requested layers (e.g. after an all-layer collection).
inline std::vector<ICLBasis> select_layers(const std::vector<ICLBasis>& bases, const std::vector<int>& layers) {
    std::vector<ICLBasis> out;
    for (int l : layers) {
        bool found = false;
        for (const auto& b : bases)
            if (b.layer == l) {
                out.push_back(b);
                found = true;
            }
        require(found, ErrorKind::dependency, "layer " + std::to_string(l) + " was not collected");
    }
    return out;
}

// ---------------------------------------------------------------------------
// Container

inline std::size_t pid_header_bytes(std::size_t n_layers) {
    return pid_magic.size() + 4 /*version*/ + 4 /*L_int*/ + 4 * n_layers + 4 /*d*/ + 4 /*r*/ + 1 /*mode*/ +
           8 /*seed*/;
}

inline Json pid_metadata(const PIDSet& p) {
    return Json{{"config_digest", p.config_digest},
                {"domains", p.provenance.domains},
                {"prompt_counts", p.provenance.prompt_counts},
                {"truncated_prompts", p.provenance.truncated_prompts}};
}

inline void save_pids(const PIDSet& p, const std::string& path) {
    BinaryWriter out(pid_magic);
    out.u32(container_version);
    out.u32(static_cast<std::uint32_t>(p.layers.size()));
    for (int l : p.layers) out.u32(static_cast<std::uint32_t>(l));
    out.u32(static_cast<std::uint32_t>(p.dim()));
    out.u32(static_cast<std::uint32_t>(p.rank));
    out.u8(static_cast<std::uint8_t>(p.provenance.mode));
    out.u64(p.provenance.seed);
    for (std::size_t i = 0; i < p.layers.size(); ++i) {
        out.matrix_f32(p.uq[i].columns());
        out.matrix_f32(p.uk[i].columns());
    }
    out.json(pid_metadata(p));
    out.commit(path);
}

/// Loads a PID file; when `cfg` is given the stored config digest and
/// dimension must match it.
inline PIDSet load_pids(const std::string& path, const ModelConfig* cfg = nullptr) {
    BinaryReader in(path, pid_magic);
    in.version(container_version);
    PIDSet p;
    const std::uint32_t n_layers = in.u32();
    require(n_layers <= 4096, ErrorKind::format, "implausible layer count in PID header");
    for (std::uint32_t i = 0; i < n_layers; ++i) p.layers.push_back(static_cast<int>(in.u32()));
    const auto d = static_cast<Eigen::Index>(in.u32());
    p.rank = static_cast<int>(in.u32());
    require(d > 0 && p.rank > 0 && p.rank <= d, ErrorKind::format, "PID header has an invalid dim/rank");
    const std::uint8_t mode = in.u8();
    require(mode <= 1, ErrorKind::format, "unknown extraction mode byte");
    p.provenance.mode = static_cast<ExtractionMode>(mode);
    p.provenance.seed = in.u64();
    for (std::uint32_t i = 0; i < n_layers; ++i) {
        // binary32 storage perturbs orthonormality by ~1e-7; the basis check tolerates 1e-6.
        p.uq.emplace_back(in.matrix_f32(d, p.rank));
        p.uk.emplace_back(in.matrix_f32(d, p.rank));
    }
    const Json meta = in.json();
    in.expect_end();
    try {
        p.config_digest = meta.at("config_digest").get<std::string>();
        p.provenance.domains = meta.at("domains").get<std::vector<std::string>>();
        p.provenance.prompt_counts = meta.at("prompt_counts").get<std::vector<int>>();
        p.provenance.truncated_prompts = meta.at("truncated_prompts").get<int>();
    } catch (const Json::exception& e) {
        fail(ErrorKind::format, std::string("PID metadata: ") + e.what());
    }
    if (cfg) {
        require(d == cfg->width, ErrorKind::compatibility,
                "PIDs have dimension " + std::to_string(d) + " but the model width is " + std::to_string(cfg->width));
        check_compatible(p, *cfg);
    }
    return p;
}

/// Accumulators of a collection run ("ICRACC"), stored in binary64 so that
/// extraction from a file matches extraction in memory.
inline void save_bases(const CollectionResult& c, const std::string& path) {
    BinaryWriter out(accum_magic);
    out.u32(container_version);
    out.u32(static_cast<std::uint32_t>(c.bases.size()));
    const auto d = c.bases.empty() ? 0 : c.bases.front().q_acc.dim();
    out.u32(static_cast<std::uint32_t>(d));
    for (const auto& b : c.bases) {
        out.u32(static_cast<std::uint32_t>(b.layer));
        for (const auto* acc : {&b.q_acc, &b.k_acc}) {
            out.u64(acc->sample_count());
            out.matrix_f64(acc->sum_outer());
            out.matrix_f64(acc->sum());
        }
    }
    Json meta{{"truncated_prompts", c.truncated_prompts}};
    Json counts = Json::object();
    if (!c.bases.empty())
        for (const auto& [id, n] : c.bases.front().per_domain_counts) counts[id] = n;
    meta["per_domain_counts"] = counts;
    out.json(meta);
    out.commit(path);
}

inline CollectionResult load_bases(const std::string& path) {
    BinaryReader in(path, accum_magic);
    in.version(container_version);
    CollectionResult c;
    const std::uint32_t n = in.u32();
    const auto d = static_cast<Eigen::Index>(in.u32());
    for (std::uint32_t i = 0; i < n; ++i) {
        ICLBasis b;
        b.layer = static_cast<int>(in.u32());
        for (auto* acc : {&b.q_acc, &b.k_acc}) {
            const std::uint64_t count = in.u64();
            Matrix so = in.matrix_f64(d, d);
            Vector s = in.matrix_f64(d, 1);
            *acc = CovarianceAccumulator::from_parts(std::move(so), std::move(s), count);
        }
        c.bases.push_back(std::move(b));
    }
    const Json meta = in.json();
    in.expect_end();
    c.truncated_prompts = meta.at("truncated_prompts").get<int>();
    for (auto& b : c.bases)
        for (const auto& [id, v] : meta.at("per_domain_counts").items()) b.per_domain_counts[id] = v.get<int>();
    return c;
}

} // namespace icr
