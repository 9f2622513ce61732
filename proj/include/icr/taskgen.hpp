#pragma once

// Synthetic multi-domain classification tasks rendered as ICL prompts:
//
//   BOS  tag  label_0 .. label_{C-1}  (SEP x y)*  SEP x_query
//
// The label is predicted at the last token of each input, so a label sits
// right after the input it answers.
// The tag token names the domain (the toy counterpart of a task instruction)
// and the header lists the candidate label tokens in class order. Class c of
// every domain answers with the same token, so the class *rule* is what a
// domain hides, not the label vocabulary.

#include "icr/backbone.hpp"
#include "icr/errors.hpp"
#include "icr/numcore.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace icr {

namespace tok {
inline constexpr int pad = 0;
inline constexpr int bos = 1;
inline constexpr int sep = 2;
inline constexpr int label_base = 8;
inline constexpr int label_count = 4; // max classes per domain
inline constexpr int tag_base = label_base + label_count;
inline constexpr int tag_count = 16;
inline constexpr int grid = 8;
inline constexpr int cell_base = tag_base + tag_count; // cluster-label: one token per grid cell
inline constexpr int symbol_base = cell_base + grid * grid; // pattern-label symbols
inline constexpr int symbol_count = 16;
inline constexpr int digit_base = symbol_base + symbol_count; // arithmetic-mod digits
inline constexpr int digit_count = 10;
inline constexpr int min_vocab = digit_base + digit_count;
} // namespace tok

enum class Family { cluster_label, pattern_label, arithmetic_mod };

inline std::string to_string(Family f) {
    switch (f) {
    case Family::cluster_label: return "cluster-label";
    case Family::pattern_label: return "pattern-label";
    case Family::arithmetic_mod: return "arithmetic-mod";
    }
    return "?";
}

inline Family family_from_string(const std::string& s) {
    if (s == "cluster-label") return Family::cluster_label;
    if (s == "pattern-label") return Family::pattern_label;
    if (s == "arithmetic-mod") return Family::arithmetic_mod;
    fail(ErrorKind::config, "unsupported task family '" + s + "'");
}

inline constexpr int pattern_len = 3;   // filler symbol, then the (cue, key) template
inline constexpr int pattern_k = 2;
inline constexpr int arith_len = 3;     // digits per arithmetic-mod input
inline constexpr double cluster_std = 0.9;

struct DomainSpec {
    std::string domain_id;
    Family family = Family::cluster_label;
    int n_classes = 2;
    std::uint64_t seed = 0;
    int tag = tok::tag_base;
    std::vector<int> label_tokens;

    // cluster-label: class centers on the coordinate grid, sorted by x.
    std::vector<std::array<double, 2>> centers;
    // pattern-label: one (cue, key) template per class; the key decides the class.
    std::vector<std::array<int, pattern_k>> templates;
    // arithmetic-mod: start of the informative window.
    int window = 0;
    // pattern-label: chance that the cue is swapped for another class's cue.
    double decoy_rate = 0.3;

    bool operator==(const DomainSpec&) const = default;
};

struct Example {
    Tokens input;
    int label = 0; // token id

    bool operator==(const Example&) const = default;
};

struct PromptSpec {
    std::vector<Example> demos;
    Tokens query;
    int gold = 0;
    std::string domain_id;
    int tag = tok::tag_base;
    std::vector<int> candidate_labels;

    bool operator==(const PromptSpec&) const = default;

    /// Token sequence; leading demos are dropped until it fits `max_len`.
    /// `answer_rows` receives the position predicting each kept demo label,
    /// then the query's.
    Tokens tokens(int max_len = 512, int* dropped_demos = nullptr, std::vector<int>* answer_rows = nullptr) const {
        std::size_t first = 0;
        while (true) {
            Tokens out{tok::bos, tag};
            out.insert(out.end(), candidate_labels.begin(), candidate_labels.end());
            std::vector<int> rows;
            for (std::size_t i = first; i < demos.size(); ++i) {
                out.push_back(tok::sep);
                out.insert(out.end(), demos[i].input.begin(), demos[i].input.end());
                rows.push_back(static_cast<int>(out.size()) - 1);
                out.push_back(demos[i].label);
            }
            out.push_back(tok::sep);
            out.insert(out.end(), query.begin(), query.end());
            rows.push_back(static_cast<int>(out.size()) - 1);
            if (static_cast<int>(out.size()) <= max_len || first == demos.size()) {
                if (dropped_demos) *dropped_demos = static_cast<int>(first);
                if (answer_rows) *answer_rows = std::move(rows);
                require(static_cast<int>(out.size()) <= max_len, ErrorKind::input,
                        "zero-shot prompt alone exceeds the length cap");
                return out;
            }
            ++first;
        }
    }

    /// The same query with no demonstrations.
    PromptSpec zero_shot() const {
        PromptSpec p = *this;
        p.demos.clear();
        return p;
    }
};

struct SamplingStrategy {
    enum class Mode { balance, similarity };
    Mode mode = Mode::balance;
    int k = 5;              // per class (balance) or total (similarity)
    int pool_size = 64;     // candidate pool for similarity ranking

    void validate() const {
        require(k >= 1, ErrorKind::config, "sampling needs k >= 1");
        require(pool_size >= 1, ErrorKind::config, "pool size must be positive");
    }
};

/// Maps a token span to a fixed-length embedding; used for similarity ranking.
using Embedder = std::function<Vector(const Tokens&)>;

/// Bag-of-tokens indicator embedding; a frozen encoder with no weights.
inline Vector bag_of_tokens(const Tokens& span) {
    Vector v = Vector::Zero(tok::min_vocab);
    for (int id : span)
        if (id >= 0 && id < tok::min_vocab) v(id) += 1.0;
    return v;
}

namespace detail {

inline double dist2(const std::array<double, 2>& a, const std::array<double, 2>& b) {
    return (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]);
}

inline int nearest_center(const DomainSpec& d, int cx, int cy) {
    const std::array<double, 2> p{static_cast<double>(cx), static_cast<double>(cy)};
    int best = 0;
    double best_d = detail::dist2(p, d.centers[0]);
    for (int c = 1; c < d.n_classes; ++c) {
        const double dd = detail::dist2(p, d.centers[static_cast<std::size_t>(c)]);
        if (dd < best_d) {
            best_d = dd;
            best = c;
        }
    }
    return best;
}

inline int digit_value(int token) { return token - tok::digit_base; }

} // namespace detail

/// Class index of an input under the domain's hidden map.
inline int classify(const DomainSpec& d, const Tokens& x) {
    switch (d.family) {
    case Family::cluster_label: {
        const int cell = x[0] - tok::cell_base;
        return detail::nearest_center(d, cell % tok::grid, cell / tok::grid);
    }
    case Family::pattern_label: {
        for (int c = 0; c < d.n_classes; ++c)
            if (x[pattern_len - 1] == d.templates[static_cast<std::size_t>(c)][1]) return c;
        return -1;
    }
    case Family::arithmetic_mod: {
        int s = 0;
        for (int j = 0; j < 2; ++j) s += detail::digit_value(x[static_cast<std::size_t>(d.window + j)]);
        return s % d.n_classes;
    }
    }
    return -1;
}

/// Minimum pairwise center distance required for cluster-label domains.
inline double cluster_separation_floor() { return 2.0 * cluster_std; }

inline DomainSpec make_domain(Family family, std::uint64_t seed, int n_classes) {
    require(n_classes >= 2, ErrorKind::config, "a domain needs at least two classes");
    require(n_classes <= 4, ErrorKind::config, "at most four classes are supported");
    DomainSpec d;
    d.family = family;
    d.n_classes = n_classes;
    d.seed = seed;
    d.domain_id = to_string(family) + "/C" + std::to_string(n_classes) + "/s" + std::to_string(seed);
    Rng rng(mix_seed(seed, 0xD0A1));

    d.tag = tok::tag_base + static_cast<int>(rng.index(tok::tag_count));
    for (int c = 0; c < n_classes; ++c) d.label_tokens.push_back(tok::label_base + c);

    switch (family) {
    case Family::cluster_label: {
        const double hi = tok::grid - 1;
        const double floor = cluster_separation_floor();
        for (int attempt = 0;; ++attempt) {
            require(attempt < 10000, ErrorKind::sampling, "could not place separated cluster centers");
            d.centers.clear();
            for (int c = 0; c < n_classes; ++c) d.centers.push_back({rng.uniform() * hi, rng.uniform() * hi});
            double min_d = 1e300;
            for (int a = 0; a < n_classes; ++a)
                for (int b = a + 1; b < n_classes; ++b)
                    min_d = std::min(min_d, std::sqrt(detail::dist2(d.centers[static_cast<std::size_t>(a)],
                                                                    d.centers[static_cast<std::size_t>(b)])));
            if (min_d > floor) break;
        }
        std::sort(d.centers.begin(), d.centers.end());
        break;
    }
    case Family::pattern_label: {
        // Template c = (cue from symbol group c, domain-specific key symbol).
        std::vector<int> keys;
        for (int s = 0; s < tok::symbol_count; ++s) keys.push_back(tok::symbol_base + s);
        rng.shuffle(keys);
        for (int c = 0; c < n_classes; ++c) {
            std::vector<int> group;
            for (int s = 0; s < tok::symbol_count; ++s)
                if (s % n_classes == c) group.push_back(tok::symbol_base + s);
            d.templates.push_back({group[rng.index(group.size())], keys[static_cast<std::size_t>(c)]});
        }
        break;
    }
    case Family::arithmetic_mod:
        d.window = static_cast<int>(rng.index(arith_len - 1));
        break;
    }
    return d;
}

/// One labelled input; when `cls` is set the input is redrawn until its class matches.
inline Example sample_example(const DomainSpec& d, Rng& rng, std::optional<int> cls = std::nullopt) {
    const int target = cls ? *cls : static_cast<int>(rng.index(static_cast<std::size_t>(d.n_classes)));
    require(target >= 0 && target < d.n_classes, ErrorKind::input, "class index out of range");
    for (int attempt = 0; attempt < 1000; ++attempt) {
        Tokens x;
        switch (d.family) {
        case Family::cluster_label: {
            const auto& c = d.centers[static_cast<std::size_t>(target)];
            int xy[2];
            for (int j = 0; j < 2; ++j) {
                const double v = std::round(c[static_cast<std::size_t>(j)] + cluster_std * rng.normal());
                xy[j] = static_cast<int>(std::clamp(v, 0.0, double(tok::grid - 1)));
            }
            x.push_back(tok::cell_base + xy[1] * tok::grid + xy[0]);
            break;
        }
        case Family::pattern_label: {
            const auto& tpl = d.templates[static_cast<std::size_t>(target)];
            x = {tok::symbol_base + static_cast<int>(rng.index(tok::symbol_count)), tpl[0], tpl[1]};
            if (rng.uniform() < d.decoy_rate) {
                int wrong = static_cast<int>(rng.index(static_cast<std::size_t>(d.n_classes - 1)));
                if (wrong >= target) ++wrong;
                x[1] = d.templates[static_cast<std::size_t>(wrong)][0];
            }
            break;
        }
        case Family::arithmetic_mod:
            for (int j = 0; j < arith_len; ++j) x.push_back(tok::digit_base + static_cast<int>(rng.index(tok::digit_count)));
            break;
        }
        if (classify(d, x) == target)
            return Example{std::move(x), d.label_tokens[static_cast<std::size_t>(target)]};
    }
    fail(ErrorKind::sampling, "could not draw an input of class " + std::to_string(target));
}

inline int class_of_label(const DomainSpec& d, int label_token) {
    const auto it = std::find(d.label_tokens.begin(), d.label_tokens.end(), label_token);
    return it == d.label_tokens.end() ? -1 : static_cast<int>(it - d.label_tokens.begin());
}

inline PromptSpec build_zero_shot_prompt(const DomainSpec& d, std::uint64_t seed) {
    Rng rng(seed);
    const Example q = sample_example(d, rng);
    PromptSpec p;
    p.query = q.input;
    p.gold = q.label;
    p.domain_id = d.domain_id;
    p.tag = d.tag;
    p.candidate_labels = d.label_tokens;
    return p;
}

inline double cosine(const Vector& a, const Vector& b) {
    const double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) return 0.0;
    return a.dot(b) / (na * nb);
}

inline PromptSpec build_icl_prompt(const DomainSpec& d, const SamplingStrategy& strategy, std::uint64_t seed,
                                   const Embedder& embed = bag_of_tokens) {
    strategy.validate();
    PromptSpec p = build_zero_shot_prompt(d, seed);
    Rng rng(mix_seed(seed, 0xDE305));
    auto fresh = [&](std::optional<int> cls) {
        for (int attempt = 0; attempt < 200; ++attempt) {
            Example e = sample_example(d, rng, cls);
            if (e.input != p.query) return e;
        }
        fail(ErrorKind::sampling, "could not draw a demonstration distinct from the query");
    };
    if (strategy.mode == SamplingStrategy::Mode::balance) {
        for (int c = 0; c < d.n_classes; ++c)
            for (int i = 0; i < strategy.k; ++i) p.demos.push_back(fresh(c));
        rng.shuffle(p.demos);
    } else {
        require(strategy.pool_size >= strategy.k, ErrorKind::sampling,
                "candidate pool of " + std::to_string(strategy.pool_size) + " is smaller than the request of " +
                    std::to_string(strategy.k));
        std::vector<Example> pool;
        for (int i = 0; i < strategy.pool_size; ++i) pool.push_back(fresh(std::nullopt));
        const Vector qe = embed(p.query);
        std::vector<std::pair<double, std::size_t>> scored;
        for (std::size_t i = 0; i < pool.size(); ++i) scored.emplace_back(-cosine(qe, embed(pool[i].input)), i);
        std::stable_sort(scored.begin(), scored.end(),
                         [](const auto& a, const auto& b) { return a.first < b.first; });
        // Most similar demo sits closest to the query.
        for (int i = strategy.k - 1; i >= 0; --i) p.demos.push_back(pool[scored[static_cast<std::size_t>(i)].second]);
    }
    return p;
}

// ---------------------------------------------------------------------------
// Evaluation splits

enum class Split { id, near_ood, far_ood };

inline std::string to_string(Split s) {
    switch (s) {
    case Split::id: return "id";
    case Split::near_ood: return "near-ood";
    case Split::far_ood: return "far-ood";
    }
    return "?";
}

struct DomainSuite {
    std::vector<DomainSpec> id, near_ood, far_ood;

    const std::vector<DomainSpec>& split(Split s) const {
        return s == Split::id ? id : (s == Split::near_ood ? near_ood : far_ood);
    }
};

/// Five held-in domains, three near-OOD domains (seen families, new seeds)
/// and four far-OOD domains (the held-out arithmetic family).
inline DomainSuite default_suite(std::uint64_t seed) {
    DomainSuite s;
    auto dom = [&](Family f, int c, std::uint64_t stream) { return make_domain(f, mix_seed(seed, stream), c); };
    s.id = {dom(Family::cluster_label, 2, 1), dom(Family::cluster_label, 3, 2), dom(Family::pattern_label, 2, 3),
            dom(Family::pattern_label, 3, 4), dom(Family::pattern_label, 4, 5)};
    s.near_ood = {dom(Family::cluster_label, 2, 11), dom(Family::pattern_label, 2, 12), dom(Family::cluster_label, 4, 13)};
    s.far_ood = {dom(Family::arithmetic_mod, 2, 21), dom(Family::arithmetic_mod, 2, 22),
                 dom(Family::arithmetic_mod, 3, 23), dom(Family::arithmetic_mod, 3, 24)};
    // Give the twelve suite domains twelve distinct tags.
    std::vector<int> tags;
    for (int i = 0; i < tok::tag_count; ++i) tags.push_back(tok::tag_base + i);
    Rng rng(mix_seed(seed, 99));
    rng.shuffle(tags);
    std::size_t next = 0;
    for (auto* split : {&s.id, &s.near_ood, &s.far_ood})
        for (auto& d : *split) d.tag = tags[next++];
    return s;
}

// ---------------------------------------------------------------------------
// Line-delimited prompt records:
//   domain_id <TAB> tag <TAB> demos <TAB> query <TAB> gold <TAB> candidates
// demos are ';'-separated "t t t:label" items, token lists are space-separated.

inline std::string join_tokens(const Tokens& t) {
    std::ostringstream os;
    for (std::size_t i = 0; i < t.size(); ++i) os << (i ? " " : "") << t[i];
    return os.str();
}

inline Tokens split_tokens(const std::string& s) {
    Tokens out;
    std::istringstream is(s);
    int v;
    while (is >> v) out.push_back(v);
    return out;
}

inline std::string serialize_prompt(const PromptSpec& p) {
    std::ostringstream os;
    os << p.domain_id << '\t' << p.tag << '\t';
    for (std::size_t i = 0; i < p.demos.size(); ++i)
        os << (i ? ";" : "") << join_tokens(p.demos[i].input) << ':' << p.demos[i].label;
    os << '\t' << join_tokens(p.query) << '\t' << p.gold << '\t' << join_tokens(p.candidate_labels);
    return os.str();
}

inline PromptSpec parse_prompt(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == '\t') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    fields.push_back(cur);
    require(fields.size() == 6, ErrorKind::format, "prompt record needs 6 tab-separated fields");
    PromptSpec p;
    p.domain_id = fields[0];
    p.tag = std::stoi(fields[1]);
    std::istringstream demos(fields[2]);
    std::string item;
    while (std::getline(demos, item, ';')) {
        if (item.empty()) continue;
        const auto colon = item.rfind(':');
        require(colon != std::string::npos, ErrorKind::format, "demo item lacks a label");
        p.demos.push_back(Example{split_tokens(item.substr(0, colon)), std::stoi(item.substr(colon + 1))});
    }
    p.query = split_tokens(fields[3]);
    p.gold = std::stoi(fields[4]);
    p.candidate_labels = split_tokens(fields[5]);
    return p;
}

} // namespace icr
