#pragma once

// Post-hoc analyses over recorded routing outputs: layer, head and PID
// importance, ICLness token scoring, and cost accounting.

#include "icr/csv.hpp"
#include "icr/errors.hpp"
#include "icr/numcore.hpp"
#include "icr/router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

namespace icr {

namespace detail {

/// (x - min) / (max - min); a constant stream becomes all ones.
inline Vector min_max(const Vector& x) {
    const double lo = x.minCoeff(), hi = x.maxCoeff();
    if (!(hi > lo)) return Vector::Ones(x.size());
    return (x.array() - lo) / (hi - lo);
}

inline void require_routings(const std::vector<RoutingOutput>& outs) {
    require(!outs.empty(), ErrorKind::input, "analysis needs at least one routing output");
    for (const auto& o : outs)
        require(o.alpha.rows() == outs.front().alpha.rows() && o.alpha.cols() == outs.front().alpha.cols() &&
                    o.gamma.rows() == outs.front().gamma.rows() && o.gamma.cols() == outs.front().gamma.cols() &&
                    o.alpha.rows() == o.gamma.rows(),
                ErrorKind::shape, "routing outputs disagree in shape");
}

} // namespace detail

struct ImportanceProfile {
    std::vector<int> layers;
    Vector importance; // sums to 1
};

/// Per input: product of min-max normalized mean gate and mean |alpha| per
/// layer, renormalized; the profile is the mean over inputs. A product that
/// vanishes everywhere contributes a uniform profile.
inline ImportanceProfile layer_importance(const std::vector<RoutingOutput>& outs, std::vector<int> layers = {}) {
    detail::require_routings(outs);
    const Eigen::Index L = outs.front().alpha.rows();
    if (layers.empty()) {
        layers.resize(static_cast<std::size_t>(L));
        std::iota(layers.begin(), layers.end(), 0);
    }
    require(static_cast<Eigen::Index>(layers.size()) == L, ErrorKind::shape, "one layer index per routed layer");
    Vector acc = Vector::Zero(L);
    for (const auto& o : outs) {
        const Vector gate = o.gamma.rowwise().mean();
        const Vector mag = o.alpha.cwiseAbs().rowwise().mean();
        Vector p = detail::min_max(gate).cwiseProduct(detail::min_max(mag));
        const double s = p.sum();
        p = s > 0.0 ? Vector(p / s) : Vector(Vector::Constant(L, 1.0 / static_cast<double>(L)));
        acc += p;
    }
    acc /= static_cast<double>(outs.size());
    return {std::move(layers), acc / acc.sum()};
}

struct HeadImportance {
    Matrix mean_gate;      // L_int x H
    std::vector<int> top1; // per layer, lowest index on ties
};

inline HeadImportance head_importance(const std::vector<RoutingOutput>& outs) {
    detail::require_routings(outs);
    HeadImportance h;
    h.mean_gate = Matrix::Zero(outs.front().gamma.rows(), outs.front().gamma.cols());
    for (const auto& o : outs) h.mean_gate += o.gamma;
    h.mean_gate /= static_cast<double>(outs.size());
    for (Eigen::Index l = 0; l < h.mean_gate.rows(); ++l) {
        int best = 0;
        for (Eigen::Index j = 1; j < h.mean_gate.cols(); ++j)
            if (h.mean_gate(l, j) > h.mean_gate(l, best)) best = static_cast<int>(j);
        h.top1.push_back(best);
    }
    return h;
}

/// Mean over inputs and layers of |alpha_l| scaled by layer l's mean gate.
inline Vector pid_importance(const std::vector<RoutingOutput>& outs) {
    detail::require_routings(outs);
    Vector acc = Vector::Zero(outs.front().alpha.cols());
    for (const auto& o : outs) {
        const Vector gate = o.gamma.rowwise().mean();
        for (Eigen::Index l = 0; l < o.alpha.rows(); ++l) acc += gate(l) * o.alpha.row(l).cwiseAbs().transpose();
    }
    return acc / static_cast<double>(outs.size() * static_cast<std::size_t>(outs.front().alpha.rows()));
}

/// 1-based ranks in ascending order, ties share their average rank.
inline Vector average_ranks(const Vector& x) {
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(x.size()));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return x(a) < x(b); });
    Vector r(x.size());
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && x(idx[j + 1]) == x(idx[i])) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r(idx[k]) = avg;
        i = j + 1;
    }
    return r;
}

inline double pearson(const Vector& a, const Vector& b) {
    const Vector da = a.array() - a.mean(), db = b.array() - b.mean();
    const double den = std::sqrt(da.squaredNorm() * db.squaredNorm());
    require(den > 0.0, ErrorKind::numeric, "correlation undefined for a constant ranking");
    return da.dot(db) / den;
}

inline double spearman(const Vector& a, const Vector& b) {
    require(a.size() == b.size(), ErrorKind::shape, "spearman inputs differ in length");
    require(a.size() >= 2, ErrorKind::invalid_rank, "spearman correlation needs at least two entries");
    return pearson(average_ranks(a), average_ranks(b));
}

/// Pairwise Spearman correlation of per-dataset PID importance vectors.
inline Matrix pid_importance_corr(const std::vector<std::vector<RoutingOutput>>& per_dataset) {
    require(per_dataset.size() >= 2, ErrorKind::input, "PID correlation needs at least two datasets");
    std::vector<Vector> imp;
    for (const auto& d : per_dataset) imp.push_back(pid_importance(d));
    require(imp.front().size() >= 2, ErrorKind::invalid_rank, "PID correlation is undefined for r < 2");
    const auto n = static_cast<Eigen::Index>(imp.size());
    Matrix c = Matrix::Identity(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i + 1; j < n; ++j)
            c(i, j) = c(j, i) = spearman(imp[static_cast<std::size_t>(i)], imp[static_cast<std::size_t>(j)]);
    return c;
}

// ---------------------------------------------------------------------------
// ICLness

/// Full-vocabulary next-token log-probs, one row per query.
struct DatasetLogProbs {
    std::string name;
    Matrix zero_shot;
    Matrix routed;
};

struct TokenBiasStats {
    int token = 0;
    double mean = 0.0;
    double std = 0.0;
    double pos_rate = 0.0;
    double borda = 0.0;
    double stability = 0.0;
    double score = 0.0;
};

inline constexpr double iclness_eps = 1e-6;

/// Borda points (|V| - rank) / |V| per token, rank 1-based by descending value
/// with ties sharing their average rank.
inline Vector borda_points(const Vector& b) {
    const double v = static_cast<double>(b.size());
    const Vector desc_rank = average_ranks(-b);
    return (v - desc_rank.array()) / v;
}

inline std::vector<TokenBiasStats> iclness_scores(const std::vector<DatasetLogProbs>& data) {
    require(data.size() >= 2, ErrorKind::input, "ICLness needs at least two datasets");
    const Eigen::Index V = data.front().zero_shot.cols();
    std::vector<Vector> bias;
    for (const auto& d : data) {
        require(d.zero_shot.cols() == V && d.routed.cols() == V, ErrorKind::input,
                "vocabulary size differs across datasets");
        require(d.zero_shot.rows() == d.routed.rows() && d.zero_shot.rows() > 0, ErrorKind::input,
                "zero-shot and routed log-probs must pair up");
        bias.push_back((d.routed - d.zero_shot).colwise().mean().transpose());
    }
    const double n = static_cast<double>(data.size());
    Vector borda = Vector::Zero(V);
    for (const auto& b : bias) borda += borda_points(b);
    borda /= n;

    std::vector<TokenBiasStats> out;
    for (Eigen::Index v = 0; v < V; ++v) {
        TokenBiasStats s;
        s.token = static_cast<int>(v);
        int pos = 0;
        for (const auto& b : bias) {
            s.mean += b(v) / n;
            pos += b(v) > 0.0;
        }
        for (const auto& b : bias) s.std += (b(v) - s.mean) * (b(v) - s.mean) / n;
        s.std = std::sqrt(s.std);
        s.pos_rate = pos / n;
        s.borda = borda(v);
        s.stability = s.mean / (s.std + iclness_eps);
        s.score = s.stability * s.pos_rate * std::log1p(s.borda);
        out.push_back(s);
    }
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
    return out;
}

inline CsvTable iclness_table(const std::vector<TokenBiasStats>& stats) {
    CsvTable t({"token", "mean", "std", "pos_rate", "borda", "stability", "score"});
    for (const auto& s : stats) t.row(s.token, s.mean, s.std, s.pos_rate, s.borda, s.stability, s.score);
    return t;
}

// ---------------------------------------------------------------------------
// Cost accounting

inline long long cached_parameter_count(int rank, int width, int n_intervened) {
    return 2LL * rank * width * n_intervened;
}

struct TimingStats {
    double mean = 0.0;
    double std = 0.0;
    std::size_t n = 0;
};

inline TimingStats timing_stats(const std::vector<double>& xs) {
    require(xs.size() >= 30, ErrorKind::input, "at least 30 timing samples per mode are required");
    TimingStats t;
    t.n = xs.size();
    for (double x : xs) t.mean += x / static_cast<double>(xs.size());
    for (double x : xs) t.std += (x - t.mean) * (x - t.mean) / static_cast<double>(xs.size());
    t.std = std::sqrt(t.std);
    return t;
}

struct ResourceReport {
    long long cached_params = 0;
    TimingStats zero_shot, icr, few_shot;
    double icr_faster_than_few = 0.0; // fraction of paired samples
};

/// Timings are seconds per query, paired by index across modes.
inline ResourceReport resource_report(int rank, int width, int n_intervened, const std::vector<double>& zs,
                                      const std::vector<double>& icr, const std::vector<double>& few) {
    require(zs.size() == icr.size() && icr.size() == few.size(), ErrorKind::input,
            "timing samples must be paired across modes");
    ResourceReport r;
    r.cached_params = cached_parameter_count(rank, width, n_intervened);
    r.zero_shot = timing_stats(zs);
    r.icr = timing_stats(icr);
    r.few_shot = timing_stats(few);
    std::size_t wins = 0;
    for (std::size_t i = 0; i < icr.size(); ++i) wins += icr[i] < few[i];
    r.icr_faster_than_few = static_cast<double>(wins) / static_cast<double>(icr.size());
    return r;
}

inline CsvTable resource_table(const ResourceReport& r) {
    CsvTable t({"mode", "mean_s", "std_s", "n"});
    t.row(std::string("zero-shot"), r.zero_shot.mean, r.zero_shot.std, r.zero_shot.n);
    t.row(std::string("icr"), r.icr.mean, r.icr.std, r.icr.n);
    t.row(std::string("few-shot"), r.few_shot.mean, r.few_shot.std, r.few_shot.n);
    return t;
}

} // namespace icr
