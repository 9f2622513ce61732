#pragma once

// Matrix-valued reverse-mode tape. Nodes live in one arena; ops record a
// backward closure only when at least one input needs a gradient and the tape
// is recording. Parameters bound by reference are never copied.

#include "icr/errors.hpp"
#include "icr/numcore.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <vector>

namespace icr::ad {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) { nodes_.reserve(256); }

    bool recording() const { return recording_; }

    Var constant(Matrix value) { return push(std::move(value), nullptr, false); }
    /// Constant bound by reference; `value` must outlive the tape.
    Var constant_ref(const Matrix& value) { return push(Matrix(), &value, false); }
    /// Differentiable leaf bound by reference.
    Var param(const Matrix& value) { return push(Matrix(), &value, recording_); }
    /// Differentiable leaf owning its value.
    Var input(Matrix value) { return push(std::move(value), nullptr, recording_); }

    const Matrix& value(Var v) const {
        const Node& n = nodes_[static_cast<std::size_t>(v.id)];
        return n.ext ? *n.ext : n.value;
    }
    bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }

    /// Gradient of the last backward() target w.r.t. v (zeros if untouched).
    Matrix grad(Var v) const {
        const Node& n = nodes_[static_cast<std::size_t>(v.id)];
        if (n.grad.size() == 0) {
            const Matrix& val = value(v);
            return Matrix::Zero(val.rows(), val.cols());
        }
        return n.grad;
    }

    template <class Expr>
    void accumulate(Var v, const Expr& g) {
        Node& n = nodes_[static_cast<std::size_t>(v.id)];
        if (!n.needs_grad) return;
        if (n.grad.size() == 0)
            n.grad = g;
        else
            n.grad += g;
    }

    // grad slot of v, allocated on demand; used by ops that scatter.
    Matrix& grad_slot(Var v) {
        Node& n = nodes_[static_cast<std::size_t>(v.id)];
        if (n.grad.size() == 0) {
            const Matrix& val = n.ext ? *n.ext : n.value;
            n.grad = Matrix::Zero(val.rows(), val.cols());
        }
        return n.grad;
    }

    const Matrix& out_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

    /// Records an op result. `inputs` decide whether a backward closure is kept.
    Var record(Matrix value, std::initializer_list<Var> inputs, std::function<void(Tape&, int)> back) {
        bool needs = false;
        if (recording_)
            for (Var in : inputs)
                if (in.valid() && nodes_[static_cast<std::size_t>(in.id)].needs_grad) needs = true;
        Var out = push(std::move(value), nullptr, needs);
        if (needs) nodes_.back().back = std::move(back);
        return out;
    }

    void backward(Var target) {
        require(recording_, ErrorKind::input, "backward on a non-recording tape");
        const Matrix& tv = value(target);
        require(tv.size() == 1, ErrorKind::shape, "backward target must be a scalar");
        if (!needs_grad(target)) return;
        for (auto& n : nodes_) n.grad.resize(0, 0);
        nodes_[static_cast<std::size_t>(target.id)].grad = Matrix::Ones(1, 1);
        for (int i = target.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.back && n.grad.size() != 0) n.back(*this, i);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        const Matrix* ext = nullptr;
        bool needs_grad = false;
        std::function<void(Tape&, int)> back;
    };

    Var push(Matrix value, const Matrix* ext, bool needs) {
        nodes_.push_back(Node{std::move(value), Matrix(), ext, needs, {}});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    bool recording_;
    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Elementary ops

inline Var matmul(Tape& t, Var a, Var b) {
    const Matrix& av = t.value(a);
    const Matrix& bv = t.value(b);
    require(av.cols() == bv.rows(), ErrorKind::shape, "matmul inner dimensions differ");
    return t.record(av * bv, {a, b}, [a, b](Tape& t, int self) {
        const Matrix& g = t.out_grad(self);
        if (t.needs_grad(a)) t.accumulate(a, g * t.value(b).transpose());
        if (t.needs_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
    });
}

/// a * b^T
inline Var matmul_nt(Tape& t, Var a, Var b) {
    const Matrix& av = t.value(a);
    const Matrix& bv = t.value(b);
    require(av.cols() == bv.cols(), ErrorKind::shape, "matmul_nt inner dimensions differ");
    return t.record(av * bv.transpose(), {a, b}, [a, b](Tape& t, int self) {
        const Matrix& g = t.out_grad(self);
        if (t.needs_grad(a)) t.accumulate(a, g * t.value(b));
        if (t.needs_grad(b)) t.accumulate(b, g.transpose() * t.value(a));
    });
}

inline Var add(Tape& t, Var a, Var b) {
    const Matrix& av = t.value(a);
    const Matrix& bv = t.value(b);
    require(av.rows() == bv.rows() && av.cols() == bv.cols(), ErrorKind::shape, "add shape mismatch");
    return t.record(av + bv, {a, b}, [a, b](Tape& t, int self) {
        const Matrix& g = t.out_grad(self);
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

/// a (n x m) + broadcast row b (1 x m)
inline Var add_row(Tape& t, Var a, Var b) {
    const Matrix& av = t.value(a);
    const Matrix& bv = t.value(b);
    require(bv.rows() == 1 && bv.cols() == av.cols(), ErrorKind::shape, "add_row shape mismatch");
    Matrix out = av;
    out.rowwise() += bv.row(0);
    return t.record(std::move(out), {a, b}, [a, b](Tape& t, int self) {
        const Matrix& g = t.out_grad(self);
        t.accumulate(a, g);
        if (t.needs_grad(b)) t.accumulate(b, g.colwise().sum());
    });
}

inline Var scale(Tape& t, Var a, double s) {
    return t.record(t.value(a) * s, {a}, [a, s](Tape& t, int self) { t.accumulate(a, t.out_grad(self) * s); });
}

/// a * diag(v), v a 1 x cols row.
inline Var col_scale(Tape& t, Var a, Var v) {
    const Matrix& av = t.value(a);
    const Matrix& vv = t.value(v);
    require(vv.rows() == 1 && vv.cols() == av.cols(), ErrorKind::shape, "col_scale shape mismatch");
    Matrix out = av * vv.row(0).asDiagonal();
    return t.record(std::move(out), {a, v}, [a, v](Tape& t, int self) {
        const Matrix& g = t.out_grad(self);
        if (t.needs_grad(a)) t.accumulate(a, g * t.value(v).row(0).asDiagonal());
        if (t.needs_grad(v)) t.accumulate(v, g.cwiseProduct(t.value(a)).colwise().sum());
    });
}

inline Var slice_cols(Tape& t, Var a, Eigen::Index start, Eigen::Index count) {
    const Matrix& av = t.value(a);
    require(start >= 0 && start + count <= av.cols(), ErrorKind::shape, "slice_cols out of range");
    return t.record(av.middleCols(start, count), {a}, [a, start, count](Tape& t, int self) {
        t.grad_slot(a).middleCols(start, count) += t.out_grad(self);
    });
}

inline Var slice_rows(Tape& t, Var a, Eigen::Index start, Eigen::Index count) {
    const Matrix& av = t.value(a);
    require(start >= 0 && start + count <= av.rows(), ErrorKind::shape, "slice_rows out of range");
    return t.record(av.middleRows(start, count), {a}, [a, start, count](Tape& t, int self) {
        t.grad_slot(a).middleRows(start, count) += t.out_grad(self);
    });
}

/// Rows of `table` selected by index (embedding lookup / row gather).
inline Var gather_rows(Tape& t, Var table, std::vector<int> rows) {
    const Matrix& tv = t.value(table);
    Matrix out(static_cast<Eigen::Index>(rows.size()), tv.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        require(rows[i] >= 0 && rows[i] < tv.rows(), ErrorKind::vocab, "row index out of range");
        out.row(static_cast<Eigen::Index>(i)) = tv.row(rows[i]);
    }
    return t.record(std::move(out), {table}, [table, rows = std::move(rows)](Tape& t, int self) {
        const Matrix& g = t.out_grad(self);
        Matrix& slot = t.grad_slot(table);
        for (std::size_t i = 0; i < rows.size(); ++i) slot.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
    });
}

// tanh-approximation GELU.
inline Var gelu(Tape& t, Var a) {
    constexpr double k = 0.7978845608028654; // sqrt(2/pi)
    const Matrix& av = t.value(a);
    Matrix out = av.unaryExpr([](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x))); });
    return t.record(std::move(out), {a}, [a](Tape& t, int self) {
        const Matrix& x = t.value(a);
        const Matrix d = x.unaryExpr([](double v) {
            const double u = k * (v + 0.044715 * v * v * v);
            const double th = std::tanh(u);
            const double du = k * (1.0 + 3.0 * 0.044715 * v * v);
            return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
        });
        t.accumulate(a, t.out_grad(self).cwiseProduct(d));
    });
}

inline Var tanh(Tape& t, Var a) {
    Matrix out = t.value(a).array().tanh().matrix();
    return t.record(out, {a}, [a, out](Tape& t, int self) {
        t.accumulate(a, t.out_grad(self).cwiseProduct((1.0 - out.array().square()).matrix()));
    });
}

inline Var sigmoid(Tape& t, Var a) {
    Matrix out = t.value(a).unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
    return t.record(out, {a}, [a, out](Tape& t, int self) {
        t.accumulate(a, t.out_grad(self).cwiseProduct((out.array() * (1.0 - out.array())).matrix()));
    });
}

inline Var relu(Tape& t, Var a) {
    const Matrix& av = t.value(a);
    Matrix out = av.cwiseMax(0.0);
    return t.record(std::move(out), {a}, [a](Tape& t, int self) {
        const Matrix mask = (t.value(a).array() > 0.0).cast<double>().matrix();
        t.accumulate(a, t.out_grad(self).cwiseProduct(mask));
    });
}

/// Row-wise layer norm with gain/bias rows.
inline Var layer_norm(Tape& t, Var x, Var gain, Var bias, double eps = 1e-5) {
    const Matrix& xv = t.value(x);
    const Eigen::Index n = xv.cols();
    Matrix xhat(xv.rows(), n);
    Vector inv_std(xv.rows());
    for (Eigen::Index i = 0; i < xv.rows(); ++i) {
        const double mean = xv.row(i).mean();
        const double var = (xv.row(i).array() - mean).square().mean();
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        xhat.row(i) = (xv.row(i).array() - mean) * inv_std(i);
    }
    Matrix out = xhat * t.value(gain).row(0).asDiagonal();
    out.rowwise() += t.value(bias).row(0);
    return t.record(std::move(out), {x, gain, bias}, [x, gain, bias, xhat, inv_std](Tape& t, int self) {
        const Matrix& g = t.out_grad(self);
        if (t.needs_grad(gain)) t.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
        if (t.needs_grad(bias)) t.accumulate(bias, g.colwise().sum());
        if (t.needs_grad(x)) {
            const Matrix gx = g * t.value(gain).row(0).asDiagonal();
            const double n = static_cast<double>(xhat.cols());
            Matrix dx(gx.rows(), gx.cols());
            for (Eigen::Index i = 0; i < gx.rows(); ++i) {
                const double m1 = gx.row(i).mean();
                const double m2 = gx.row(i).dot(xhat.row(i)) / n;
                dx.row(i) = inv_std(i) * (gx.row(i).array() - m1 - xhat.row(i).array() * m2);
            }
            t.accumulate(x, dx);
        }
    });
}

/// Sum of all entries, as a 1x1.
inline Var sum(Tape& t, Var a) {
    Matrix out(1, 1);
    out(0, 0) = t.value(a).sum();
    return t.record(std::move(out), {a}, [a](Tape& t, int self) {
        const Matrix& av = t.value(a);
        t.accumulate(a, Matrix::Constant(av.rows(), av.cols(), t.out_grad(self)(0, 0)));
    });
}

/// Mean of |entries| (the L1 norm over the entry count), as a 1x1.
inline Var mean_abs(Tape& t, Var a) {
    const Matrix& av = t.value(a);
    const double n = static_cast<double>(av.size());
    Matrix out(1, 1);
    out(0, 0) = av.cwiseAbs().sum() / n;
    return t.record(std::move(out), {a}, [a, n](Tape& t, int self) {
        const Matrix sgn = t.value(a).unaryExpr([](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
        t.accumulate(a, sgn * (t.out_grad(self)(0, 0) / n));
    });
}

/// Weighted sum of 1x1 scalars.
inline Var weighted_sum(Tape& t, const std::vector<Var>& parts, const std::vector<double>& weights) {
    require(parts.size() == weights.size() && !parts.empty(), ErrorKind::shape, "weighted_sum arity mismatch");
    Matrix out = Matrix::Zero(1, 1);
    for (std::size_t i = 0; i < parts.size(); ++i) out(0, 0) += weights[i] * t.value(parts[i])(0, 0);
    // record() takes an initializer_list, so the inputs are checked by hand here.
    bool needs = false;
    for (Var p : parts) needs = needs || t.needs_grad(p);
    Var anchor = needs ? parts.front() : Var{};
    for (Var p : parts)
        if (t.needs_grad(p)) anchor = p;
    return t.record(std::move(out), {anchor}, [parts, weights](Tape& t, int self) {
        const double g = t.out_grad(self)(0, 0);
        for (std::size_t i = 0; i < parts.size(); ++i) {
            Matrix gi(1, 1);
            gi(0, 0) = g * weights[i];
            t.accumulate(parts[i], gi);
        }
    });
}

inline Vector softmax(const Eigen::Ref<const RowVector>& logits) {
    const double mx = logits.maxCoeff();
    Vector p = (logits.array() - mx).exp().matrix().transpose();
    p /= p.sum();
    return p;
}

inline Vector log_softmax(const Eigen::Ref<const RowVector>& logits) {
    const double mx = logits.maxCoeff();
    const double lse = mx + std::log((logits.array() - mx).exp().sum());
    return (logits.array() - lse).matrix().transpose();
}

/// Mean cross-entropy over rows of `logits` against `gold` ids.
inline Var cross_entropy_rows(Tape& t, Var logits, std::vector<int> gold) {
    const Matrix& lv = t.value(logits);
    require(static_cast<std::size_t>(lv.rows()) == gold.size() && !gold.empty(), ErrorKind::shape,
            "cross-entropy row/label count mismatch");
    Matrix probs(lv.rows(), lv.cols());
    double total = 0.0;
    for (Eigen::Index i = 0; i < lv.rows(); ++i) {
        const int y = gold[static_cast<std::size_t>(i)];
        require(y >= 0 && y < lv.cols(), ErrorKind::vocab, "gold id outside vocabulary");
        const Vector lp = log_softmax(lv.row(i));
        total -= lp(y);
        probs.row(i) = lp.array().exp().matrix().transpose();
    }
    Matrix out(1, 1);
    out(0, 0) = total / static_cast<double>(lv.rows());
    return t.record(std::move(out), {logits}, [logits, gold = std::move(gold), probs](Tape& t, int self) {
        const double g = t.out_grad(self)(0, 0) / static_cast<double>(probs.rows());
        Matrix d = probs;
        for (Eigen::Index i = 0; i < d.rows(); ++i) d(i, gold[static_cast<std::size_t>(i)]) -= 1.0;
        t.accumulate(logits, d * g);
    });
}

/// Entropy (nats) of softmax over a 1 x V logit row, as a 1x1.
inline Var softmax_entropy(Tape& t, Var logits) {
    const Matrix& lv = t.value(logits);
    require(lv.rows() == 1, ErrorKind::shape, "softmax_entropy expects a single row");
    const Vector lp = log_softmax(lv.row(0));
    const Vector p = lp.array().exp().matrix();
    Matrix out(1, 1);
    out(0, 0) = -(p.array() * lp.array()).sum();
    const double h = out(0, 0);
    return t.record(std::move(out), {logits}, [logits, p, lp, h](Tape& t, int self) {
        // dH/dz_j = -p_j (log p_j + H)
        const double g = t.out_grad(self)(0, 0);
        Matrix d = (-(p.array() * (lp.array() + h))).matrix().transpose();
        t.accumulate(logits, d * g);
    });
}

/// Optional per-layer additive logit bias shared across heads, scaled by
/// per-head gates: S_h += gates(0,h) * bias.
struct HeadBias {
    Var bias;  // T x T
    Var gates; // 1 x H
};

struct AttentionProbs {
    std::vector<Matrix> per_head; // T x T each, zero above the diagonal when causal
};

/// Multi-head scaled dot-product attention over concatenated projections.
/// Returns the concatenation of head outputs (T x d) before the output map.
inline Var multi_head_attention(Tape& t, Var q, Var k, Var v, int n_heads, bool causal,
                                const HeadBias* head_bias = nullptr, AttentionProbs* record = nullptr) {
    const Matrix& qv = t.value(q);
    const Matrix& kv = t.value(k);
    const Matrix& vv = t.value(v);
    const Eigen::Index T = qv.rows();
    const Eigen::Index d = qv.cols();
    require(kv.rows() == T && vv.rows() == T && kv.cols() == d && vv.cols() == d, ErrorKind::shape,
            "q/k/v shapes differ");
    require(n_heads > 0 && d % n_heads == 0, ErrorKind::shape, "width not divisible by heads");
    const Eigen::Index dk = d / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));

    const Matrix* bias = nullptr;
    const Matrix* gates = nullptr;
    if (head_bias) {
        bias = &t.value(head_bias->bias);
        gates = &t.value(head_bias->gates);
        require(bias->rows() == T && bias->cols() == T, ErrorKind::shape, "logit bias must be T x T");
        require(gates->rows() == 1 && gates->cols() == n_heads, ErrorKind::shape, "gates must be 1 x H");
    }

    auto probs = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(n_heads));
    Matrix out(T, d);
    for (int h = 0; h < n_heads; ++h) {
        const auto qh = qv.middleCols(h * dk, dk);
        const auto kh = kv.middleCols(h * dk, dk);
        Matrix s = (qh * kh.transpose()) * inv_sqrt;
        if (bias) s += (*gates)(0, h) * (*bias);
        Matrix& p = (*probs)[static_cast<std::size_t>(h)];
        p.resize(T, T);
        for (Eigen::Index i = 0; i < T; ++i) {
            const Eigen::Index valid = causal ? i + 1 : T;
            const double mx = s.row(i).head(valid).maxCoeff();
            double z = 0.0;
            for (Eigen::Index j = 0; j < valid; ++j) {
                p(i, j) = std::exp(s(i, j) - mx);
                z += p(i, j);
            }
            for (Eigen::Index j = 0; j < valid; ++j) p(i, j) /= z;
            for (Eigen::Index j = valid; j < T; ++j) p(i, j) = 0.0;
        }
        out.middleCols(h * dk, dk) = p * vv.middleCols(h * dk, dk);
    }
    if (record) record->per_head = *probs;

    Var bias_var = head_bias ? head_bias->bias : Var{};
    Var gate_var = head_bias ? head_bias->gates : Var{};
    return t.record(std::move(out), {q, k, v, bias_var, gate_var},
                    [q, k, v, bias_var, gate_var, probs, n_heads, dk, inv_sqrt](Tape& t, int self) {
        const Matrix& g = t.out_grad(self);
        const Matrix& qv = t.value(q);
        const Matrix& kv = t.value(k);
        const Matrix& vv = t.value(v);
        const Eigen::Index T = qv.rows();
        const bool want_q = t.needs_grad(q), want_k = t.needs_grad(k), want_v = t.needs_grad(v);
        const bool want_b = bias_var.valid() && t.needs_grad(bias_var);
        const bool want_g = gate_var.valid() && t.needs_grad(gate_var);
        Matrix dq, dk_, dv;
        if (want_q) dq = Matrix::Zero(T, qv.cols());
        if (want_k) dk_ = Matrix::Zero(T, kv.cols());
        if (want_v) dv = Matrix::Zero(T, vv.cols());
        Matrix dbias;
        if (want_b) dbias = Matrix::Zero(T, T);
        Matrix dgate;
        if (want_g) dgate = Matrix::Zero(1, n_heads);
        for (int h = 0; h < n_heads; ++h) {
            const Matrix& p = (*probs)[static_cast<std::size_t>(h)];
            const auto gh = g.middleCols(h * dk, dk);
            if (want_v) dv.middleCols(h * dk, dk) += p.transpose() * gh;
            const Matrix dp = gh * vv.middleCols(h * dk, dk).transpose();
            // softmax backward; masked entries have p = 0 so they drop out.
            const Vector rowdot = (dp.cwiseProduct(p)).rowwise().sum();
            Matrix ds = p.cwiseProduct(dp - rowdot.replicate(1, T));
            if (want_b) dbias += t.value(gate_var)(0, h) * ds;
            if (want_g) dgate(0, h) = ds.cwiseProduct(t.value(bias_var)).sum();
            ds *= inv_sqrt;
            if (want_q) dq.middleCols(h * dk, dk) += ds * kv.middleCols(h * dk, dk);
            if (want_k) dk_.middleCols(h * dk, dk) += ds.transpose() * qv.middleCols(h * dk, dk);
        }
        if (want_q) t.accumulate(q, dq);
        if (want_k) t.accumulate(k, dk_);
        if (want_v) t.accumulate(v, dv);
        if (want_b) t.accumulate(bias_var, dbias);
        if (want_g) t.accumulate(gate_var, dgate);
    });
}

} // namespace icr::ad
