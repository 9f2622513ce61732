#pragma once

// Dense linear-algebra substrate: PCA on streamed second moments, random
// orthogonal bases, principal angles, entropy and a finite-difference
// gradient harness. Everything is binary64.

#include "icr/errors.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <vector>

namespace icr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

// splitmix64; used to derive independent seed streams from one global seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream = 0) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    double normal() { return normal_(engine_); }
    double uniform() { return uniform_(engine_); }
    // Uniform integer in [0, n).
    std::size_t index(std::size_t n) {
        return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
    }
    std::mt19937_64& engine() { return engine_; }

    template <class T>
    void shuffle(std::vector<T>& v) {
        // Fisher-Yates with our own index draws so the order does not depend
        // on the standard library's std::shuffle implementation.
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
    }

    Matrix gaussian(Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
        Matrix m(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = scale * normal();
        return m;
    }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// d x r matrix with orthonormal columns.
class OrthonormalBasis {
public:
    OrthonormalBasis() = default;

    explicit OrthonormalBasis(Matrix columns, double tol = 1e-6) : columns_(std::move(columns)) {
        require(columns_.cols() <= columns_.rows(), ErrorKind::invalid_rank,
                "basis rank exceeds its dimension");
        require(columns_.allFinite(), ErrorKind::numeric, "basis has non-finite entries");
        const Matrix gram = columns_.transpose() * columns_;
        const Matrix eye = Matrix::Identity(gram.rows(), gram.cols());
        require(columns_.cols() == 0 || (gram - eye).cwiseAbs().maxCoeff() <= tol, ErrorKind::numeric,
                "columns are not orthonormal");
    }

    Eigen::Index dim() const { return columns_.rows(); }
    Eigen::Index rank() const { return columns_.cols(); }
    const Matrix& columns() const { return columns_; }

private:
    Matrix columns_;
};

/// Streaming second-moment accumulator: sum of x x^T plus the sample count.
/// The plain sum is kept too so that optional mean-centering stays available.
class CovarianceAccumulator {
public:
    CovarianceAccumulator() = default;
    explicit CovarianceAccumulator(Eigen::Index dim)
        : dim_(dim), sum_outer_(Matrix::Zero(dim, dim)), sum_(Vector::Zero(dim)) {}

    void add(const Vector& x) {
        require(x.size() == dim_, ErrorKind::shape, "sample length does not match accumulator dim");
        sum_outer_.selfadjointView<Eigen::Lower>().rankUpdate(x);
        sum_ += x;
        ++count_;
        symmetric_ = false;
    }

    void merge(const CovarianceAccumulator& other) {
        require(other.dim_ == dim_, ErrorKind::shape, "cannot merge accumulators of different dim");
        symmetrize();
        sum_outer_ += other.sum_outer();
        sum_ += other.sum_;
        count_ += other.count_;
    }

    Eigen::Index dim() const { return dim_; }
    std::size_t sample_count() const { return count_; }

    const Matrix& sum_outer() const {
        symmetrize();
        return sum_outer_;
    }
    const Vector& sum() const { return sum_; }

    /// sum_outer / N, or the centered covariance when `center` is set.
    Matrix second_moment(bool center = false) const {
        require(count_ > 0, ErrorKind::input, "empty accumulator");
        Matrix m = sum_outer() / static_cast<double>(count_);
        if (center) {
            const Vector mean = sum_ / static_cast<double>(count_);
            m -= mean * mean.transpose();
        }
        return m;
    }

    // Rebuild from serialized parts.
    static CovarianceAccumulator from_parts(Matrix sum_outer, Vector sum, std::size_t count) {
        CovarianceAccumulator acc(sum_outer.rows());
        require(sum_outer.rows() == sum_outer.cols() && sum.size() == sum_outer.rows(), ErrorKind::shape,
                "accumulator parts have inconsistent shapes");
        acc.sum_outer_ = std::move(sum_outer);
        acc.sum_ = std::move(sum);
        acc.count_ = count;
        acc.symmetric_ = true;
        return acc;
    }

private:
    void symmetrize() const {
        if (symmetric_) return;
        sum_outer_.triangularView<Eigen::StrictlyUpper>() = sum_outer_.transpose();
        symmetric_ = true;
    }

    Eigen::Index dim_ = 0;
    std::size_t count_ = 0;
    mutable Matrix sum_outer_;
    Vector sum_;
    mutable bool symmetric_ = true;
};

/// Flip each column so its first entry with |v| > tol is positive.
inline void fix_column_signs(Matrix& m, double tol = 1e-12) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
            if (std::abs(m(r, c)) > tol) {
                if (m(r, c) < 0) m.col(c) = -m.col(c);
                break;
            }
        }
    }
}

/// Eigenvalues (descending) and matching eigenvectors of a symmetric matrix.
struct SymmetricEigen {
    Vector values;
    Matrix vectors;
};

inline SymmetricEigen symmetric_eigen_desc(const Matrix& sym) {
    require(sym.allFinite(), ErrorKind::numeric, "matrix has non-finite entries");
    Eigen::SelfAdjointEigenSolver<Matrix> solver(sym);
    require(solver.info() == Eigen::Success, ErrorKind::numeric, "eigendecomposition failed");
    const Eigen::Index n = sym.rows();
    SymmetricEigen out{Vector(n), Matrix(n, n)};
    // Eigen returns ascending order.
    for (Eigen::Index i = 0; i < n; ++i) {
        out.values(i) = solver.eigenvalues()(n - 1 - i);
        out.vectors.col(i) = solver.eigenvectors().col(n - 1 - i);
    }
    return out;
}

/// Top-r eigenvectors of a symmetric matrix as a sign-normalized basis.
inline OrthonormalBasis top_eigenspace(const Matrix& sym, Eigen::Index r) {
    require(r >= 0 && r <= sym.rows(), ErrorKind::invalid_rank, "rank request exceeds dim");
    const SymmetricEigen eig = symmetric_eigen_desc(sym);
    Matrix cols = eig.vectors.leftCols(r);
    fix_column_signs(cols);
    return OrthonormalBasis(std::move(cols));
}

inline OrthonormalBasis pca_top_r(const CovarianceAccumulator& acc, Eigen::Index r, bool center = false) {
    require(r >= 1 && r <= acc.dim(), ErrorKind::invalid_rank,
            "rank " + std::to_string(r) + " invalid for dim " + std::to_string(acc.dim()));
    require(acc.sample_count() >= static_cast<std::size_t>(r), ErrorKind::invalid_rank,
            "fewer samples than requested rank");
    const Matrix m = acc.second_moment(center);
    require(m.allFinite(), ErrorKind::numeric, "accumulator has non-finite entries");
    return top_eigenspace(m, r);
}

/// QR of a standard Gaussian d x r matrix with the R diagonal forced positive.
inline OrthonormalBasis random_orthogonal_basis(Eigen::Index dim, Eigen::Index r, std::uint64_t seed) {
    require(r >= 1 && r <= dim, ErrorKind::invalid_rank, "rank request exceeds dim");
    Rng rng(seed);
    const Matrix g = rng.gaussian(dim, r);
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ() * Matrix::Identity(dim, r);
    const Matrix rmat = qr.matrixQR().topRows(r).triangularView<Eigen::Upper>();
    for (Eigen::Index c = 0; c < r; ++c)
        if (rmat(c, c) < 0) q.col(c) = -q.col(c);
    return OrthonormalBasis(std::move(q));
}

/// Operator-norm sine of the largest canonical angle between span(U) and span(V).
inline double subspace_sin_theta(const OrthonormalBasis& u, const OrthonormalBasis& v) {
    require(u.dim() == v.dim() && u.rank() == v.rank(), ErrorKind::shape,
            "sin-theta needs bases of equal dim and rank");
    // Spectral norm of the part of U outside span(V); for equal ranks this is
    // sqrt(1 - s_min^2) of U^T V without the cancellation near zero angles.
    const Matrix residual = u.columns() - v.columns() * (v.columns().transpose() * u.columns());
    if (residual.size() == 0) return 0.0;
    Eigen::JacobiSVD<Matrix> svd(residual);
    return std::clamp(svd.singularValues()(0), 0.0, 1.0);
}

/// Shannon entropy in nats with 0 log 0 = 0.
inline double entropy(std::span<const double> p) {
    double total = 0.0;
    for (double v : p) {
        require(std::isfinite(v) && v >= 0.0, ErrorKind::domain, "probability entries must be >= 0");
        total += v;
    }
    require(std::abs(total - 1.0) <= 1e-6, ErrorKind::domain, "probabilities must sum to 1");
    double h = 0.0;
    for (double v : p)
        if (v > 0.0) h -= v * std::log(v);
    return h;
}

inline double entropy(const Vector& p) { return entropy(std::span<const double>(p.data(), p.size())); }

struct GradReport {
    std::size_t param_count = 0;
    double max_rel_err = 0.0;
    std::vector<double> per_param_err;
};

/// Loss evaluated at `params`; writes the analytic gradient when `grad` is set.
using DifferentiableFn = std::function<double(const Vector& params, Vector* grad)>;

inline GradReport grad_check(const DifferentiableFn& loss_fn, const Vector& params, double eps) {
    require(eps > 0.0, ErrorKind::input, "eps must be positive");
    Vector analytic = Vector::Zero(params.size());
    const double base = loss_fn(params, &analytic);
    require(std::isfinite(base), ErrorKind::numeric, "loss is not finite at the probe point");
    require(analytic.size() == params.size(), ErrorKind::shape, "gradient length mismatch");

    GradReport report;
    report.param_count = static_cast<std::size_t>(params.size());
    report.per_param_err.resize(report.param_count);
    Vector probe = params;
    for (Eigen::Index i = 0; i < params.size(); ++i) {
        probe(i) = params(i) + eps;
        const double up = loss_fn(probe, nullptr);
        probe(i) = params(i) - eps;
        const double down = loss_fn(probe, nullptr);
        probe(i) = params(i);
        require(std::isfinite(up) && std::isfinite(down), ErrorKind::numeric,
                "loss became non-finite while probing");
        const double fd = (up - down) / (2.0 * eps);
        const double err = std::abs(analytic(i) - fd) / std::max(1e-8, std::abs(analytic(i)) + std::abs(fd));
        report.per_param_err[static_cast<std::size_t>(i)] = err;
        report.max_rel_err = std::max(report.max_rel_err, err);
    }
    return report;
}

} // namespace icr
