#pragma once

// Spiked-covariance sampling, pooled second moments, pooled-PCA recovery of
// the shared subspace as N and D grow, and Davis-Kahan stability under
// symmetric perturbations.

#include "icr/csv.hpp"
#include "icr/errors.hpp"
#include "icr/numcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <vector>

namespace icr {

/// Shared low-rank signal, per-domain low-rank signals and isotropic noise:
/// Sigma_d = S Lambda S^T + B_d Gamma_d B_d^T + sigma^2 I.
struct SpikedModelSpec {
    int dim = 64;
    OrthonormalBasis shared;
    Vector shared_energy; // Lambda, descending
    std::vector<OrthonormalBasis> domain_bases;
    std::vector<Vector> domain_energy; // Gamma_d
    double noise_var = 1.0;

    int n_domains() const { return static_cast<int>(domain_bases.size()); }
    int shared_rank() const { return static_cast<int>(shared.rank()); }

    void validate() const {
        require(shared.dim() == dim && shared_energy.size() == shared.rank(), ErrorKind::shape,
                "shared basis and energies disagree");
        for (Eigen::Index i = 1; i < shared_energy.size(); ++i)
            require(shared_energy(i) <= shared_energy(i - 1), ErrorKind::input, "shared energies must be descending");
        require(domain_bases.size() == domain_energy.size(), ErrorKind::shape, "one energy vector per domain basis");
        for (std::size_t d = 0; d < domain_bases.size(); ++d)
            require(domain_bases[d].dim() == dim && domain_energy[d].size() == domain_bases[d].rank(), ErrorKind::shape,
                    "domain basis and energies disagree");
        require(noise_var >= 0.0, ErrorKind::input, "noise variance must be non-negative");
    }
};

struct SpikedDefaults {
    int dim = 64;
    int shared_rank = 4;
    int domain_rank = 4;
    std::vector<double> shared_energy{8, 6, 4, 2};
    std::vector<double> domain_energy{3, 3, 3, 3};
    double noise_var = 1.0;
    bool correlated_domains = false; // every domain reuses one basis

    void validate() const {
        require(static_cast<int>(shared_energy.size()) == shared_rank &&
                    static_cast<int>(domain_energy.size()) == domain_rank,
                ErrorKind::config, "energy lists must match the ranks");
        require(shared_rank >= 1 && shared_rank < dim && domain_rank >= 0 && domain_rank <= dim, ErrorKind::config,
                "ranks must fit the dimension");
    }
};

inline Vector to_vector(const std::vector<double>& v) {
    return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

/// Shared subspace from `seed`; domain bases are independent Haar-like draws.
inline SpikedModelSpec make_spiked_spec(const SpikedDefaults& p, int n_domains, std::uint64_t seed) {
    p.validate();
    require(n_domains >= 1, ErrorKind::input, "at least one domain required");
    SpikedModelSpec s;
    s.dim = p.dim;
    s.shared = random_orthogonal_basis(p.dim, p.shared_rank, mix_seed(seed, 0));
    s.shared_energy = to_vector(p.shared_energy);
    s.noise_var = p.noise_var;
    for (int d = 0; d < n_domains; ++d) {
        const std::uint64_t stream = p.correlated_domains ? 1 : static_cast<std::uint64_t>(d + 1);
        if (p.domain_rank > 0)
            s.domain_bases.push_back(random_orthogonal_basis(p.dim, p.domain_rank, mix_seed(seed, stream)));
        else
            s.domain_bases.emplace_back(Matrix(p.dim, 0));
        s.domain_energy.push_back(to_vector(p.domain_energy));
    }
    s.validate();
    return s;
}

using DomainSamples = std::vector<std::vector<Vector>>;

/// Per-domain draws x = S Lambda^{1/2} z1 + B_d Gamma_d^{1/2} z2 + sigma z3.
inline DomainSamples sample_spiked(const SpikedModelSpec& spec, const std::vector<int>& n_per_domain,
                                   std::uint64_t seed) {
    spec.validate();
    require(static_cast<int>(n_per_domain.size()) == spec.n_domains(), ErrorKind::input,
            "one sample count per domain required");
    Rng rng(seed);
    const double sigma = std::sqrt(spec.noise_var);
    const Matrix s_half = spec.shared.columns() * spec.shared_energy.cwiseSqrt().asDiagonal();
    DomainSamples out(static_cast<std::size_t>(spec.n_domains()));
    for (int d = 0; d < spec.n_domains(); ++d) {
        const auto ud = static_cast<std::size_t>(d);
        require(n_per_domain[ud] >= 1, ErrorKind::input, "every domain needs at least one sample");
        const Matrix b_half = spec.domain_bases[ud].columns() * spec.domain_energy[ud].cwiseSqrt().asDiagonal();
        for (int i = 0; i < n_per_domain[ud]; ++i) {
            Vector z1(s_half.cols()), z2(b_half.cols()), z3(spec.dim);
            for (Eigen::Index j = 0; j < z1.size(); ++j) z1(j) = rng.normal();
            for (Eigen::Index j = 0; j < z2.size(); ++j) z2(j) = rng.normal();
            for (Eigen::Index j = 0; j < z3.size(); ++j) z3(j) = rng.normal();
            out[ud].push_back(s_half * z1 + b_half * z2 + sigma * z3);
        }
    }
    return out;
}

inline DomainSamples sample_spiked(const SpikedModelSpec& spec, int n_per_domain, std::uint64_t seed) {
    return sample_spiked(spec, std::vector<int>(static_cast<std::size_t>(spec.n_domains()), n_per_domain), seed);
}

/// (1/N) sum over all domains and samples of x x^T, as an accumulator.
inline CovarianceAccumulator pooled_covariance(const DomainSamples& samples) {
    require(!samples.empty() && !samples.front().empty(), ErrorKind::input, "no samples to pool");
    CovarianceAccumulator acc(samples.front().front().size());
    for (const auto& dom : samples)
        for (const auto& x : dom) acc.add(x);
    return acc;
}

/// S Lambda S^T + sigma^2 I + sum_d (n_d / N) B_d Gamma_d B_d^T.
inline Matrix population_pooled(const SpikedModelSpec& spec, const std::vector<int>& n_per_domain) {
    Matrix m = spec.shared.columns() * spec.shared_energy.asDiagonal() * spec.shared.columns().transpose();
    m += spec.noise_var * Matrix::Identity(spec.dim, spec.dim);
    double total = 0.0;
    for (int n : n_per_domain) total += n;
    for (int d = 0; d < spec.n_domains(); ++d) {
        const auto ud = static_cast<std::size_t>(d);
        const Matrix& b = spec.domain_bases[ud].columns();
        m += (n_per_domain[ud] / total) * (b * spec.domain_energy[ud].asDiagonal() * b.transpose());
    }
    return m;
}

struct SubspaceReport {
    int n = 0;
    int n_domains = 0;
    std::uint64_t seed = 0;
    double sin_theta = 0.0;
    double eigengap = 0.0;
    std::optional<double> eps;
    std::optional<double> bound;
};

/// lambda_r - lambda_{r+1} of a symmetric matrix, clamped at 0.
inline double eigengap(const Matrix& sym, int r) {
    const SymmetricEigen e = symmetric_eigen_desc(sym);
    require(r >= 1 && r < e.values.size(), ErrorKind::invalid_rank, "eigengap needs 1 <= r < dim");
    return std::max(0.0, e.values(r - 1) - e.values(r));
}

struct RecoveryCell {
    int n = 0;
    int n_domains = 0;
    double median_sin_theta = 0.0;
    double expectation_error = 0.0; // ||mean pooled - mean population||_F / ||mean population||_F
};

struct RecoveryResult {
    std::vector<SubspaceReport> reports;
    std::vector<RecoveryCell> cells;
};

inline double median(std::vector<double> v) {
    require(!v.empty(), ErrorKind::input, "median of an empty list");
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// For every (N, D) pair: `seeds` independent specs and samples with N total
/// samples split evenly over D domains; pooled PCA of rank r_s against S.
inline RecoveryResult recovery_experiment(const SpikedDefaults& params, const std::vector<int>& n_grid,
                                          const std::vector<int>& d_grid, int r_extract, int seeds,
                                          std::uint64_t base_seed = 0) {
    params.validate();
    require(!n_grid.empty() && !d_grid.empty() && seeds >= 1, ErrorKind::input, "grids must be non-empty");
    require(r_extract == params.shared_rank, ErrorKind::invalid_rank, "extraction rank must equal the shared rank");
    RecoveryResult out;
    for (int n : n_grid) {
        for (int dn : d_grid) {
            require(dn >= 1 && n >= dn, ErrorKind::input, "need at least one sample per domain");
            std::vector<int> counts(static_cast<std::size_t>(dn), n / dn);
            for (int i = 0; i < n % dn; ++i) ++counts[static_cast<std::size_t>(i)];
            std::vector<double> sins;
            Matrix mean_hat = Matrix::Zero(params.dim, params.dim);
            Matrix mean_pop = Matrix::Zero(params.dim, params.dim);
            for (int s = 0; s < seeds; ++s) {
                const std::uint64_t seed = mix_seed(base_seed, static_cast<std::uint64_t>(s));
                const SpikedModelSpec spec = make_spiked_spec(params, dn, seed);
                const CovarianceAccumulator acc = pooled_covariance(sample_spiked(spec, counts, mix_seed(seed, 77)));
                const Matrix hat = acc.second_moment();
                const OrthonormalBasis u = top_eigenspace(hat, r_extract);
                SubspaceReport r;
                r.n = n;
                r.n_domains = dn;
                r.seed = static_cast<std::uint64_t>(s);
                r.sin_theta = subspace_sin_theta(u, spec.shared);
                r.eigengap = eigengap(hat, r_extract);
                out.reports.push_back(r);
                sins.push_back(r.sin_theta);
                mean_hat += hat / seeds;
                mean_pop += population_pooled(spec, counts) / seeds;
            }
            out.cells.push_back(RecoveryCell{n, dn, median(sins), (mean_hat - mean_pop).norm() / mean_pop.norm()});
        }
    }
    return out;
}

/// Symmetric Gaussian (GOE) matrix rescaled to operator norm exactly eps.
inline Matrix goe_perturbation(int dim, double eps, std::uint64_t seed) {
    require(eps >= 0.0, ErrorKind::input, "perturbation size must be non-negative");
    if (eps == 0.0) return Matrix::Zero(dim, dim);
    Rng rng(seed);
    const Matrix a = rng.gaussian(dim, dim);
    const Matrix g = 0.5 * (a + a.transpose());
    const SymmetricEigen e = symmetric_eigen_desc(g);
    const double op = std::max(std::abs(e.values(0)), std::abs(e.values(dim - 1)));
    return g * (eps / op);
}

struct PerturbationResult {
    std::vector<SubspaceReport> reports;
    int checked = 0;    // runs with eps < gap / 2
    int violations = 0; // of those, runs with sin_theta > eps / gap + 1e-9
};

/// Perturbs each seed's empirical pooled covariance (N total samples over D
/// domains) and compares the top-r_s eigenspaces before and after.
inline PerturbationResult perturbation_experiment(const SpikedDefaults& params, const std::vector<double>& eps_grid,
                                                  int seeds, int n_total = 5000, int n_domains = 4,
                                                  std::uint64_t base_seed = 0) {
    params.validate();
    require(!eps_grid.empty() && seeds >= 1, ErrorKind::input, "eps grid and seeds must be non-empty");
    PerturbationResult out;
    const int r = params.shared_rank;
    for (int s = 0; s < seeds; ++s) {
        const std::uint64_t seed = mix_seed(base_seed, static_cast<std::uint64_t>(s));
        const SpikedModelSpec spec = make_spiked_spec(params, n_domains, seed);
        const Matrix hat =
            pooled_covariance(sample_spiked(spec, std::max(1, n_total / n_domains), mix_seed(seed, 77))).second_moment();
        const OrthonormalBasis u = top_eigenspace(hat, r);
        const double gap = eigengap(hat, r);
        for (std::size_t k = 0; k < eps_grid.size(); ++k) {
            const double eps = eps_grid[k];
            const Matrix pert = hat + goe_perturbation(params.dim, eps, mix_seed(seed, 1000 + k));
            SubspaceReport rep;
            rep.n = n_total;
            rep.n_domains = n_domains;
            rep.seed = static_cast<std::uint64_t>(s);
            rep.sin_theta = subspace_sin_theta(u, top_eigenspace(pert, r));
            rep.eigengap = gap;
            rep.eps = eps;
            rep.bound = gap > 0.0 ? eps / gap : std::numeric_limits<double>::infinity();
            if (eps < gap / 2.0) {
                ++out.checked;
                if (rep.sin_theta > *rep.bound + 1e-9) ++out.violations;
            }
            out.reports.push_back(rep);
        }
    }
    return out;
}

inline CsvTable subspace_table(const std::vector<SubspaceReport>& reports) {
    CsvTable t({"N", "D", "seed", "sin_theta", "eigengap", "eps", "bound"});
    for (const auto& r : reports)
        t.row_strings({std::to_string(r.n), std::to_string(r.n_domains), std::to_string(r.seed), fmt6(r.sin_theta),
                       fmt6(r.eigengap), r.eps ? fmt6(*r.eps) : "", r.bound ? fmt6(*r.bound) : ""});
    return t;
}

} // namespace icr
