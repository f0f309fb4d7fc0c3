#pragma once

// Data-generating processes for design comparisons, analytic asymptotic
// variances, and the Monte Carlo harness (MSE, size/power, power curves).
//
// Randomness: replication r draws its potential outcomes from
// derive_seed(seed, "po", r) and design D assigns treatment with
// derive_seed(seed, D, r), so every design sees the same units in every
// replication and results do not depend on the thread count.

#include "tupleworks/assign.hpp"
#include "tupleworks/blocking.hpp"
#include "tupleworks/core.hpp"
#include "tupleworks/distributions.hpp"
#include "tupleworks/estimate.hpp"
#include "tupleworks/inference.hpp"
#include "tupleworks/rng.hpp"
#include "tupleworks/variance.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <limits>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace tupleworks {

enum class Model { M1, M2, M3, M4, M5, M6, CalibratedLinear };

inline std::string to_string(Model m) {
    switch (m) {
        case Model::M1: return "M1";
        case Model::M2: return "M2";
        case Model::M3: return "M3";
        case Model::M4: return "M4";
        case Model::M5: return "M5";
        case Model::M6: return "M6";
        case Model::CalibratedLinear: return "calibrated";
    }
    return "unknown";
}

/// Coefficients of the nine-covariate linear outcome model.
inline Vector default_calibration_beta() {
    Vector b(9);
    b << -0.9808, 0.0371, 2.9176, 2.5978, 1.6750, 1.8927, -0.0379, 0.0045, -0.1818;
    return b;
}

/// Y_i(d) = mu_d + m_d(X_i) + s_d(X_i) eps_i.
///
/// Models M1-M6 have K = 2 factors, one N(0,1) covariate and N(0,1) noise.
/// CalibratedLinear has K >= 1 factors, nine covariates of which the first
/// `dim` are observed, and N(0, noise_var) noise:
///   K = 1:  Y(d) = tau d1 + X'beta + eps
///   K >= 2: Y(d) = tau (d1 + sum_{k>=2} d_k / (K-1)) + g_d X'beta + eps,  g_d = d2.
/// Covariates are iid N(0,1) unless a pool is supplied, in which case rows of
/// the column-standardized pool are resampled with replacement.
struct DgpSpec {
    Model model = Model::M1;
    double tau = 0.0;
    int K = 2;
    int dim = 1;
    Vector beta;
    double noise_var = 1.0;
    std::optional<Matrix> covariate_pool;

    static DgpSpec benchmark(Model m, double tau) {
        if (m == Model::CalibratedLinear) throw Error("benchmark: use DgpSpec::calibrated");
        DgpSpec s;
        s.model = m;
        s.tau = tau;
        return s;
    }

    static DgpSpec calibrated(int K, int dim, double tau, std::optional<Matrix> pool = std::nullopt,
                              std::optional<Vector> beta = std::nullopt) {
        DgpSpec s;
        s.model = Model::CalibratedLinear;
        s.K = K;
        s.dim = dim;
        s.tau = tau;
        s.noise_var = 0.1;
        s.beta = beta.value_or(default_calibration_beta());
        if (K < 1 || K > 10) throw Error("calibrated model: K must be in 1..10");
        const auto total = s.beta.size();
        if (pool) {
            if (pool->cols() != total)
                throw Error("calibrated model: covariate pool has " + std::to_string(pool->cols()) +
                            " columns but beta has " + std::to_string(total) + " entries");
            if (pool->rows() < 2) throw Error("calibrated model: covariate pool needs at least 2 rows");
            Matrix z = pool->rowwise() - pool->colwise().mean();
            for (Eigen::Index c = 0; c < z.cols(); ++c) {
                const double sd = std::sqrt(z.col(c).squaredNorm() / static_cast<double>(z.rows() - 1));
                if (sd > 0.0) z.col(c) /= sd;
            }
            s.covariate_pool = std::move(z);
        }
        if (dim < 1 || dim > total)
            throw Error("calibrated model: dim must be in 1.." + std::to_string(total));
        return s;
    }

    int arm_count() const { return 1 << K; }
    FactorSpace factor_space() const { return FactorSpace(K); }

    /// Constant shift mu_d.
    double mu(Arm d) const {
        const FactorSpace fs(K);
        if (model == Model::CalibratedLinear) {
            if (K == 1) return tau * fs.level(d, 1);
            double rest = 0.0;
            for (int k = 2; k <= K; ++k) rest += fs.level(d, k);
            return tau * (fs.level(d, 1) + rest / (K - 1));
        }
        // (-1,-1) -> 0, (-1,+1) -> tau/2, (+1,-1) -> tau, (+1,+1) -> 2 tau
        static constexpr double w[] = {0.0, 0.5, 1.0, 2.0};
        return tau * w[d - 1];
    }

    /// Slope g_d of models M3-M6 (and the sign multiplier of CalibratedLinear).
    double gamma(Arm d) const {
        if (model == Model::CalibratedLinear) return (K == 1 || FactorSpace(K).level(d, 2) == 1) ? 1.0 : -1.0;
        if (model == Model::M1 || model == Model::M2) return 1.0;
        static constexpr double g[] = {-1.0, 1.0, 0.5, 2.0};
        return g[d - 1];
    }

    /// m_d(x) for the scalar-covariate models.
    double conditional_shape(Arm d, double x) const {
        const double g = gamma(d);
        const double q = (x * x - 1.0) / 3.0;
        switch (model) {
            case Model::M1: return x;
            case Model::M2: return x + q;
            case Model::M3:
            case Model::M6: return g * x + q;
            case Model::M4: return std::sin(g * x);
            case Model::M5: return std::sin(g * x) + g * x / 10.0 + q;
            case Model::CalibratedLinear: break;
        }
        throw Error("conditional_shape: not a scalar-covariate model");
    }

    /// Noise scale s_d(x); for M6 this is (1 + d1 + d2) x^2 and may be negative.
    double noise_scale(Arm d, double x) const {
        if (model == Model::M6) {
            const FactorSpace fs(2);
            return (1.0 + fs.level(d, 1) + fs.level(d, 2)) * x * x;
        }
        return 1.0;
    }

    /// E[Y(d)]: conditional shapes all have mean zero under the covariate law.
    double arm_mean(Arm d) const { return mu(d); }
};

/// Draw J units' covariates and all potential outcomes. Covariates use
/// stream (seed, 0), noise stream (seed, 1), pool resampling stream (seed, 2).
inline PotentialOutcomes draw_potential_outcomes(const DgpSpec& dgp, std::size_t J, std::uint64_t seed) {
    const int A = dgp.arm_count();
    PotentialOutcomes po;
    po.ids = sequential_ids(J);
    po.outcomes.resize(static_cast<Eigen::Index>(J), A);
    RandomStream xs(seed, 0), es(seed, 1);
    if (dgp.model != Model::CalibratedLinear) {
        po.covariates.resize(static_cast<Eigen::Index>(J), 1);
        for (std::size_t i = 0; i < J; ++i) po.covariates(static_cast<Eigen::Index>(i), 0) = xs.normal();
        for (std::size_t i = 0; i < J; ++i) {
            const auto r = static_cast<Eigen::Index>(i);
            const double x = po.covariates(r, 0);
            const double e = es.normal() * std::sqrt(dgp.noise_var);
            for (Arm d = 1; d <= A; ++d)
                po.outcomes(r, d - 1) = dgp.mu(d) + dgp.conditional_shape(d, x) + dgp.noise_scale(d, x) * e;
        }
        return po;
    }
    const auto P = dgp.beta.size();
    Matrix full(static_cast<Eigen::Index>(J), P);
    if (dgp.covariate_pool) {
        RandomStream rs(seed, 2);
        const auto rows = static_cast<std::uint64_t>(dgp.covariate_pool->rows());
        for (std::size_t i = 0; i < J; ++i)
            full.row(static_cast<Eigen::Index>(i)) = dgp.covariate_pool->row(static_cast<Eigen::Index>(rs.below(rows)));
    } else {
        for (std::size_t i = 0; i < J; ++i)
            for (Eigen::Index c = 0; c < P; ++c) full(static_cast<Eigen::Index>(i), c) = xs.normal();
    }
    po.covariates = full.leftCols(dgp.dim);
    const Vector index = full * dgp.beta;
    for (std::size_t i = 0; i < J; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        const double e = es.normal() * std::sqrt(dgp.noise_var);
        for (Arm d = 1; d <= A; ++d) po.outcomes(r, d - 1) = dgp.mu(d) + dgp.gamma(d) * index(r) + e;
    }
    return po;
}

/// nu applied to the arm means E[Y(d)].
inline Vector true_delta(const DgpSpec& dgp, const Contrast& nu) {
    Vector g(dgp.arm_count());
    for (Arm d = 1; d <= dgp.arm_count(); ++d) g(d - 1) = dgp.arm_mean(d);
    if (nu.arms() != g.size()) throw Error("true_delta: contrast does not match the model's arm count");
    return nu.matrix * g;
}

// ---------------------------------------------------------------------------
// Designs

enum class DesignCode { BB, C, MP, MT, MT2, Large, RE };

struct DesignSpec {
    DesignCode code = DesignCode::MT;
    int strata = 0;  ///< Large-S
    int factor = 1;  ///< MP-k
    std::string label;
};

inline const char* valid_design_ids() { return "B-B, C, MP-B, MP-k, MP-<k>, MT, MT2, Large-<S>, RE"; }

/// Parse a design id. `default_factor` is used by the generic "MP-k".
inline DesignSpec parse_design(const std::string& id, int default_factor = 1) {
    DesignSpec d;
    d.label = id;
    auto positive_suffix = [&](std::size_t prefix) {
        const auto tail = std::string_view(id).substr(prefix);
        int v = 0;
        const auto [ptr, ec] = std::from_chars(tail.data(), tail.data() + tail.size(), v);
        if (tail.empty() || ec != std::errc() || ptr != tail.data() + tail.size() || v < 1)
            throw Error("unknown design '" + id + "'; valid ids: " + valid_design_ids());
        return v;
    };
    if (id == "B-B") d.code = DesignCode::BB;
    else if (id == "C") d.code = DesignCode::C;
    else if (id == "MT") d.code = DesignCode::MT;
    else if (id == "MT2") d.code = DesignCode::MT2;
    else if (id == "RE") d.code = DesignCode::RE;
    else if (id == "MP-B") d.code = DesignCode::MP, d.factor = 1;
    else if (id == "MP-k") d.code = DesignCode::MP, d.factor = default_factor;
    else if (id.rfind("MP-", 0) == 0) d.code = DesignCode::MP, d.factor = positive_suffix(3);
    else if (id.rfind("Large-", 0) == 0) d.code = DesignCode::Large, d.strata = positive_suffix(6);
    else throw Error("unknown design '" + id + "'; valid ids: " + valid_design_ids());
    return d;
}

/// Strata of equal size by rank of covariate `col`: the i-th smallest of J
/// units goes to stratum floor(i S / J).
inline std::vector<int> quantile_strata(const Matrix& x, int S, Eigen::Index col = 0) {
    const auto J = static_cast<std::size_t>(x.rows());
    std::vector<std::size_t> order(J);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
        return x(static_cast<Eigen::Index>(a), col) < x(static_cast<Eigen::Index>(b), col);
    });
    std::vector<int> labels(J);
    for (std::size_t r = 0; r < J; ++r) labels[order[r]] = static_cast<int>(r * static_cast<std::size_t>(S) / J);
    return labels;
}

/// Realized design for one replication.
struct DesignDraw {
    std::vector<Arm> arms;
    std::optional<BlockPartition> blocks;
    std::vector<int> strata;
    MeanBasis basis = MeanBasis::ArmCount;
    std::optional<std::uint64_t> redraws;
};

/// Blocks of size 2^levels: ordering on the covariate when it is scalar,
/// recursive pairing otherwise.
inline BlockPartition design_blocks(const Sample& s, int levels) {
    if (s.dim() == 1) return block_by_ordering(s, std::size_t{1} << levels, 0);
    return block_recursive_pairing(s, levels);
}

inline DesignDraw draw_design(const DesignSpec& design, const Matrix& covariates, int K, std::uint64_t seed,
                              std::uint64_t max_redraws = 100000) {
    const auto J = static_cast<std::size_t>(covariates.rows());
    const int A = 1 << K;
    const Sample s(sequential_ids(J), covariates, A);
    DesignDraw out;
    switch (design.code) {
        case DesignCode::BB: out.arms = assign_bernoulli_factors(J, K, seed).arms; break;
        case DesignCode::C:
            out.strata.assign(J, 0);
            out.arms = assign_stratified(out.strata, A, seed).arms;
            break;
        case DesignCode::Large:
            out.strata = quantile_strata(covariates, design.strata);
            out.arms = assign_stratified(out.strata, A, seed).arms;
            break;
        case DesignCode::MT:
            out.blocks = design_blocks(s, K);
            out.arms = assign_matched_tuples(*out.blocks, A, seed).arms;
            break;
        case DesignCode::MT2:
            out.blocks = design_blocks(s, K + 1);
            out.arms = assign_replicate_tuples(*out.blocks, A, seed).arms;
            break;
        case DesignCode::MP:
            out.blocks = design_blocks(s, 1);
            out.arms = assign_factor_specific_mp(*out.blocks, design.factor, K, seed).arms;
            out.basis = MeanBasis::Nominal;
            break;
        case DesignCode::RE: {
            auto plan = assign_rerandomized(covariates, K, seed, max_redraws);
            out.arms = std::move(plan.arms);
            out.redraws = plan.redraws;
            break;
        }
    }
    return out;
}

/// Whether a design has a test in the size/power study.
inline bool design_has_test(const DesignSpec& d) { return d.code != DesignCode::MP && d.code != DesignCode::RE; }

/// Variance estimate appropriate to the design.
inline VarianceReport design_variance(const DesignSpec& design, const DesignDraw& draw, const Sample& s,
                                      const Contrast& nu) {
    switch (design.code) {
        case DesignCode::MT: return v_hat_adjusted(s, *draw.blocks, nu, false);
        case DesignCode::MT2: return v_hat_adjusted(s, *draw.blocks, nu, true);
        case DesignCode::C:
        case DesignCode::Large: return v_hat_strat_plugin(s, draw.strata, nu);
        case DesignCode::BB: return v_hat_two_sample(s, nu);
        default: break;
    }
    throw Error("design " + design.label + " has no variance estimator");
}

// ---------------------------------------------------------------------------
// Analytic asymptotic variances

struct OracleVariance {
    Matrix v1, v2;                ///< matched-tuples components (|D| x |D|)
    std::optional<Matrix> vh1, vh2;  ///< stratified-design components
    std::optional<double> xi0, xi1;  ///< factor-specific matched pairs extra terms
    Matrix v_nu;                  ///< asymptotic variance of sqrt(n)(nu G - Delta) under the design
};

namespace detail {

/// Moments of the scalar-covariate models over X restricted to (a, b].
struct RegionMoments {
    double prob = 0.0;
    Vector mean;    ///< E[G_d(X) | region]
    Matrix cross;   ///< E[G_d(X) G_d'(X) | region]
    Vector noise;   ///< E[Var(Y(d) | X) | region]
};

inline double integrate_normal(const std::function<double(double)>& f, double a, double b) {
    using boost::math::quadrature::gauss_kronrod;
    auto g = [&](double x) { return f(x) * normal_pdf(x); };
    return gauss_kronrod<double, 61>::integrate(g, a, b, 20, 1e-13);
}

inline RegionMoments scalar_region_moments(const DgpSpec& dgp, double a, double b) {
    constexpr double cap = 14.0;
    a = std::max(a, -cap);
    b = std::min(b, cap);
    const int A = dgp.arm_count();
    RegionMoments m;
    m.prob = integrate_normal([](double) { return 1.0; }, a, b);
    m.mean.resize(A);
    m.noise.resize(A);
    m.cross.resize(A, A);
    auto cond = [&](Arm d, double x) { return dgp.mu(d) + dgp.conditional_shape(d, x); };
    for (Arm d = 1; d <= A; ++d) {
        m.mean(d - 1) = integrate_normal([&](double x) { return cond(d, x); }, a, b) / m.prob;
        m.noise(d - 1) = dgp.noise_var *
                         integrate_normal([&](double x) { return std::pow(dgp.noise_scale(d, x), 2); }, a, b) / m.prob;
        for (Arm e = d; e <= A; ++e) {
            const double v = integrate_normal([&](double x) { return cond(d, x) * cond(e, x); }, a, b) / m.prob;
            m.cross(d - 1, e - 1) = m.cross(e - 1, d - 1) = v;
        }
    }
    return m;
}

/// Same moments for the calibrated model with synthetic covariates, where
/// the region restricts the first covariate to (a, b]. Closed form from the
/// truncated normal.
inline RegionMoments calibrated_region_moments(const DgpSpec& dgp, double a, double b, bool condition_on_observed) {
    if (dgp.covariate_pool) throw Error("oracle: analytic moments need synthetic N(0,1) covariates, not a pool");
    const int A = dgp.arm_count();
    const double pa = std::isinf(a) ? 0.0 : normal_cdf(a), pb = std::isinf(b) ? 1.0 : normal_cdf(b);
    const double fa = std::isinf(a) ? 0.0 : normal_pdf(a), fb = std::isinf(b) ? 0.0 : normal_pdf(b);
    const double afa = std::isinf(a) ? 0.0 : a * fa, bfb = std::isinf(b) ? 0.0 : b * fb;
    RegionMoments m;
    m.prob = pb - pa;
    const double m1 = (fa - fb) / m.prob;              // E[X1 | region]
    const double m2 = 1.0 + (afa - bfb) / m.prob;      // E[X1^2 | region]
    const double b1 = dgp.beta(0);
    const double rest_all = dgp.beta.tail(dgp.beta.size() - 1).squaredNorm();
    const double rest_obs = dgp.beta.segment(1, dgp.dim - 1).squaredNorm();
    // The conditioning set is either the observed covariates (matched designs)
    // or only the stratum of X1 (stratified designs).
    const double explained = condition_on_observed ? rest_obs : 0.0;
    m.mean.resize(A);
    m.noise.resize(A);
    m.cross.resize(A, A);
    for (Arm d = 1; d <= A; ++d) {
        const double gd = dgp.gamma(d);
        m.mean(d - 1) = dgp.mu(d) + gd * b1 * m1;
        m.noise(d - 1) = dgp.noise_var + (rest_all - explained);
        for (Arm e = 1; e <= A; ++e) {
            const double ge = dgp.gamma(e);
            m.cross(d - 1, e - 1) = dgp.mu(d) * dgp.mu(e) + (dgp.mu(d) * ge + dgp.mu(e) * gd) * b1 * m1 +
                                    gd * ge * (b1 * b1 * m2 + explained);
        }
    }
    return m;
}

inline RegionMoments region_moments(const DgpSpec& dgp, double a, double b, bool condition_on_observed) {
    if (dgp.model == Model::CalibratedLinear) return calibrated_region_moments(dgp, a, b, condition_on_observed);
    return scalar_region_moments(dgp, a, b);
}

}  // namespace detail

/// Asymptotic variance of sqrt(n)(nu G_hat - Delta) for a design.
///   matched tuples (MT, MT2): V1 = diag E[Var(Y(d)|X)], V2 = Cov(G_d(X), G_d'(X)) / |D|
///   stratified (C, Large-S, B-B): Vh1 = diag E[Var(Y(d)|h)], Vh2 = Cov(E[Y(d)|h], E[Y(d')|h]) / |D|
///   factor-specific pairs (MP-k, main effect of k only): nu V nu' + xi1 + xi0
/// Large-S strata are population quantile bins of the first covariate.
inline OracleVariance oracle_variance(const DgpSpec& dgp, const DesignSpec& design, const Contrast& nu) {
    const int A = dgp.arm_count();
    if (nu.arms() != A) throw Error("oracle_variance: contrast does not match the model's arm count");
    if (design.code == DesignCode::RE) throw Error("oracle_variance: no analytic variance for design RE");

    const double inf = std::numeric_limits<double>::infinity();
    const auto whole = detail::region_moments(dgp, -inf, inf, true);
    OracleVariance o;
    o.v1 = whole.noise.asDiagonal();
    const Matrix cov = whole.cross - whole.mean * whole.mean.transpose();
    o.v2 = cov / A;
    o.v_nu = nu.matrix * (o.v1 + o.v2) * nu.matrix.transpose();

    switch (design.code) {
        case DesignCode::MT:
        case DesignCode::MT2: break;
        case DesignCode::BB:
        case DesignCode::C:
        case DesignCode::Large: {
            const int S = design.code == DesignCode::Large ? design.strata : 1;
            Matrix vh1 = Matrix::Zero(A, A), vh2 = Matrix::Zero(A, A);
            for (int s = 0; s < S; ++s) {
                const double a = s == 0 ? -inf : normal_quantile(static_cast<double>(s) / S);
                const double b = s == S - 1 ? inf : normal_quantile(static_cast<double>(s + 1) / S);
                const auto r = detail::region_moments(dgp, a, b, false);
                const Vector within = r.noise + (r.cross.diagonal() - r.mean.cwiseProduct(r.mean));
                vh1.diagonal() += r.prob * within;
                const Vector dev = r.mean - whole.mean;
                vh2 += r.prob * dev * dev.transpose() / A;
            }
            o.v_nu = nu.matrix * (vh1 + vh2) * nu.matrix.transpose();
            o.vh1 = std::move(vh1);
            o.vh2 = std::move(vh2);
            break;
        }
        case DesignCode::MP: {
            const FactorSpace fs(dgp.K);
            const auto main = main_effect_contrast(design.factor, fs);
            if (nu.rows() != 1 || !(nu.matrix.cwiseAbs().maxCoeff() > 0.0) ||
                !nu.matrix.isApprox(main.matrix * (nu.matrix(0, 0) / main.matrix(0, 0))))
                throw Error("oracle_variance: design " + design.label + " only has a variance for the main effect of factor " +
                            std::to_string(design.factor));
            const double scale = nu.matrix(0, 0) / main.matrix(0, 0);
            // xi_side = sum_{d in side} E[(G_d - avg_side G)^2] = sum E[G_d^2] - |side| E[avg^2]
            auto xi = [&](int level) {
                std::vector<int> side;
                for (Arm d = 1; d <= A; ++d)
                    if (fs.level(d, design.factor) == level) side.push_back(d - 1);
                const double h = static_cast<double>(side.size());
                double sum_sq = 0.0, avg_sq = 0.0;
                for (int d : side) {
                    sum_sq += whole.cross(d, d);
                    for (int e : side) avg_sq += whole.cross(d, e);
                }
                return sum_sq - avg_sq / h;
            };
            o.xi1 = xi(1);
            o.xi0 = xi(-1);
            o.v_nu = o.v_nu + Matrix::Constant(1, 1, scale * scale * (*o.xi1 + *o.xi0));
            break;
        }
        case DesignCode::RE: break;
    }
    return o;
}

// ---------------------------------------------------------------------------
// Monte Carlo studies

struct StudyConfig {
    DgpSpec dgp;                    ///< tau is overridden by tau_null / tau_alt
    double tau_null = 0.0;
    double tau_alt = 0.2;
    std::vector<std::string> designs{"B-B", "C", "MP-B", "MT", "Large-2", "Large-4", "RE"};
    std::vector<std::string> parameters{"main:1", "main:2", "inter:1,2", "cond:1|2=+1", "cond:1|2=-1"};
    bool rescale = true;            ///< 2^-(K-1) on main and interaction contrasts
    std::size_t n = 1000;           ///< total number of units
    std::size_t R = 2000;
    std::uint64_t seed = 1;
    double alpha = 0.05;
    unsigned threads = 1;
    int factor = 1;                 ///< k for the generic "MP-k" id
    std::uint64_t max_redraws = 100000;
};

struct StudyCell {
    std::string design;
    std::string parameter;
    double truth = 0.0;
    double mse = 0.0;
    double mse_se = std::numeric_limits<double>::quiet_NaN();
    double bias = 0.0;
    double mse_ratio = std::numeric_limits<double>::quiet_NaN();  ///< vs MT
    double rejection_null = std::numeric_limits<double>::quiet_NaN();
    double rejection_alt = std::numeric_limits<double>::quiet_NaN();
    double mean_ci_length = std::numeric_limits<double>::quiet_NaN();
    std::size_t failures = 0;  ///< replications whose test could not be formed
};

struct StudyReport {
    std::size_t replications = 0;
    std::vector<StudyCell> cells;
    std::vector<std::string> warnings;

    const StudyCell& cell(const std::string& design, const std::string& parameter) const {
        for (const auto& c : cells)
            if (c.design == design && c.parameter == parameter) return c;
        throw Error("study report: no cell for design " + design + ", parameter " + parameter);
    }
};

namespace detail {

struct ResolvedStudy {
    std::vector<DesignSpec> designs;
    std::vector<Contrast> params;
    Contrast stacked;
};

inline ResolvedStudy resolve_study(const StudyConfig& cfg) {
    const int K = cfg.dgp.K;
    const int A = 1 << K;
    if (cfg.R < 1) throw Error("study: R must be at least 1");
    if (cfg.designs.empty()) throw Error("study: no designs");
    if (cfg.parameters.empty()) throw Error("study: no parameters");
    if (!(cfg.alpha > 0.0 && cfg.alpha < 1.0)) throw Error("study: alpha must lie in (0, 1)");
    ResolvedStudy rs;
    for (const auto& id : cfg.designs) {
        auto d = parse_design(id, cfg.factor);
        std::size_t unit = static_cast<std::size_t>(A);
        if (d.code == DesignCode::MT2) unit *= 2;
        if (d.code == DesignCode::Large) unit *= static_cast<std::size_t>(d.strata);
        if (d.code == DesignCode::MP && d.factor > K)
            throw Error("study: design " + id + " names factor " + std::to_string(d.factor) + " but K = " + std::to_string(K));
        if (cfg.n == 0 || cfg.n % unit != 0)
            throw Error("study: n = " + std::to_string(cfg.n) + " is not a multiple of " + std::to_string(unit) +
                        " as design " + id + " requires");
        for (const auto& prev : rs.designs)
            if (prev.label == id) throw Error("study: design " + id + " listed twice");
        rs.designs.push_back(std::move(d));
    }
    for (const auto& p : cfg.parameters) {
        auto c = parse_contrast(p, A, cfg.rescale);
        if (c.rows() != 1) throw Error("study: parameter '" + p + "' must be a single contrast row");
        c.label = p;
        rs.params.push_back(std::move(c));
    }
    rs.stacked = stack_contrasts(rs.params);
    return rs;
}

/// Per replication, per design: estimates and test outcomes for each parameter.
struct RepResult {
    // indexed [design][parameter]
    std::vector<std::vector<double>> est_null, est_alt;
    std::vector<std::vector<signed char>> rej_null, rej_alt;  // -1 = test unavailable/failed
    std::vector<std::vector<double>> ci_null;
};

inline RepResult run_replication(const StudyConfig& cfg, const ResolvedStudy& rs, std::size_t r,
                                 const std::vector<double>& taus, bool with_tests) {
    const int K = cfg.dgp.K;
    const std::size_t D = rs.designs.size(), P = rs.params.size();
    RepResult out;
    out.est_null.assign(D, std::vector<double>(P, 0.0));
    out.est_alt = out.est_null;
    out.ci_null = out.est_null;
    out.rej_null.assign(D, std::vector<signed char>(P, -1));
    out.rej_alt = out.rej_null;

    const std::uint64_t po_seed = derive_seed(cfg.seed, "po", r);
    std::vector<PotentialOutcomes> pos;
    for (double tau : taus) {
        DgpSpec dgp = cfg.dgp;
        dgp.tau = tau;
        pos.push_back(draw_potential_outcomes(dgp, cfg.n, po_seed));
    }
    for (std::size_t di = 0; di < D; ++di) {
        const auto& design = rs.designs[di];
        const auto draw = draw_design(design, pos[0].covariates, K, derive_seed(cfg.seed, design.label, r), cfg.max_redraws);
        for (std::size_t t = 0; t < taus.size(); ++t) {
            const Sample s = reveal(pos[t], draw.arms);
            const auto g = gamma_hat(s, draw.basis);
            const Vector est = rs.stacked.matrix * g.values;
            auto& est_row = t == 0 ? out.est_null[di] : out.est_alt[di];
            for (std::size_t p = 0; p < P; ++p) est_row[p] = est(static_cast<Eigen::Index>(p));
            if (!with_tests || !design_has_test(design)) continue;
            auto& rej_row = t == 0 ? out.rej_null[di] : out.rej_alt[di];
            try {
                const auto rep = design_variance(design, draw, s, rs.stacked);
                for (std::size_t p = 0; p < P; ++p) {
                    const auto pi = static_cast<Eigen::Index>(p);
                    const double v = rep.v_contrast(pi, pi);
                    if (!(v > 0.0)) continue;
                    const auto test = t_test(est(pi), v, g.n, 0.0, cfg.alpha);
                    rej_row[p] = test.reject ? 1 : 0;
                    if (t == 0) {
                        const auto [lo, hi] = confidence_interval(est(pi), v, g.n, cfg.alpha);
                        out.ci_null[di][p] = hi - lo;
                    }
                }
            } catch (const Error&) {
                // leave the row marked unavailable; counted as failures
            }
        }
    }
    return out;
}

/// Run fn(r) for r in [0, R) on `threads` workers; results land in slot r.
template <typename T, typename Fn>
std::vector<T> parallel_replications(std::size_t R, unsigned threads, Fn fn) {
    std::vector<T> results(R);
    const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(R)));
    if (workers == 1) {
        for (std::size_t r = 0; r < R; ++r) results[r] = fn(r);
        return results;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (std::size_t r = next++; r < R; r = next++) {
                try {
                    results[r] = fn(r);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
    return results;
}

inline StudyReport summarize(const StudyConfig& cfg, const ResolvedStudy& rs, const std::vector<RepResult>& reps,
                             bool with_tests, bool with_alt) {
    StudyReport report;
    report.replications = reps.size();
    const auto R = static_cast<double>(reps.size());
    DgpSpec null_dgp = cfg.dgp;
    null_dgp.tau = cfg.tau_null;
    const Vector truth = true_delta(null_dgp, rs.stacked);

    std::optional<std::size_t> mt_index;
    for (std::size_t di = 0; di < rs.designs.size(); ++di)
        if (rs.designs[di].code == DesignCode::MT) mt_index = di;

    for (std::size_t di = 0; di < rs.designs.size(); ++di) {
        for (std::size_t p = 0; p < rs.params.size(); ++p) {
            StudyCell c;
            c.design = rs.designs[di].label;
            c.parameter = rs.params[p].label;
            c.truth = truth(static_cast<Eigen::Index>(p));
            double sse = 0.0, sse2 = 0.0, se = 0.0;
            for (const auto& rep : reps) {
                const double e = rep.est_null[di][p] - c.truth;
                sse += e * e;
                sse2 += e * e * e * e;
                se += e;
            }
            c.mse = sse / R;
            c.bias = se / R;
            if (reps.size() > 1) c.mse_se = std::sqrt(std::max(0.0, (sse2 / R - c.mse * c.mse) / (R - 1.0)));
            if (with_tests && design_has_test(rs.designs[di])) {
                std::size_t ok_null = 0, rej_null = 0, ok_alt = 0, rej_alt = 0;
                double ci = 0.0;
                for (const auto& rep : reps) {
                    if (rep.rej_null[di][p] >= 0) {
                        ++ok_null;
                        rej_null += static_cast<std::size_t>(rep.rej_null[di][p]);
                        ci += rep.ci_null[di][p];
                    }
                    if (with_alt && rep.rej_alt[di][p] >= 0) {
                        ++ok_alt;
                        rej_alt += static_cast<std::size_t>(rep.rej_alt[di][p]);
                    }
                }
                c.failures = reps.size() - ok_null + (with_alt ? reps.size() - ok_alt : 0);
                if (ok_null) {
                    c.rejection_null = static_cast<double>(rej_null) / static_cast<double>(ok_null);
                    c.mean_ci_length = ci / static_cast<double>(ok_null);
                }
                if (with_alt && ok_alt) c.rejection_alt = static_cast<double>(rej_alt) / static_cast<double>(ok_alt);
            }
            report.cells.push_back(std::move(c));
        }
    }
    if (mt_index) {
        const std::size_t P = rs.params.size();
        for (std::size_t di = 0; di < rs.designs.size(); ++di)
            for (std::size_t p = 0; p < P; ++p) {
                auto& c = report.cells[di * P + p];
                const double base = report.cells[*mt_index * P + p].mse;
                c.mse_ratio = (di == *mt_index) ? 1.0 : c.mse / base;
            }
    } else {
        report.warnings.push_back("MT is not among the designs; MSE ratios are not reported");
    }
    if (with_tests)
        for (const auto& d : rs.designs)
            if (!design_has_test(d)) report.warnings.push_back("design " + d.label + " has no test; rejection rates omitted");
    for (const auto& c : report.cells)
        if (c.failures) {
            report.warnings.push_back("design " + c.design + ", parameter " + c.parameter + ": " +
                                      std::to_string(c.failures) + " replications without a usable variance");
        }
    if (reps.size() == 1) report.warnings.push_back("single replication: MSE standard errors are undefined");
    return report;
}

}  // namespace detail

/// MSE of each design's estimator at tau_null, and its ratio to MT.
inline StudyReport run_mse_study(const StudyConfig& cfg) {
    const auto rs = detail::resolve_study(cfg);
    const std::vector<double> taus{cfg.tau_null};
    auto reps = detail::parallel_replications<detail::RepResult>(
        cfg.R, cfg.threads, [&](std::size_t r) { return detail::run_replication(cfg, rs, r, taus, false); });
    return detail::summarize(cfg, rs, reps, false, false);
}

/// Rejection rates of H0: Delta = 0 at tau_null (size) and tau_alt (power),
/// using each design's own test; MSE columns refer to tau_null.
inline StudyReport run_size_power_study(const StudyConfig& cfg) {
    const auto rs = detail::resolve_study(cfg);
    const std::vector<double> taus{cfg.tau_null, cfg.tau_alt};
    auto reps = detail::parallel_replications<detail::RepResult>(
        cfg.R, cfg.threads, [&](std::size_t r) { return detail::run_replication(cfg, rs, r, taus, true); });
    return detail::summarize(cfg, rs, reps, true, true);
}

struct PowerPoint {
    double tau = 0.0;
    std::string design;
    std::string parameter;
    double rejection = 0.0;
};

/// Raw rejection frequency for each tau in the grid (tau_null is set to each
/// grid value in turn, so the same replication seeds are used throughout).
inline std::vector<PowerPoint> run_power_curve(const StudyConfig& cfg, const std::vector<double>& tau_grid) {
    std::vector<PowerPoint> out;
    const auto rs = detail::resolve_study(cfg);
    for (double tau : tau_grid) {
        StudyConfig c = cfg;
        c.tau_null = tau;
        const std::vector<double> taus{tau};
        auto reps = detail::parallel_replications<detail::RepResult>(
            c.R, c.threads, [&](std::size_t r) { return detail::run_replication(c, rs, r, taus, true); });
        const auto report = detail::summarize(c, rs, reps, true, false);
        for (const auto& cell : report.cells)
            if (!std::isnan(cell.rejection_null)) out.push_back({tau, cell.design, cell.parameter, cell.rejection_null});
    }
    return out;
}

}  // namespace tupleworks
