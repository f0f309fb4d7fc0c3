#pragma once

// Treatment assignment for matched tuples, replicate tuples, stratified,
// Bernoulli factorial, factor-specific matched pairs and re-randomized
// designs. All draws come from counter-based streams (see rng.hpp), so a
// plan is a pure function of (inputs, seed).

#include "tupleworks/blocking.hpp"
#include "tupleworks/core.hpp"
#include "tupleworks/distributions.hpp"
#include "tupleworks/rng.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdint>
#include <bit>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace tupleworks {

enum class DesignKind { MatchedTuples, ReplicateTuples, Stratified, Bernoulli, FactorSpecificMP, Rerandomized };

inline std::string to_string(DesignKind k) {
    switch (k) {
        case DesignKind::MatchedTuples: return "matched_tuples";
        case DesignKind::ReplicateTuples: return "replicate_tuples";
        case DesignKind::Stratified: return "stratified";
        case DesignKind::Bernoulli: return "bernoulli";
        case DesignKind::FactorSpecificMP: return "factor_specific_mp";
        case DesignKind::Rerandomized: return "rerandomized";
    }
    return "unknown";
}

struct AssignmentPlan {
    DesignKind design_kind = DesignKind::MatchedTuples;
    std::vector<Arm> arms;
    int num_arms = 0;
    std::uint64_t seed = 0;

    std::vector<int> strata;                 ///< stratum label per unit (Stratified, Rerandomized)
    std::optional<int> factors;              ///< K for factorial designs
    std::optional<int> focus_factor;         ///< k for FactorSpecificMP
    std::optional<double> main_threshold;    ///< Rerandomized acceptance cut-offs
    std::optional<double> interaction_threshold;
    std::optional<std::uint64_t> redraws;    ///< draws taken before acceptance
};

/// One uniform permutation of 1..num_arms per block; block j uses stream (seed, j).
inline AssignmentPlan assign_matched_tuples(const BlockPartition& partition, int num_arms, std::uint64_t seed) {
    if (num_arms < 1 || partition.tuple_size() != static_cast<std::size_t>(num_arms))
        throw Error("assign_matched_tuples: tuple size " + std::to_string(partition.tuple_size()) +
                    " does not equal number of arms " + std::to_string(num_arms));
    AssignmentPlan plan{DesignKind::MatchedTuples, std::vector<Arm>(partition.unit_count()), num_arms, seed};
    std::vector<Arm> perm(static_cast<std::size_t>(num_arms));
    for (std::size_t j = 0; j < partition.num_blocks(); ++j) {
        std::iota(perm.begin(), perm.end(), 1);
        RandomStream rng(seed, j);
        rng.shuffle(perm.begin(), perm.end());
        const auto& b = partition.block(j);
        for (std::size_t r = 0; r < b.size(); ++r) plan.arms[b[r]] = perm[r];
    }
    return plan;
}

/// Blocks of size 2*num_arms; each block is a uniform shuffle of (1,1,2,2,...).
inline AssignmentPlan assign_replicate_tuples(const BlockPartition& partition, int num_arms, std::uint64_t seed) {
    if (num_arms < 1 || partition.tuple_size() != 2 * static_cast<std::size_t>(num_arms))
        throw Error("assign_replicate_tuples: tuple size " + std::to_string(partition.tuple_size()) +
                    " does not equal twice the number of arms " + std::to_string(num_arms));
    AssignmentPlan plan{DesignKind::ReplicateTuples, std::vector<Arm>(partition.unit_count()), num_arms, seed};
    std::vector<Arm> labels(partition.tuple_size());
    for (std::size_t j = 0; j < partition.num_blocks(); ++j) {
        for (std::size_t r = 0; r < labels.size(); ++r) labels[r] = static_cast<Arm>(r / 2) + 1;
        RandomStream rng(seed, j);
        rng.shuffle(labels.begin(), labels.end());
        const auto& b = partition.block(j);
        for (std::size_t r = 0; r < b.size(); ++r) plan.arms[b[r]] = labels[r];
    }
    return plan;
}

namespace detail {

/// One complete randomization of m units over num_arms arms into `slots`:
/// floor(m/A) of each arm plus the m mod A leftover slots on distinct arms
/// chosen uniformly, then a uniform shuffle.
inline void complete_randomization(RandomStream& rng, std::size_t m, int num_arms, std::vector<Arm>& arm_order,
                                   std::vector<Arm>& slots) {
    const auto A = static_cast<std::size_t>(num_arms);
    arm_order.resize(A);
    std::iota(arm_order.begin(), arm_order.end(), 1);
    rng.shuffle(arm_order.begin(), arm_order.end());
    slots.clear();
    for (Arm a = 1; a <= num_arms; ++a) slots.insert(slots.end(), m / A, a);
    slots.insert(slots.end(), arm_order.begin(), arm_order.begin() + static_cast<std::ptrdiff_t>(m % A));
    rng.shuffle(slots.begin(), slots.end());
}

}  // namespace detail

/// Complete randomization within each stratum. A stratum of size m gets
/// floor(m/A) units per arm; the m mod A leftover slots go to distinct arms
/// drawn uniformly without replacement. Strata are visited in label order and
/// the s-th stratum uses stream (seed, s).
inline AssignmentPlan assign_stratified(std::span<const int> strata_labels, int num_arms, std::uint64_t seed) {
    if (num_arms < 1) throw Error("assign_stratified: number of arms must be positive");
    AssignmentPlan plan{DesignKind::Stratified, std::vector<Arm>(strata_labels.size()), num_arms, seed};
    plan.strata.assign(strata_labels.begin(), strata_labels.end());

    std::map<int, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < strata_labels.size(); ++i) strata[strata_labels[i]].push_back(i);

    std::uint64_t s = 0;
    std::vector<Arm> arm_order, slots;
    for (const auto& [label, members] : strata) {
        RandomStream rng(seed, s++);
        detail::complete_randomization(rng, members.size(), num_arms, arm_order, slots);
        for (std::size_t r = 0; r < members.size(); ++r) plan.arms[members[r]] = slots[r];
    }
    return plan;
}

/// Every factor level an independent fair +-1 per unit; unit i uses stream (seed, i).
inline AssignmentPlan assign_bernoulli_factors(std::size_t n_units, int K, std::uint64_t seed) {
    if (K < 1) throw Error("assign_bernoulli_factors: K must be at least 1");
    const FactorSpace fs(K);
    AssignmentPlan plan{DesignKind::Bernoulli, std::vector<Arm>(n_units), fs.arm_count(), seed};
    plan.factors = K;
    std::vector<int> lv(static_cast<std::size_t>(K));
    for (std::size_t i = 0; i < n_units; ++i) {
        RandomStream rng(seed, i);
        for (auto& l : lv) l = rng.coin() ? 1 : -1;
        plan.arms[i] = fs.arm_of_levels(lv);
    }
    return plan;
}

/// Matched pairs on factor k; all other factors are independent fair coins
/// per unit. Pair j uses stream (seed, j): first the factor-k flip, then the
/// remaining factors for each member in block order.
inline AssignmentPlan assign_factor_specific_mp(const BlockPartition& pairs, int k, int K, std::uint64_t seed) {
    if (pairs.tuple_size() != 2) throw Error("assign_factor_specific_mp: blocks must be pairs");
    if (K < 1) throw Error("assign_factor_specific_mp: K must be at least 1");
    if (k < 1 || k > K)
        throw Error("assign_factor_specific_mp: factor " + std::to_string(k) + " outside 1.." + std::to_string(K));
    const FactorSpace fs(K);
    AssignmentPlan plan{DesignKind::FactorSpecificMP, std::vector<Arm>(pairs.unit_count()), fs.arm_count(), seed};
    plan.factors = K;
    plan.focus_factor = k;
    std::vector<int> lv(static_cast<std::size_t>(K));
    for (std::size_t j = 0; j < pairs.num_blocks(); ++j) {
        RandomStream rng(seed, j);
        const bool first_high = rng.coin();
        const auto& b = pairs.block(j);
        for (std::size_t r = 0; r < 2; ++r) {
            for (int f = 1; f <= K; ++f) {
                auto& l = lv[static_cast<std::size_t>(f - 1)];
                if (f == k)
                    l = ((r == 0) == first_high) ? 1 : -1;
                else
                    l = rng.coin() ? 1 : -1;
            }
            plan.arms[b[r]] = fs.arm_of_levels(lv);
        }
    }
    return plan;
}

namespace detail {

/// Pseudo-inverse of a symmetric positive semi-definite matrix.
inline Matrix pinv_symmetric(const Matrix& a, double rel_tol = 1e-12) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(a);
    const Vector& ev = eig.eigenvalues();
    const double cut = std::max(ev.cwiseAbs().maxCoeff() * rel_tol, 1e-300);
    const Vector inv = ev.unaryExpr([cut](double v) { return std::fabs(v) > cut ? 1.0 / v : 0.0; });
    return eig.eigenvectors() * inv.asDiagonal() * eig.eigenvectors().transpose();
}

inline Matrix sample_covariance(const Matrix& x) {
    const auto n = x.rows();
    const Matrix c = x.rowwise() - x.colwise().mean();
    return c.transpose() * c / static_cast<double>(n - 1);
}

}  // namespace detail

/// Mahalanobis balance between the units whose arm carries +1 in
/// `contrast_row` and those carrying -1:
///   M = d' [S (1/n_+ + 1/n_-)]^+ d,  d = mean_+ - mean_-,
/// with S the sample covariance of all units (pseudo-inverse if singular),
/// so M is approximately chi-square(p) under complete randomization.
inline double mahalanobis_balance(const Matrix& covariates, std::span<const Arm> arms,
                                  std::span<const double> contrast_row) {
    if (static_cast<std::size_t>(covariates.rows()) != arms.size())
        throw Error("mahalanobis_balance: covariates and arms differ in length");
    Eigen::RowVectorXd plus = Eigen::RowVectorXd::Zero(covariates.cols());
    Eigen::RowVectorXd minus = plus;
    std::size_t n_plus = 0, n_minus = 0;
    for (std::size_t i = 0; i < arms.size(); ++i) {
        const auto a = static_cast<std::size_t>(arms[i] - 1);
        if (arms[i] < 1 || a >= contrast_row.size()) throw Error("mahalanobis_balance: arm out of range");
        if (contrast_row[a] > 0) {
            plus += covariates.row(static_cast<Eigen::Index>(i));
            ++n_plus;
        } else if (contrast_row[a] < 0) {
            minus += covariates.row(static_cast<Eigen::Index>(i));
            ++n_minus;
        }
    }
    if (n_plus < 2 || n_minus < 2) throw Error("mahalanobis_balance: fewer than 2 units on one side");
    const Vector diff = (plus / static_cast<double>(n_plus) - minus / static_cast<double>(n_minus)).transpose();
    const double scale = 1.0 / static_cast<double>(n_plus) + 1.0 / static_cast<double>(n_minus);
    const Matrix s_inv = detail::pinv_symmetric(detail::sample_covariance(covariates));
    return diff.dot(s_inv * diff) / scale;
}

/// All interaction generating vectors for K factors (subsets of size >= 2),
/// followed by nothing else; main effects are handled separately.
inline std::vector<std::vector<double>> interaction_generators(const FactorSpace& fs) {
    std::vector<std::vector<double>> out;
    const int K = fs.factors();
    for (unsigned mask = 1; mask < (1u << K); ++mask) {
        if (std::popcount(mask) < 2) continue;
        std::vector<double> row(static_cast<std::size_t>(fs.arm_count()));
        for (Arm d = 1; d <= fs.arm_count(); ++d) {
            int prod = 1;
            for (int k = 1; k <= K; ++k)
                if (mask & (1u << (k - 1))) prod *= fs.level(d, k);
            row[static_cast<std::size_t>(d - 1)] = prod;
        }
        out.push_back(std::move(row));
    }
    return out;
}

/// Redraw complete randomization until every main-effect balance statistic is
/// at most the chi2_p quantile at 0.01^(1/K) and every interaction statistic at
/// most the chi2_p quantile at 0.01^(1/L), L = 2^K - K - 1. Draw t uses seed
/// derive_seed(seed, "redraw", t).
inline AssignmentPlan assign_rerandomized(const Matrix& covariates, int K, std::uint64_t seed,
                                          std::uint64_t max_redraws = 100000) {
    const FactorSpace fs(K);
    const auto n = static_cast<std::size_t>(covariates.rows());
    const auto A = static_cast<std::size_t>(fs.arm_count());
    if (n == 0 || n % A != 0)
        throw Error("assign_rerandomized: " + std::to_string(n) + " units is not a positive multiple of 2^K = " +
                    std::to_string(A));
    const auto p = static_cast<double>(covariates.cols());
    const int L = fs.arm_count() - K - 1;
    const double main_cut = chi2_quantile(std::pow(0.01, 1.0 / K), p);
    const std::optional<double> inter_cut =
        L > 0 ? std::optional<double>(chi2_quantile(std::pow(0.01, 1.0 / L), p)) : std::nullopt;

    std::vector<std::vector<double>> rows;
    std::vector<std::string> names;
    for (int k = 1; k <= K; ++k) {
        std::vector<double> r(A);
        for (Arm d = 1; d <= fs.arm_count(); ++d) r[static_cast<std::size_t>(d - 1)] = fs.level(d, k);
        rows.push_back(std::move(r));
        names.push_back("main effect of factor " + std::to_string(k));
    }
    const auto inter = interaction_generators(fs);
    for (std::size_t r = 0; r < inter.size(); ++r) {
        rows.push_back(inter[r]);
        names.push_back("interaction " + std::to_string(r + 1));
    }

    const Matrix s_inv = detail::pinv_symmetric(detail::sample_covariance(covariates));
    // equal arm counts, so each side holds n/2 units
    const double scale = 4.0 / static_cast<double>(n);
    std::vector<Arm> arm_order, slots;
    std::vector<std::uint64_t> failures(rows.size(), 0);
    Matrix arm_sums(static_cast<Eigen::Index>(A), covariates.cols());

    for (std::uint64_t t = 0; t < max_redraws; ++t) {
        RandomStream rng(derive_seed(seed, "redraw", t), 0);
        detail::complete_randomization(rng, n, fs.arm_count(), arm_order, slots);
        arm_sums.setZero();
        for (std::size_t i = 0; i < n; ++i) arm_sums.row(slots[i] - 1) += covariates.row(static_cast<Eigen::Index>(i));
        bool ok = true;
        for (std::size_t c = 0; c < rows.size(); ++c) {
            Vector diff = Vector::Zero(covariates.cols());
            for (std::size_t d = 0; d < A; ++d) diff += rows[c][d] * arm_sums.row(static_cast<Eigen::Index>(d)).transpose();
            diff /= static_cast<double>(n) / 2.0;
            const double m = diff.dot(s_inv * diff) / scale;
            const double cut = (c < static_cast<std::size_t>(K)) ? main_cut : *inter_cut;
            if (m > cut) {
                ++failures[c];
                ok = false;
                break;
            }
        }
        if (ok) {
            AssignmentPlan plan{DesignKind::Rerandomized, slots, fs.arm_count(), seed};
            plan.factors = K;
            plan.main_threshold = main_cut;
            plan.interaction_threshold = inter_cut;
            plan.redraws = t + 1;
            return plan;
        }
    }
    const auto worst = static_cast<std::size_t>(std::max_element(failures.begin(), failures.end()) - failures.begin());
    throw Error("assign_rerandomized: no acceptable assignment in " + std::to_string(max_redraws) +
                " draws; tightest criterion: " + names[worst]);
}

}  // namespace tupleworks
