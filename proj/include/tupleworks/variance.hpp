#pragma once

// Variance estimators for contrast estimates, all reported on the sqrt(n)
// scale with n = units / arms: the matched-tuples estimator V = V1 + V2
// (adjacent-block or replicate form of the same-arm moment), the
// fixed-effects HC0/HC1 closed form, the block-cluster estimator, the
// stratified plug-in, the unblocked two-sample estimator, and the
// two-control quadruplet adaptation.

#include "tupleworks/core.hpp"
#include "tupleworks/estimate.hpp"

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace tupleworks {

enum class VarianceMethod { Adjusted, AdjustedReplicate, SfeHC0, SfeHC1, Bcve, StratPlugin, TwoSample, TwoControlQuad };

inline std::string to_string(VarianceMethod m) {
    switch (m) {
        case VarianceMethod::Adjusted: return "adjusted";
        case VarianceMethod::AdjustedReplicate: return "adjusted-rep";
        case VarianceMethod::SfeHC0: return "sfe-hc0";
        case VarianceMethod::SfeHC1: return "sfe-hc1";
        case VarianceMethod::Bcve: return "bcve";
        case VarianceMethod::StratPlugin: return "strat";
        case VarianceMethod::TwoSample: return "two-sample";
        case VarianceMethod::TwoControlQuad: return "quad2c";
    }
    return "unknown";
}

struct VarianceReport {
    VarianceMethod method = VarianceMethod::Adjusted;
    std::optional<Matrix> v_full;  ///< |D| x |D| matrix when the method produces one
    Matrix v_contrast;             ///< m x m, sqrt(n) scale
    std::size_t n = 0;
    std::vector<std::string> warnings;
};

namespace detail {

/// Per-block, per-arm outcome sums and counts.
struct BlockArmTable {
    Matrix sums;    ///< blocks x arms
    Eigen::MatrixXi counts;

    double mean(std::size_t j, Arm d) const {
        const auto c = counts(static_cast<Eigen::Index>(j), d - 1);
        return sums(static_cast<Eigen::Index>(j), d - 1) / static_cast<double>(c);
    }
};

inline BlockArmTable block_arm_table(const Sample& s, const BlockPartition& p) {
    p.require_matches(s);
    const auto n = static_cast<Eigen::Index>(p.num_blocks());
    BlockArmTable t{Matrix::Zero(n, s.num_arms()), Eigen::MatrixXi::Zero(n, s.num_arms())};
    for (std::size_t j = 0; j < p.num_blocks(); ++j)
        for (auto i : p.block(j)) {
            t.sums(static_cast<Eigen::Index>(j), s.arm(i) - 1) += s.outcome(i);
            t.counts(static_cast<Eigen::Index>(j), s.arm(i) - 1) += 1;
        }
    return t;
}

inline void check_arm(const Sample& s, Arm d, const char* who) {
    if (d < 1 || d > s.num_arms())
        throw Error(std::string(who) + ": arm " + std::to_string(d) + " outside 1.." + std::to_string(s.num_arms()));
}

/// Every block holds each arm exactly `copies` times.
inline void require_balanced_blocks(const BlockArmTable& t, int copies, const char* who) {
    for (Eigen::Index j = 0; j < t.counts.rows(); ++j)
        for (Eigen::Index d = 0; d < t.counts.cols(); ++d)
            if (t.counts(j, d) != copies)
                throw Error(std::string(who) + ": block " + std::to_string(j + 1) + " holds arm " +
                            std::to_string(d + 1) + " " + std::to_string(t.counts(j, d)) + " times, expected " +
                            std::to_string(copies));
}

inline void clip_contrast_diagonal(Matrix& v, std::vector<std::string>& warnings) {
    for (Eigen::Index r = 0; r < v.rows(); ++r)
        if (v(r, r) < 0.0) {
            warnings.push_back("contrast variance row " + std::to_string(r + 1) + " was negative (" +
                               std::to_string(v(r, r)) + ") and was clipped to 0");
            v(r, r) = 0.0;
        }
}

}  // namespace detail

/// Mean over blocks of the product of the arm-d and arm-d' within-block
/// outcomes (within-block arm means when an arm appears more than once).
inline double rho_cross(const Sample& s, const BlockPartition& p, Arm d, Arm d2) {
    detail::check_arm(s, d, "rho_cross");
    detail::check_arm(s, d2, "rho_cross");
    if (d == d2) throw Error("rho_cross: arms must differ (use rho_same_adjacent or rho_same_replicate)");
    const auto t = detail::block_arm_table(s, p);
    double acc = 0.0;
    for (std::size_t j = 0; j < p.num_blocks(); ++j) {
        if (t.counts(static_cast<Eigen::Index>(j), d - 1) == 0 || t.counts(static_cast<Eigen::Index>(j), d2 - 1) == 0)
            throw Error("rho_cross: block " + std::to_string(j + 1) + " lacks arm " + std::to_string(d) + " or " +
                        std::to_string(d2));
        acc += t.mean(j, d) * t.mean(j, d2);
    }
    return acc / static_cast<double>(p.num_blocks());
}

/// Products of arm-d outcomes across block pairs (1,2), (3,4), ..., averaged
/// over the floor(n/2) pairs. A trailing unpaired block is ignored.
inline double rho_same_adjacent(const Sample& s, const BlockPartition& p, Arm d) {
    detail::check_arm(s, d, "rho_same_adjacent");
    const auto n = p.num_blocks();
    if (n < 2) throw Error("rho_same_adjacent: needs at least 2 blocks, got " + std::to_string(n));
    const auto t = detail::block_arm_table(s, p);
    double acc = 0.0;
    for (std::size_t j = 0; j + 1 < n; j += 2) {
        if (t.counts(static_cast<Eigen::Index>(j), d - 1) == 0 || t.counts(static_cast<Eigen::Index>(j + 1), d - 1) == 0)
            throw Error("rho_same_adjacent: block pair (" + std::to_string(j + 1) + "," + std::to_string(j + 2) +
                        ") lacks arm " + std::to_string(d));
        acc += t.mean(j, d) * t.mean(j + 1, d);
    }
    return acc / static_cast<double>(n / 2);
}

/// Mean over blocks of the product of the two arm-d outcomes in each block.
inline double rho_same_replicate(const Sample& s, const BlockPartition& p, Arm d) {
    detail::check_arm(s, d, "rho_same_replicate");
    p.require_matches(s);
    double acc = 0.0;
    for (std::size_t j = 0; j < p.num_blocks(); ++j) {
        double prod = 1.0;
        int count = 0;
        for (auto i : p.block(j))
            if (s.arm(i) == d) {
                prod *= s.outcome(i);
                ++count;
            }
        if (count != 2)
            throw Error("rho_same_replicate: block " + std::to_string(j + 1) + " holds arm " + std::to_string(d) +
                        " " + std::to_string(count) + " times, expected 2");
        acc += prod;
    }
    return acc / static_cast<double>(p.num_blocks());
}

/// Mean squared deviation of arm-d outcomes from their mean (divisor = arm count).
inline double sigma2_hat(const Sample& s, Arm d) {
    detail::check_arm(s, d, "sigma2_hat");
    double sum = 0.0;
    std::size_t c = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (s.arm(i) == d) {
            sum += s.outcome(i);
            ++c;
        }
    if (c == 0) throw Error("sigma2_hat: arm " + std::to_string(d) + " has no observations");
    const double mean = sum / static_cast<double>(c);
    double ss = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (s.arm(i) == d) ss += (s.outcome(i) - mean) * (s.outcome(i) - mean);
    return ss / static_cast<double>(c);
}

/// V = V1 + V2 with
///   V1(d)     = sigma2(d) - (rho(d,d) - G(d)^2)          (diagonal)
///   V2(d,d')  = (rho(d,d') - G(d)G(d')) / |D|            (rho(d,d) on the diagonal)
/// rho(d,d) is the adjacent-block moment, or the replicate moment when
/// replicate_mode is set. Negative V1 entries are clipped to 0 with a warning.
inline VarianceReport v_hat_adjusted(const Sample& s, const BlockPartition& p, const Contrast& nu,
                                     bool replicate_mode = false) {
    const int A = s.num_arms();
    if (nu.arms() != A)
        throw Error("v_hat_adjusted: contrast has " + std::to_string(nu.arms()) + " columns for " +
                    std::to_string(A) + " arms");
    const auto t = detail::block_arm_table(s, p);
    detail::require_balanced_blocks(t, replicate_mode ? 2 : 1, "v_hat_adjusted");
    if (!replicate_mode && p.num_blocks() < 2)
        throw Error("v_hat_adjusted: needs at least 2 blocks, got " + std::to_string(p.num_blocks()));

    const auto g = gamma_hat(s);
    VarianceReport rep;
    rep.method = replicate_mode ? VarianceMethod::AdjustedReplicate : VarianceMethod::Adjusted;
    rep.n = g.n;

    Vector rho_same(A);
    for (Arm d = 1; d <= A; ++d)
        rho_same(d - 1) = replicate_mode ? rho_same_replicate(s, p, d) : rho_same_adjacent(s, p, d);

    Matrix v = Matrix::Zero(A, A);
    for (Arm d = 1; d <= A; ++d) {
        double v1 = sigma2_hat(s, d) - (rho_same(d - 1) - g.values(d - 1) * g.values(d - 1));
        if (v1 < 0.0) {
            rep.warnings.push_back("V1 for arm " + std::to_string(d) + " was negative (" + std::to_string(v1) +
                                   ") and was clipped to 0");
            v1 = 0.0;
        }
        v(d - 1, d - 1) += v1;
        for (Arm d2 = 1; d2 <= A; ++d2) {
            const double rho = (d == d2) ? rho_same(d - 1) : rho_cross(s, p, d, d2);
            v(d - 1, d2 - 1) += (rho - g.values(d - 1) * g.values(d2 - 1)) / A;
        }
    }
    rep.v_contrast = nu.matrix * v * nu.matrix.transpose();
    detail::clip_contrast_diagonal(rep.v_contrast, rep.warnings);
    rep.v_full = std::move(v);
    return rep;
}

enum class HcType { HC0, HC1 };

/// Degrees-of-freedom factor of the fixed-effects regression: 1 for HC0,
/// |D|n / (|D|n - (|D| - 1 + n)) for HC1.
inline double sfe_kappa(HcType hc, int num_arms, std::size_t n) {
    if (hc == HcType::HC0) return 1.0;
    const double A = num_arms, nn = static_cast<double>(n);
    const double denom = A * nn - (A - 1.0 + nn);
    if (!(denom > 0.0)) throw Error("sfe_kappa: no residual degrees of freedom");
    return A * nn / denom;
}

/// Robust variance of the arm-d coefficient in the regression of Y on
/// treatment dummies and block fixed effects, evaluated in closed form:
///   (1/n^2) sum_j (sum_{i in block j} (1{D_i=a} - 1/|D|) Y_i)^2 - (1/n)(G(a) - mean G)^2
/// summed over a in {1, d}, times kappa, times n (sqrt(n) scale).
inline VarianceReport v_hat_sfe(const Sample& s, const BlockPartition& p, Arm d, HcType hc) {
    detail::check_arm(s, d, "v_hat_sfe");
    if (d == 1) throw Error("v_hat_sfe: arm must differ from the reference arm 1");
    const int A = s.num_arms();
    const auto t = detail::block_arm_table(s, p);
    detail::require_balanced_blocks(t, 1, "v_hat_sfe");
    const auto g = gamma_hat(s);
    const double nn = static_cast<double>(p.num_blocks());
    const double gbar = g.values.mean();

    double v = 0.0;
    for (Arm a : {Arm{1}, d}) {
        double ss = 0.0;
        for (std::size_t j = 0; j < p.num_blocks(); ++j) {
            const double total = t.sums.row(static_cast<Eigen::Index>(j)).sum();
            const double w = t.sums(static_cast<Eigen::Index>(j), a - 1) - total / A;
            ss += w * w;
        }
        const double c = g.values(a - 1) - gbar;
        v += ss / (nn * nn) - c * c / nn;
    }
    VarianceReport rep;
    rep.method = (hc == HcType::HC0) ? VarianceMethod::SfeHC0 : VarianceMethod::SfeHC1;
    rep.n = p.num_blocks();
    rep.v_contrast = Matrix::Constant(1, 1, nn * sfe_kappa(hc, A, p.num_blocks()) * v);
    detail::clip_contrast_diagonal(rep.v_contrast, rep.warnings);
    return rep;
}

/// Block-cluster variance of the arm-d coefficient (regression of Y on a
/// constant and treatment dummies, clustered by block):
///   (1/n) sum_j (Y_{j,d} - Y_{j,1})^2 - (G(d) - G(1))^2.
inline VarianceReport v_hat_bcve(const Sample& s, const BlockPartition& p, Arm d) {
    detail::check_arm(s, d, "v_hat_bcve");
    if (d == 1) throw Error("v_hat_bcve: arm must differ from the reference arm 1");
    const auto t = detail::block_arm_table(s, p);
    detail::require_balanced_blocks(t, 1, "v_hat_bcve");
    const auto g = gamma_hat(s);
    double ss = 0.0;
    for (std::size_t j = 0; j < p.num_blocks(); ++j) {
        const double diff = t.sums(static_cast<Eigen::Index>(j), d - 1) - t.sums(static_cast<Eigen::Index>(j), 0);
        ss += diff * diff;
    }
    const double gap = g.values(d - 1) - g.values(0);
    VarianceReport rep;
    rep.method = VarianceMethod::Bcve;
    rep.n = p.num_blocks();
    rep.v_contrast = Matrix::Constant(1, 1, ss / static_cast<double>(p.num_blocks()) - gap * gap);
    detail::clip_contrast_diagonal(rep.v_contrast, rep.warnings);
    return rep;
}

/// Plug-in estimate for a design randomized within strata:
///   Vh1 = diag(sum_s p_s var_{s,d}),
///   Vh2(d,d') = (1/|D|) sum_s p_s (m_{s,d} - M_d)(m_{s,d'} - M_{d'}),
/// where p_s is the stratum's share of units, var_{s,d} and m_{s,d} the
/// within-cell variance (divisor = cell count) and mean, and M_d = sum_s p_s m_{s,d}.
inline VarianceReport v_hat_strat_plugin(const Sample& s, std::span<const int> strata_labels, const Contrast& nu) {
    const int A = s.num_arms();
    if (strata_labels.size() != s.size()) throw Error("v_hat_strat_plugin: strata labels do not match unit count");
    if (nu.arms() != A) throw Error("v_hat_strat_plugin: contrast column count does not match arms");

    std::map<int, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < s.size(); ++i) strata[strata_labels[i]].push_back(i);
    const auto S = static_cast<Eigen::Index>(strata.size());

    Vector share(S);
    Matrix mean = Matrix::Zero(S, A), var = Matrix::Zero(S, A);
    Eigen::Index r = 0;
    for (const auto& [label, members] : strata) {
        share(r) = static_cast<double>(members.size()) / static_cast<double>(s.size());
        std::vector<std::size_t> count(static_cast<std::size_t>(A), 0);
        for (auto i : members) {
            mean(r, s.arm(i) - 1) += s.outcome(i);
            ++count[static_cast<std::size_t>(s.arm(i) - 1)];
        }
        for (Arm d = 1; d <= A; ++d) {
            const auto c = count[static_cast<std::size_t>(d - 1)];
            if (c < 2)
                throw Error("v_hat_strat_plugin: stratum " + std::to_string(label) + ", arm " + std::to_string(d) +
                            " has " + std::to_string(c) + " observations (need at least 2)");
            mean(r, d - 1) /= static_cast<double>(c);
        }
        for (auto i : members) {
            const double e = s.outcome(i) - mean(r, s.arm(i) - 1);
            var(r, s.arm(i) - 1) += e * e;
        }
        for (Arm d = 1; d <= A; ++d) var(r, d - 1) /= static_cast<double>(count[static_cast<std::size_t>(d - 1)]);
        ++r;
    }

    const Eigen::RowVectorXd overall = share.transpose() * mean;
    const Matrix centred = mean.rowwise() - overall;
    Matrix v = (centred.transpose() * share.asDiagonal() * centred) / A;
    v.diagonal() += var.transpose() * share;

    VarianceReport rep;
    rep.method = VarianceMethod::StratPlugin;
    rep.n = s.size() / static_cast<std::size_t>(A);
    rep.v_contrast = nu.matrix * v * nu.matrix.transpose();
    detail::clip_contrast_diagonal(rep.v_contrast, rep.warnings);
    rep.v_full = std::move(v);
    return rep;
}

/// Unblocked two-sample estimate: diag(n s_d^2 / n_d) with s_d^2 the
/// unbiased (n_d - 1) arm variance; arms treated as independent samples.
inline VarianceReport v_hat_two_sample(const Sample& s, const Contrast& nu) {
    const int A = s.num_arms();
    if (nu.arms() != A) throw Error("v_hat_two_sample: contrast column count does not match arms");
    const auto g = gamma_hat(s);
    Vector ss = Vector::Zero(A);
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double e = s.outcome(i) - g.values(s.arm(i) - 1);
        ss(s.arm(i) - 1) += e * e;
    }
    Matrix v = Matrix::Zero(A, A);
    for (Arm d = 1; d <= A; ++d) {
        const auto c = g.counts[static_cast<std::size_t>(d - 1)];
        if (c < 2) throw Error("v_hat_two_sample: arm " + std::to_string(d) + " has fewer than 2 observations");
        v(d - 1, d - 1) = static_cast<double>(g.n) * ss(d - 1) / static_cast<double>(c - 1) / static_cast<double>(c);
    }
    VarianceReport rep;
    rep.method = VarianceMethod::TwoSample;
    rep.n = g.n;
    rep.v_contrast = nu.matrix * v * nu.matrix.transpose();
    rep.v_full = std::move(v);
    return rep;
}

/// Rows of the quadruplet contrast: treatment 2 vs control, treatment 3 vs
/// control, treatment 3 vs treatment 2, over pseudo-arms (control a,
/// control b, treatment 2, treatment 3).
inline Contrast two_control_quad_contrast() {
    Matrix m(3, 4);
    m << -0.5, -0.5, 1.0, 0.0,  //
        -0.5, -0.5, 0.0, 1.0,   //
        0.0, 0.0, -1.0, 1.0;
    return {m, "quad"};
}

/// Rows of two_control_quad_contrast() selected by 1-based index.
inline Contrast two_control_quad_rows(std::span<const int> which) {
    const auto full = two_control_quad_contrast();
    if (which.empty()) return full;
    Matrix m(static_cast<Eigen::Index>(which.size()), 4);
    std::string label = "quad:";
    for (std::size_t r = 0; r < which.size(); ++r) {
        if (which[r] < 1 || which[r] > 3) throw Error("quadruplet contrast: row " + std::to_string(which[r]) + " not in 1..3");
        m.row(static_cast<Eigen::Index>(r)) = full.matrix.row(which[r] - 1);
        label += (r ? "," : "") + std::to_string(which[r]);
    }
    return {m, label};
}

/// Blocks of (control, control, 2, 3) recoded to four pseudo-arms: the
/// controls become 1 and 2 in within-block order, arms 2 and 3 become 3 and 4.
inline Sample relabel_two_control_quad(const Sample& s, const BlockPartition& p) {
    p.require_matches(s);
    if (p.tuple_size() != 4) throw Error("quadruplet: blocks must have 4 units");
    if (s.num_arms() != 3) throw Error("quadruplet: expected 3 arms (control, 2, 3), got " + std::to_string(s.num_arms()));
    std::vector<Arm> arms(s.size());
    for (std::size_t j = 0; j < p.num_blocks(); ++j) {
        int controls = 0, twos = 0, threes = 0;
        for (auto i : p.block(j)) {
            switch (s.arm(i)) {
                case 1: arms[i] = 1 + controls++; break;
                case 2: arms[i] = 3; ++twos; break;
                default: arms[i] = 4; ++threes; break;
            }
        }
        if (controls != 2 || twos != 1 || threes != 1)
            throw Error("quadruplet: block " + std::to_string(j + 1) +
                        " is not two controls plus one unit each of arms 2 and 3");
    }
    return s.with_arms(arms, 4);
}

/// Adjusted estimator on the relabelled quadruplets for the selected rows of
/// two_control_quad_contrast() (all three when `which` is empty).
inline VarianceReport v_hat_two_control_quad(const Sample& s, const BlockPartition& p, std::span<const int> which = {}) {
    const auto relabelled = relabel_two_control_quad(s, p);
    auto rep = v_hat_adjusted(relabelled, p, two_control_quad_rows(which));
    rep.method = VarianceMethod::TwoControlQuad;
    return rep;
}

}  // namespace tupleworks
