#pragma once

// Shared data model: samples, block partitions, factor spaces, contrasts and
// potential outcomes.

#include <Eigen/Dense>

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace tupleworks {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Treatment arm label, 1-based.
using Arm = int;

/// Experimental units with covariates and, once known, arm and outcome.
/// Immutable after construction; the with_* members return modified copies.
class Sample {
public:
    Sample() = default;

    Sample(std::vector<std::string> ids, Matrix covariates, int num_arms,
           std::vector<std::optional<Arm>> arms = {},
           std::vector<std::optional<double>> outcomes = {},
           std::vector<std::string> covariate_names = {})
        : ids_(std::move(ids)),
          covariates_(std::move(covariates)),
          num_arms_(num_arms),
          arms_(std::move(arms)),
          outcomes_(std::move(outcomes)),
          names_(std::move(covariate_names)) {
        const auto n = ids_.size();
        if (num_arms_ < 1) throw Error("sample: num_arms must be positive");
        if (static_cast<std::size_t>(covariates_.rows()) != n)
            throw Error("sample: covariate rows do not match unit count");
        if (covariates_.cols() < 1) throw Error("sample: at least one covariate is required");
        if (arms_.empty()) arms_.assign(n, std::nullopt);
        if (outcomes_.empty()) outcomes_.assign(n, std::nullopt);
        if (arms_.size() != n || outcomes_.size() != n)
            throw Error("sample: arm/outcome columns do not match unit count");
        for (const auto& a : arms_)
            if (a && (*a < 1 || *a > num_arms_))
                throw Error("sample: arm " + std::to_string(*a) + " outside 1.." +
                            std::to_string(num_arms_));
        if (names_.empty())
            for (Eigen::Index k = 0; k < covariates_.cols(); ++k)
                names_.push_back("x" + std::to_string(k + 1));
        if (static_cast<Eigen::Index>(names_.size()) != covariates_.cols())
            throw Error("sample: covariate names do not match covariate count");
    }

    std::size_t size() const { return ids_.size(); }
    Eigen::Index dim() const { return covariates_.cols(); }
    int num_arms() const { return num_arms_; }

    const std::vector<std::string>& ids() const { return ids_; }
    const std::string& id(std::size_t i) const { return ids_.at(i); }
    const Matrix& covariates() const { return covariates_; }
    double covariate(std::size_t i, Eigen::Index k) const {
        return covariates_(static_cast<Eigen::Index>(i), k);
    }
    const std::vector<std::string>& covariate_names() const { return names_; }

    std::optional<Arm> arm_if_assigned(std::size_t i) const { return arms_.at(i); }
    std::optional<double> outcome_if_revealed(std::size_t i) const { return outcomes_.at(i); }

    Arm arm(std::size_t i) const {
        const auto& a = arms_.at(i);
        if (!a) throw Error("sample: unit '" + ids_[i] + "' has no assigned arm");
        return *a;
    }
    double outcome(std::size_t i) const {
        const auto& y = outcomes_.at(i);
        if (!y) throw Error("sample: unit '" + ids_[i] + "' has no observed outcome");
        return *y;
    }

    bool has_arms() const {
        return std::all_of(arms_.begin(), arms_.end(), [](const auto& a) { return a.has_value(); });
    }
    bool has_outcomes() const {
        return std::all_of(outcomes_.begin(), outcomes_.end(),
                           [](const auto& y) { return y.has_value(); });
    }

    Sample with_arms(std::span<const Arm> arms, std::optional<int> num_arms = std::nullopt) const {
        if (arms.size() != size()) throw Error("sample: assignment length does not match unit count");
        std::vector<std::optional<Arm>> a(arms.begin(), arms.end());
        return Sample(ids_, covariates_, num_arms.value_or(num_arms_), std::move(a), outcomes_, names_);
    }

    Sample with_outcomes(std::span<const double> ys) const {
        if (ys.size() != size()) throw Error("sample: outcome length does not match unit count");
        std::vector<std::optional<double>> y(ys.begin(), ys.end());
        return Sample(ids_, covariates_, num_arms_, arms_, std::move(y), names_);
    }

    /// Units at the given indices, in that order.
    Sample subset(std::span<const std::size_t> idx) const {
        std::vector<std::string> ids;
        Matrix x(static_cast<Eigen::Index>(idx.size()), dim());
        std::vector<std::optional<Arm>> a;
        std::vector<std::optional<double>> y;
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const auto i = idx[r];
            ids.push_back(ids_.at(i));
            x.row(static_cast<Eigen::Index>(r)) = covariates_.row(static_cast<Eigen::Index>(i));
            a.push_back(arms_[i]);
            y.push_back(outcomes_[i]);
        }
        return Sample(std::move(ids), std::move(x), num_arms_, std::move(a), std::move(y), names_);
    }

private:
    std::vector<std::string> ids_;
    Matrix covariates_;
    int num_arms_ = 2;
    std::vector<std::optional<Arm>> arms_;
    std::vector<std::optional<double>> outcomes_;
    std::vector<std::string> names_;
};

/// Ordered partition of unit indices into blocks of equal size.
class BlockPartition {
public:
    BlockPartition() = default;

    BlockPartition(std::vector<std::vector<std::size_t>> blocks, std::size_t tuple_size)
        : blocks_(std::move(blocks)), tuple_size_(tuple_size) {
        if (tuple_size_ == 0) throw Error("partition: tuple size must be positive");
        if (blocks_.empty()) throw Error("partition: no blocks");
        std::vector<char> seen(unit_count(), 0);
        for (const auto& b : blocks_) {
            if (b.size() != tuple_size_)
                throw Error("partition: block of size " + std::to_string(b.size()) +
                            ", expected " + std::to_string(tuple_size_));
            for (auto i : b) {
                if (i >= seen.size() || seen[i])
                    throw Error("partition: blocks do not form a partition of 0.." +
                                std::to_string(seen.size() - 1));
                seen[i] = 1;
            }
        }
    }

    std::size_t num_blocks() const { return blocks_.size(); }
    std::size_t tuple_size() const { return tuple_size_; }
    std::size_t unit_count() const { return blocks_.size() * tuple_size_; }
    const std::vector<std::vector<std::size_t>>& blocks() const { return blocks_; }
    const std::vector<std::size_t>& block(std::size_t j) const { return blocks_.at(j); }

    /// Block index of each unit.
    std::vector<std::size_t> block_of_unit() const {
        std::vector<std::size_t> out(unit_count());
        for (std::size_t j = 0; j < blocks_.size(); ++j)
            for (auto i : blocks_[j]) out[i] = j;
        return out;
    }

    void require_matches(const Sample& s) const {
        if (s.size() != unit_count())
            throw Error("partition covers " + std::to_string(unit_count()) + " units but sample has " +
                        std::to_string(s.size()));
    }

    friend bool operator==(const BlockPartition&, const BlockPartition&) = default;

private:
    std::vector<std::vector<std::size_t>> blocks_;
    std::size_t tuple_size_ = 0;
};

/// 2^K factor combinations. Arms are ordered lexicographically in the level
/// vector with -1 before +1 and factor 1 most significant.
class FactorSpace {
public:
    explicit FactorSpace(int K) : K_(K) {
        if (K < 1 || K > 30) throw Error("factor space: K must be in 1..30");
    }

    int factors() const { return K_; }
    int arm_count() const { return 1 << K_; }

    Arm arm_of_levels(std::span<const int> levels) const {
        if (static_cast<int>(levels.size()) != K_)
            throw Error("factor space: expected " + std::to_string(K_) + " levels, got " +
                        std::to_string(levels.size()));
        int index = 0;
        for (int lv : levels) {
            if (lv != -1 && lv != 1) throw Error("factor space: levels must be -1 or +1");
            index = 2 * index + (lv + 1) / 2;
        }
        return index + 1;
    }

    std::vector<int> levels_of_arm(Arm arm) const {
        if (arm < 1 || arm > arm_count()) throw Error("factor space: arm out of range");
        std::vector<int> lv(static_cast<std::size_t>(K_));
        const int bits = arm - 1;
        for (int k = 0; k < K_; ++k) lv[static_cast<std::size_t>(k)] = ((bits >> (K_ - 1 - k)) & 1) ? 1 : -1;
        return lv;
    }

    /// Level of factor k (1-based) under the given arm.
    int level(Arm arm, int k) const {
        if (k < 1 || k > K_) throw Error("factor space: factor index out of range");
        if (arm < 1 || arm > arm_count()) throw Error("factor space: arm out of range");
        return (((arm - 1) >> (K_ - k)) & 1) ? 1 : -1;
    }

private:
    int K_;
};

/// m x num_arms contrast matrix.
struct Contrast {
    Matrix matrix;
    std::string label;

    Eigen::Index rows() const { return matrix.rows(); }
    Eigen::Index arms() const { return matrix.cols(); }
};

/// Full potential outcome table: row i holds Y_i(1..num_arms).
struct PotentialOutcomes {
    std::vector<std::string> ids;
    Matrix covariates;
    Matrix outcomes;

    std::size_t size() const { return ids.size(); }
    int num_arms() const { return static_cast<int>(outcomes.cols()); }
};

/// Observed sample implied by an assignment: only Y_i(D_i) is kept.
inline Sample reveal(const PotentialOutcomes& po, std::span<const Arm> assignment) {
    const auto n = po.size();
    if (assignment.size() != n)
        throw Error("reveal: assignment has " + std::to_string(assignment.size()) + " entries for " +
                    std::to_string(n) + " units");
    std::vector<std::optional<Arm>> arms(n);
    std::vector<std::optional<double>> ys(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Arm a = assignment[i];
        if (a < 1 || a > po.num_arms()) throw Error("reveal: arm " + std::to_string(a) + " out of range");
        arms[i] = a;
        ys[i] = po.outcomes(static_cast<Eigen::Index>(i), a - 1);
    }
    return Sample(po.ids, po.covariates, po.num_arms(), std::move(arms), std::move(ys));
}

/// Generated ids "u1".."un".
inline std::vector<std::string> sequential_ids(std::size_t n) {
    std::vector<std::string> ids;
    ids.reserve(n);
    for (std::size_t i = 0; i < n; ++i) ids.push_back("u" + std::to_string(i + 1));
    return ids;
}

}  // namespace tupleworks
