#pragma once

// Construction of homogeneous blocks from covariates and block-quality
// diagnostics.

#include "tupleworks/core.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <queue>
#include <tuple>
#include <utility>
#include <vector>

namespace tupleworks {

/// Within-block and adjacent-block covariate spread.
struct BlockDiagnostics {
    double within_stat = 0.0;
    double adjacent_stat = 0.0;
};

using IndexPair = std::pair<std::size_t, std::size_t>;

enum class MatchingMethod { Greedy, Exact };
enum class MahalanobisMode { Diagonal, Full };

struct PrestratifiedBlocks {
    Sample sample;  ///< retained units, in the index space of `partition`
    BlockPartition partition;
    std::vector<std::string> dropped_ids;
};

namespace detail {

inline double squared_distance(const Matrix& pts, Eigen::Index a, Eigen::Index b) {
    return (pts.row(a) - pts.row(b)).squaredNorm();
}

/// Indices ordered by (value, id).
inline std::vector<std::size_t> order_by_covariate(const Sample& s, std::span<const std::size_t> idx,
                                                   Eigen::Index k) {
    std::vector<std::size_t> out(idx.begin(), idx.end());
    std::sort(out.begin(), out.end(), [&](std::size_t a, std::size_t b) {
        const double xa = s.covariate(a, k), xb = s.covariate(b, k);
        if (xa != xb) return xa < xb;
        return s.id(a) < s.id(b);
    });
    return out;
}

inline void check_covariate_index(const Sample& s, Eigen::Index k) {
    if (k < 0 || k >= s.dim())
        throw Error("blocking: covariate index " + std::to_string(k) + " out of range (dim " +
                    std::to_string(s.dim()) + ")");
}

inline double total_cost(const Matrix& pts, std::span<const IndexPair> pairs) {
    double c = 0.0;
    for (auto [a, b] : pairs)
        c += squared_distance(pts, static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
    return c;
}

}  // namespace detail

/// Sort on one covariate (ties by id) and cut consecutive runs of tuple_size.
inline BlockPartition block_by_ordering(const Sample& sample, std::size_t tuple_size,
                                        Eigen::Index covariate_index = 0) {
    if (tuple_size == 0) throw Error("block_by_ordering: tuple size must be positive");
    detail::check_covariate_index(sample, covariate_index);
    if (sample.size() == 0 || sample.size() % tuple_size != 0)
        throw Error("block_by_ordering: " + std::to_string(sample.size()) +
                    " units is not a positive multiple of tuple size " + std::to_string(tuple_size));
    std::vector<std::size_t> all(sample.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    const auto sorted = detail::order_by_covariate(sample, all, covariate_index);
    std::vector<std::vector<std::size_t>> blocks;
    for (std::size_t start = 0; start < sorted.size(); start += tuple_size)
        blocks.emplace_back(sorted.begin() + static_cast<std::ptrdiff_t>(start),
                            sorted.begin() + static_cast<std::ptrdiff_t>(start + tuple_size));
    return BlockPartition(std::move(blocks), tuple_size);
}

/// Ordering within each stratum. The last (count mod tuple_size) units of each
/// stratum's sorted order are dropped. Blocks are ordered by stratum label,
/// then by sorted position.
inline PrestratifiedBlocks block_prestratified(const Sample& sample, std::span<const int> strata_labels,
                                               std::size_t tuple_size, Eigen::Index covariate_index = 0) {
    if (tuple_size == 0) throw Error("block_prestratified: tuple size must be positive");
    detail::check_covariate_index(sample, covariate_index);
    if (strata_labels.size() != sample.size())
        throw Error("block_prestratified: strata labels do not match unit count");

    std::map<int, std::vector<std::size_t>> strata;
    for (std::size_t i = 0; i < sample.size(); ++i) strata[strata_labels[i]].push_back(i);

    std::vector<std::size_t> kept;
    std::vector<std::string> dropped;
    std::vector<std::vector<std::size_t>> blocks_old;
    for (const auto& [label, members] : strata) {
        const auto sorted = detail::order_by_covariate(sample, members, covariate_index);
        const std::size_t usable = sorted.size() - sorted.size() % tuple_size;
        for (std::size_t start = 0; start < usable; start += tuple_size)
            blocks_old.emplace_back(sorted.begin() + static_cast<std::ptrdiff_t>(start),
                                    sorted.begin() + static_cast<std::ptrdiff_t>(start + tuple_size));
        for (std::size_t r = usable; r < sorted.size(); ++r) dropped.push_back(sample.id(sorted[r]));
    }
    if (blocks_old.empty()) throw Error("block_prestratified: no stratum holds a full block");

    // re-index retained units 0..m-1 in block order
    std::vector<std::vector<std::size_t>> blocks;
    for (const auto& b : blocks_old) {
        std::vector<std::size_t> nb;
        for (auto i : b) {
            nb.push_back(kept.size());
            kept.push_back(i);
        }
        blocks.push_back(std::move(nb));
    }
    return {sample.subset(kept), BlockPartition(std::move(blocks), tuple_size), std::move(dropped)};
}

/// Greedy perfect matching: repeatedly take the globally closest unmatched
/// pair under squared Euclidean distance, ties broken by the smallest
/// (lower index, higher index) pair. Rows of `points` are the points.
inline std::vector<IndexPair> greedy_nonbipartite_match(const Matrix& points) {
    const auto m = static_cast<std::size_t>(points.rows());
    if (m % 2 != 0) throw Error("greedy matching: odd number of points (" + std::to_string(m) + ")");
    using Key = std::tuple<double, std::size_t, std::size_t>;  // (distance, lo, hi)
    std::vector<char> matched(m, 0);

    auto nearest = [&](std::size_t i) {
        Key best{std::numeric_limits<double>::infinity(), m, m};
        for (std::size_t j = 0; j < m; ++j) {
            if (j == i || matched[j]) continue;
            const Key k{detail::squared_distance(points, static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)),
                        std::min(i, j), std::max(i, j)};
            if (k < best) best = k;
        }
        return best;
    };

    // Heap entries are lower bounds on each point's current best key; stale
    // entries (partner already matched) are refreshed when they surface.
    std::priority_queue<std::pair<Key, std::size_t>, std::vector<std::pair<Key, std::size_t>>, std::greater<>> heap;
    for (std::size_t i = 0; i < m; ++i) heap.emplace(nearest(i), i);

    std::vector<IndexPair> pairs;
    pairs.reserve(m / 2);
    while (!heap.empty()) {
        auto [key, i] = heap.top();
        heap.pop();
        if (matched[i]) continue;
        const auto [d, lo, hi] = key;
        const std::size_t j = (lo == i) ? hi : lo;
        if (j >= m) continue;
        if (matched[j]) {
            heap.emplace(nearest(i), i);
            continue;
        }
        matched[i] = matched[j] = 1;
        pairs.emplace_back(lo, hi);
    }
    return pairs;
}

/// Minimum total squared-distance perfect matching by exhaustive recursion.
/// Among optimal matchings the lexicographically first pairing (lowest
/// unmatched index paired with lowest admissible partner) wins.
inline std::vector<IndexPair> exact_nonbipartite_match(const Matrix& points) {
    const auto m = static_cast<std::size_t>(points.rows());
    if (m % 2 != 0) throw Error("exact matching: odd number of points (" + std::to_string(m) + ")");
    if (m > 14) throw Error("exact matching: refusing " + std::to_string(m) + " points (limit 14)");

    Matrix dist(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
    for (std::size_t a = 0; a < m; ++a)
        for (std::size_t b = 0; b < m; ++b)
            dist(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) =
                detail::squared_distance(points, static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));

    std::vector<IndexPair> best, current;
    double best_cost = std::numeric_limits<double>::infinity();
    std::vector<char> used(m, 0);

    auto recurse = [&](auto&& self, double cost) -> void {
        std::size_t first = 0;
        while (first < m && used[first]) ++first;
        if (first == m) {
            if (cost < best_cost) {
                best_cost = cost;
                best = current;
            }
            return;
        }
        used[first] = 1;
        for (std::size_t j = first + 1; j < m; ++j) {
            if (used[j]) continue;
            const double c = cost + dist(static_cast<Eigen::Index>(first), static_cast<Eigen::Index>(j));
            if (c >= best_cost) continue;
            used[j] = 1;
            current.emplace_back(first, j);
            self(self, c);
            current.pop_back();
            used[j] = 0;
        }
        used[first] = 0;
    };
    recurse(recurse, 0.0);
    return best;
}

inline double matching_cost(const Matrix& points, std::span<const IndexPair> pairs) {
    return detail::total_cost(points, pairs);
}

/// Covariates mapped so that squared Euclidean distance equals the chosen
/// Mahalanobis distance: per-column standardization (Diagonal) or
/// multiplication by the pseudo-inverse square root of the sample covariance
/// (Full). Zero-variance columns are left centred and unscaled.
inline Matrix mahalanobis_whiten(const Matrix& x, MahalanobisMode mode) {
    const auto n = x.rows();
    if (n < 2) return x;
    const Eigen::RowVectorXd mean = x.colwise().mean();
    const Matrix centred = x.rowwise() - mean;
    if (mode == MahalanobisMode::Diagonal) {
        Matrix out = centred;
        for (Eigen::Index k = 0; k < x.cols(); ++k) {
            const double sd = std::sqrt(centred.col(k).squaredNorm() / static_cast<double>(n - 1));
            if (sd > 0.0) out.col(k) /= sd;
        }
        return out;
    }
    const Matrix cov = centred.transpose() * centred / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
    const Vector& ev = eig.eigenvalues();
    const double tol = std::max(1e-12, ev.maxCoeff() * 1e-12);
    Vector inv_sqrt = ev.unaryExpr([tol](double v) { return v > tol ? 1.0 / std::sqrt(v) : 0.0; });
    const Matrix w = eig.eigenvectors() * inv_sqrt.asDiagonal() * eig.eigenvectors().transpose();
    return centred * w;
}

/// Repeated pairing: level 0 pairs units on whitened covariates, level l
/// pairs the groups of size 2^l on their mean whitened covariates. Blocks of
/// size 2^levels are ordered by ascending mean of the first raw covariate
/// (ties by smallest member index).
inline BlockPartition block_recursive_pairing(const Sample& sample, int levels,
                                              MahalanobisMode mode = MahalanobisMode::Diagonal,
                                              MatchingMethod method = MatchingMethod::Greedy) {
    if (levels < 1 || levels > 30) throw Error("recursive pairing: K must be in 1..30");
    const std::size_t tuple = std::size_t{1} << levels;
    if (sample.size() == 0 || sample.size() % tuple != 0)
        throw Error("recursive pairing: " + std::to_string(sample.size()) +
                    " units is not a positive multiple of 2^K = " + std::to_string(tuple));

    const Matrix z = mahalanobis_whiten(sample.covariates(), mode);
    std::vector<std::vector<std::size_t>> groups(sample.size());
    for (std::size_t i = 0; i < sample.size(); ++i) groups[i] = {i};

    for (int level = 0; level < levels; ++level) {
        Matrix centres(static_cast<Eigen::Index>(groups.size()), z.cols());
        for (std::size_t g = 0; g < groups.size(); ++g) {
            Eigen::RowVectorXd c = Eigen::RowVectorXd::Zero(z.cols());
            for (auto i : groups[g]) c += z.row(static_cast<Eigen::Index>(i));
            centres.row(static_cast<Eigen::Index>(g)) = c / static_cast<double>(groups[g].size());
        }
        const auto pairs = (method == MatchingMethod::Exact) ? exact_nonbipartite_match(centres)
                                                             : greedy_nonbipartite_match(centres);
        std::vector<std::vector<std::size_t>> merged;
        merged.reserve(pairs.size());
        for (auto [a, b] : pairs) {
            std::vector<std::size_t> g = groups[a];
            g.insert(g.end(), groups[b].begin(), groups[b].end());
            std::sort(g.begin(), g.end());
            merged.push_back(std::move(g));
        }
        groups = std::move(merged);
    }

    std::vector<std::pair<double, std::size_t>> keys;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        double m = 0.0;
        for (auto i : groups[g]) m += sample.covariate(i, 0);
        keys.emplace_back(m / static_cast<double>(groups[g].size()), groups[g].front());
    }
    std::vector<std::size_t> order(groups.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return keys[a] < keys[b]; });
    std::vector<std::vector<std::size_t>> blocks;
    for (auto g : order) blocks.push_back(std::move(groups[g]));
    return BlockPartition(std::move(blocks), tuple);
}

/// within_stat = (1/n) sum_j max_{i,k in block j} |X_i - X_k|^2;
/// adjacent_stat = (1/n) sum_{j <= n/2} max over blocks 2j-1 x 2j.
inline BlockDiagnostics diagnose(const Sample& sample, const BlockPartition& partition) {
    partition.require_matches(sample);
    const Matrix& x = sample.covariates();
    const auto n = partition.num_blocks();
    auto max_cross = [&](const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
        double best = 0.0;
        for (auto i : a)
            for (auto k : b)
                best = std::max(best, detail::squared_distance(x, static_cast<Eigen::Index>(i),
                                                               static_cast<Eigen::Index>(k)));
        return best;
    };
    BlockDiagnostics d;
    for (const auto& b : partition.blocks()) d.within_stat += max_cross(b, b);
    for (std::size_t j = 0; j + 1 < n; j += 2)
        d.adjacent_stat += max_cross(partition.block(j), partition.block(j + 1));
    d.within_stat /= static_cast<double>(n);
    d.adjacent_stat /= static_cast<double>(n);
    return d;
}

}  // namespace tupleworks
