#pragma once

// Shared fixtures and brute-force oracles for the test binaries.

#include "tupleworks/core.hpp"
#include "tupleworks/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <numeric>
#include <utility>
#include <vector>

namespace testsupport {

using namespace tupleworks;

/// n blocks of A consecutive units; each block holds every arm once in a
/// random order. Outcomes carry block effects and arm effects plus noise
/// whose scale depends on the arm.
inline std::pair<Sample, BlockPartition> random_matched_tuples(RandomStream& rng, int A, std::size_t n,
                                                               int copies = 1) {
    const std::size_t m = static_cast<std::size_t>(A * copies);
    const std::size_t J = m * n;
    Matrix x(static_cast<Eigen::Index>(J), 1);
    std::vector<Arm> arms(J);
    std::vector<double> y(J);
    std::vector<std::vector<std::size_t>> blocks;
    std::vector<double> arm_effect(static_cast<std::size_t>(A));
    for (auto& e : arm_effect) e = rng.normal();
    for (std::size_t j = 0; j < n; ++j) {
        const double block_effect = 2.0 * rng.normal();
        std::vector<Arm> perm;
        for (int c = 0; c < copies; ++c)
            for (Arm d = 1; d <= A; ++d) perm.push_back(d);
        rng.shuffle(perm.begin(), perm.end());
        std::vector<std::size_t> b;
        for (std::size_t r = 0; r < m; ++r) {
            const std::size_t i = j * m + r;
            x(static_cast<Eigen::Index>(i), 0) = block_effect + 0.1 * rng.normal();
            arms[i] = perm[r];
            y[i] = block_effect + arm_effect[static_cast<std::size_t>(perm[r] - 1)] + (1.0 + 0.5 * perm[r]) * rng.normal();
            b.push_back(i);
        }
        blocks.push_back(std::move(b));
    }
    Sample s(sequential_ids(J), x, A);
    s = s.with_arms(arms).with_outcomes(y);
    return {s, BlockPartition(std::move(blocks), m)};
}

struct OlsFit {
    Vector beta;
    Matrix hc0;  ///< HC0 sandwich for all coefficients
    Matrix cluster;  ///< block-clustered sandwich
    Eigen::Index k = 0;
    Eigen::Index N = 0;
};

/// Least squares of y on the columns of Z via the normal equations, with
/// HC0 and block-clustered sandwiches.
inline OlsFit ols(const Matrix& Z, const Vector& y, const std::vector<std::size_t>& cluster_of) {
    OlsFit f;
    f.N = Z.rows();
    f.k = Z.cols();
    const Matrix ztz = Z.transpose() * Z;
    const Matrix bread = ztz.inverse();
    f.beta = bread * (Z.transpose() * y);
    const Vector e = y - Z * f.beta;
    Matrix meat = Matrix::Zero(f.k, f.k);
    for (Eigen::Index i = 0; i < f.N; ++i) meat += e(i) * e(i) * Z.row(i).transpose() * Z.row(i);
    f.hc0 = bread * meat * bread;
    const std::size_t G = *std::max_element(cluster_of.begin(), cluster_of.end()) + 1;
    Matrix scores = Matrix::Zero(static_cast<Eigen::Index>(G), f.k);
    for (Eigen::Index i = 0; i < f.N; ++i) scores.row(static_cast<Eigen::Index>(cluster_of[i])) += e(i) * Z.row(i);
    f.cluster = bread * (scores.transpose() * scores) * bread;
    return f;
}

/// Y on treatment dummies for arms 2..A and one dummy per block.
inline OlsFit fixed_effects_ols(const Sample& s, const BlockPartition& p) {
    const int A = s.num_arms();
    const auto J = static_cast<Eigen::Index>(s.size());
    const auto n = static_cast<Eigen::Index>(p.num_blocks());
    const auto block_of = p.block_of_unit();
    Matrix Z = Matrix::Zero(J, (A - 1) + n);
    Vector y(J);
    for (Eigen::Index i = 0; i < J; ++i) {
        const auto u = static_cast<std::size_t>(i);
        if (s.arm(u) > 1) Z(i, s.arm(u) - 2) = 1.0;
        Z(i, (A - 1) + static_cast<Eigen::Index>(block_of[u])) = 1.0;
        y(i) = s.outcome(u);
    }
    return ols(Z, y, block_of);
}

/// Y on a constant and treatment dummies for arms 2..A.
inline OlsFit pooled_ols(const Sample& s, const BlockPartition& p) {
    const int A = s.num_arms();
    const auto J = static_cast<Eigen::Index>(s.size());
    Matrix Z = Matrix::Zero(J, A);
    Vector y(J);
    for (Eigen::Index i = 0; i < J; ++i) {
        const auto u = static_cast<std::size_t>(i);
        Z(i, 0) = 1.0;
        if (s.arm(u) > 1) Z(i, s.arm(u) - 1) = 1.0;
        y(i) = s.outcome(u);
    }
    return ols(Z, y, p.block_of_unit());
}

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const auto m = v.size();
    return m % 2 ? v[m / 2] : 0.5 * (v[m / 2 - 1] + v[m / 2]);
}

}  // namespace testsupport
