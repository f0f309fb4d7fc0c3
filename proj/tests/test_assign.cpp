#include "catch_amalgamated.hpp"
#include "support.hpp"
#include "tupleworks/assign.hpp"
#include "tupleworks/blocking.hpp"
#include "tupleworks/distributions.hpp"

#include <map>

using namespace tupleworks;
using Catch::Matchers::WithinAbs;

namespace {

BlockPartition consecutive_blocks(std::size_t n_blocks, std::size_t size) {
    std::vector<std::vector<std::size_t>> b(n_blocks);
    for (std::size_t j = 0; j < n_blocks; ++j)
        for (std::size_t r = 0; r < size; ++r) b[j].push_back(j * size + r);
    return BlockPartition(std::move(b), size);
}

std::vector<int> arm_counts(const std::vector<Arm>& arms, int A) {
    std::vector<int> c(static_cast<std::size_t>(A), 0);
    for (Arm a : arms) ++c[static_cast<std::size_t>(a - 1)];
    return c;
}

}  // namespace

TEST_CASE("matched tuples: one arm per block slot") {
    const auto p = consecutive_blocks(5, 1);
    CHECK(assign_matched_tuples(p, 1, 3).arms == std::vector<Arm>(5, 1));
    CHECK_THROWS_AS(assign_matched_tuples(consecutive_blocks(3, 3), 4, 1), Error);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto q = consecutive_blocks(7, 4);
        const auto plan = assign_matched_tuples(q, 4, seed);
        for (const auto& b : q.blocks()) {
            std::set<Arm> seen;
            for (auto i : b) seen.insert(plan.arms[i]);
            REQUIRE(seen.size() == 4);
        }
        CHECK(plan.arms == assign_matched_tuples(q, 4, seed).arms);
    }
}

TEST_CASE("matched tuples: first unit gets arm 1 half the time") {
    const auto p = consecutive_blocks(10000, 2);
    const auto plan = assign_matched_tuples(p, 2, 17);
    int hits = 0;
    for (std::size_t j = 0; j < 10000; ++j) hits += plan.arms[2 * j] == 1;
    CHECK_THAT(hits / 10000.0, WithinAbs(0.5, 0.02));
}

TEST_CASE("matched tuples: permutations of three are uniform") {
    const auto p = consecutive_blocks(1, 3);
    std::map<std::vector<Arm>, int> freq;
    for (std::uint64_t seed = 0; seed < 6000; ++seed) ++freq[assign_matched_tuples(p, 3, seed).arms];
    REQUIRE(freq.size() == 6);
    double chi2 = 0.0;
    for (auto& [k, c] : freq) {
        CHECK_THAT(c / 6000.0, WithinAbs(1.0 / 6, 0.02));
        chi2 += (c - 1000.0) * (c - 1000.0) / 1000.0;
    }
    CHECK(chi2_sf(chi2, 5) > 1e-4);
}

TEST_CASE("replicate tuples: each arm twice per block") {
    CHECK(assign_replicate_tuples(consecutive_blocks(3, 2), 1, 0).arms == std::vector<Arm>(6, 1));
    const auto p = consecutive_blocks(50, 4);
    const auto plan = assign_replicate_tuples(p, 2, 9);
    for (const auto& b : p.blocks()) {
        std::vector<Arm> arms;
        for (auto i : b) arms.push_back(plan.arms[i]);
        CHECK(arm_counts(arms, 2) == std::vector<int>{2, 2});
    }
    std::map<std::vector<Arm>, int> freq;
    const auto one = consecutive_blocks(1, 4);
    for (std::uint64_t seed = 0; seed < 6000; ++seed) ++freq[assign_replicate_tuples(one, 2, seed).arms];
    REQUIRE(freq.size() == 6);
    for (auto& [k, c] : freq) CHECK_THAT(c / 6000.0, WithinAbs(1.0 / 6, 0.02));
    CHECK_THROWS_AS(assign_replicate_tuples(consecutive_blocks(2, 4), 4, 0), Error);
}

TEST_CASE("stratified: counts and remainder rule") {
    const std::vector<int> one(400, 0);
    CHECK(arm_counts(assign_stratified(one, 4, 1).arms, 4) == std::vector<int>{100, 100, 100, 100});
    std::map<std::vector<int>, int> patterns;
    for (std::uint64_t seed = 0; seed < 400; ++seed) {
        const std::vector<int> five(5, 3);
        auto c = arm_counts(assign_stratified(five, 4, seed).arms, 4);
        CHECK(*std::max_element(c.begin(), c.end()) == 2);
        CHECK(std::count(c.begin(), c.end(), 1) == 3);
        ++patterns[c];
    }
    CHECK(patterns.size() == 4);
}

TEST_CASE("stratified: median split is balanced within each half") {
    RandomStream rng(2, 0);
    Matrix x(200, 1);
    for (Eigen::Index i = 0; i < 200; ++i) x(i, 0) = rng.normal();
    std::vector<double> sorted(x.data(), x.data() + 200);
    std::sort(sorted.begin(), sorted.end());
    const double med = 0.5 * (sorted[99] + sorted[100]);
    std::vector<int> labels(200);
    for (Eigen::Index i = 0; i < 200; ++i) labels[static_cast<std::size_t>(i)] = x(i, 0) > med;
    const auto plan = assign_stratified(labels, 4, 5);
    for (int h = 0; h < 2; ++h) {
        std::vector<Arm> arms;
        for (std::size_t i = 0; i < 200; ++i)
            if (labels[i] == h) arms.push_back(plan.arms[i]);
        CHECK(arm_counts(arms, 4) == std::vector<int>{25, 25, 25, 25});
    }
}

TEST_CASE("bernoulli factors") {
    const auto k1 = assign_bernoulli_factors(10000, 1, 4);
    CHECK_THAT(arm_counts(k1.arms, 2)[1] / 10000.0, WithinAbs(0.5, 0.02));
    const auto k2 = assign_bernoulli_factors(10000, 2, 4);
    for (int c : arm_counts(k2.arms, 4)) CHECK_THAT(c / 10000.0, WithinAbs(0.25, 0.02));
    CHECK_THROWS_AS(assign_bernoulli_factors(10, 0, 1), Error);
}

TEST_CASE("factor-specific matched pairs") {
    const auto p1 = consecutive_blocks(50, 2);
    const auto classic = assign_factor_specific_mp(p1, 1, 1, 3);
    for (const auto& b : p1.blocks()) CHECK(classic.arms[b[0]] + classic.arms[b[1]] == 3);

    const auto p = consecutive_blocks(5000, 2);
    const auto plan = assign_factor_specific_mp(p, 1, 2, 8);
    const FactorSpace fs(2);
    int high = 0;
    double sxy = 0, sx = 0, sy = 0, sxx = 0, syy = 0;
    for (const auto& b : p.blocks()) {
        CHECK(fs.level(plan.arms[b[0]], 1) + fs.level(plan.arms[b[1]], 1) == 0);
        high += fs.level(plan.arms[b[0]], 1) > 0;
        high += fs.level(plan.arms[b[1]], 1) > 0;
        const double a = fs.level(plan.arms[b[0]], 2), c = fs.level(plan.arms[b[1]], 2);
        sxy += a * c, sx += a, sy += c, sxx += a * a, syy += c * c;
    }
    CHECK(high == 5000);
    const double n = 5000;
    const double corr = (sxy / n - sx / n * sy / n) / std::sqrt((sxx / n - sx * sx / n / n) * (syy / n - sy * sy / n / n));
    CHECK(std::fabs(corr) < 0.05);
    CHECK_THROWS_AS(assign_factor_specific_mp(p, 3, 2, 1), Error);
    CHECK_THROWS_AS(assign_factor_specific_mp(consecutive_blocks(2, 4), 1, 2, 1), Error);
}

TEST_CASE("mahalanobis balance") {
    SECTION("equal means give zero") {
        Matrix x(4, 1);
        x << 1, 2, 1, 2;
        const std::vector<Arm> arms{1, 1, 2, 2};
        const std::vector<double> row{-1, 1};
        CHECK_THAT(mahalanobis_balance(x, arms, row), WithinAbs(0.0, 1e-14));
    }
    SECTION("scalar two-sample formula by hand") {
        // n units per side at 0 and 1, with within-side spread chosen so the
        // pooled-over-everything variance is exactly 1.
        const std::size_t n = 10;
        Matrix x(2 * n, 1);
        const double total_ss = 2.0 * n - 1.0;       // (2n - 1) * 1
        const double between = 2.0 * n * 0.25;       // every unit is 1/2 from the grand mean
        const double h = std::sqrt((total_ss - between) / (2.0 * n));
        std::vector<Arm> arms;
        for (std::size_t i = 0; i < n; ++i) {
            const double e = (i % 2 ? h : -h);
            x(static_cast<Eigen::Index>(i), 0) = 0.0 + e;
            x(static_cast<Eigen::Index>(n + i), 0) = 1.0 + e;
        }
        for (std::size_t i = 0; i < 2 * n; ++i) arms.push_back(i < n ? 1 : 2);
        const std::vector<double> row{-1, 1};
        CHECK_THAT(mahalanobis_balance(x, arms, row), WithinAbs(n / 2.0, 1e-12));
    }
    SECTION("mean near p under complete randomization") {
        RandomStream rng(21, 0);
        const Eigen::Index p = 3;
        Matrix x(100, p);
        for (Eigen::Index i = 0; i < x.rows(); ++i)
            for (Eigen::Index k = 0; k < p; ++k) x(i, k) = rng.normal() + (k == 1 ? x(i, 0) : 0.0);
        const std::vector<int> one(100, 0);
        const std::vector<double> row{-1, 1};
        double sum = 0;
        for (std::uint64_t seed = 0; seed < 10000; ++seed) sum += mahalanobis_balance(x, assign_stratified(one, 2, seed).arms, row);
        CHECK_THAT(sum / 10000.0, WithinAbs(3.0, 0.3));
    }
    SECTION("too few units on a side") {
        Matrix x(3, 1);
        x << 1, 2, 3;
        const std::vector<Arm> arms{1, 2, 2};
        const std::vector<double> row{-1, 1};
        CHECK_THROWS_AS(mahalanobis_balance(x, arms, row), Error);
    }
}

TEST_CASE("re-randomization") {
    RandomStream rng(31, 0);
    Matrix x(40, 2);
    for (Eigen::Index i = 0; i < x.rows(); ++i) x.row(i) << rng.normal(), rng.normal();

    SECTION("K = 1 accepts about 1% of raw draws") {
        const double cut = chi2_quantile(0.01, 2);
        const std::vector<int> one(40, 0);
        const std::vector<double> row{-1, 1};
        int accepted = 0;
        const int draws = 20000;
        for (int t = 0; t < draws; ++t) accepted += mahalanobis_balance(x, assign_stratified(one, 2, 1000 + t).arms, row) <= cut;
        CHECK_THAT(accepted / double(draws), WithinAbs(0.01, 0.003));
    }
    SECTION("accepted plans satisfy every criterion") {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            const auto plan = assign_rerandomized(x, 2, seed);
            REQUIRE(plan.redraws);
            CHECK_THAT(*plan.main_threshold, WithinAbs(chi2_quantile(0.1, 2), 1e-12));
            CHECK_THAT(*plan.interaction_threshold, WithinAbs(chi2_quantile(0.01, 2), 1e-12));
            const FactorSpace fs(2);
            for (int k = 1; k <= 2; ++k) {
                std::vector<double> row;
                for (Arm d = 1; d <= 4; ++d) row.push_back(fs.level(d, k));
                CHECK(mahalanobis_balance(x, plan.arms, row) <= *plan.main_threshold + 1e-9);
            }
            for (const auto& row : interaction_generators(fs))
                CHECK(mahalanobis_balance(x, plan.arms, row) <= *plan.interaction_threshold + 1e-9);
            CHECK(arm_counts(plan.arms, 4) == std::vector<int>{10, 10, 10, 10});
            CHECK(plan.arms == assign_rerandomized(x, 2, seed).arms);
        }
    }
    SECTION("failure names a criterion") {
        try {
            assign_rerandomized(x, 2, 1, 3);
            FAIL("expected failure");
        } catch (const Error& e) {
            CHECK(std::string(e.what()).find("tightest criterion") != std::string::npos);
        }
        CHECK_THROWS_AS(assign_rerandomized(x.topRows(6), 2, 1), Error);
    }
}
