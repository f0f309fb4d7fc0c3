#include "catch_amalgamated.hpp"
#include "support.hpp"
#include "tupleworks/estimate.hpp"
#include "tupleworks/inference.hpp"

using namespace tupleworks;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

VarianceReport report(const Matrix& v) {
    VarianceReport r;
    r.v_contrast = v;
    return r;
}

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out(i++) = x;
    return out;
}

}  // namespace

TEST_CASE("wald test at the null point") {
    const auto r = wald_test(vec({1, 2}), report(Matrix::Identity(2, 2)), Matrix::Identity(2, 2), vec({1, 2}), 50, 0.05);
    CHECK(r.statistic == 0.0);
    CHECK(r.p_value == 1.0);
    CHECK_FALSE(r.reject);
    CHECK(r.df == 2);
}

TEST_CASE("wald test with l = 1 at the chi-square boundary") {
    const double c = 3.8414588206941244691;
    CHECK_THAT(wald_test(vec({0}), report(Matrix::Identity(1, 1)), Matrix::Identity(1, 1), vec({0}), 1, 0.05).critical_value,
               WithinRel(c, 1e-10));
    const double below = std::sqrt(c) * (1 - 1e-9), above = std::sqrt(c) * (1 + 1e-9);
    CHECK_FALSE(wald_test(vec({below}), report(Matrix::Identity(1, 1)), Matrix::Identity(1, 1), vec({0}), 1, 0.05).reject);
    CHECK(wald_test(vec({above}), report(Matrix::Identity(1, 1)), Matrix::Identity(1, 1), vec({0}), 1, 0.05).reject);
}

TEST_CASE("wald test with l = 2 and identity variance") {
    // sqrt(n)(d - d0) = (2, 0) with n = 4
    const auto r = wald_test(vec({1, 0}), report(Matrix::Identity(2, 2)), Matrix::Identity(2, 2), vec({0, 0}), 4, 0.05);
    CHECK_THAT(r.statistic, WithinAbs(4.0, 1e-13));
    CHECK_THAT(r.p_value, WithinRel(std::exp(-2.0), 1e-12));
}

TEST_CASE("wald test errors and near-singular warning") {
    CHECK_THROWS_AS(wald_test(vec({1, 2}), report(Matrix::Identity(2, 2)), Matrix::Ones(2, 2), vec({0, 0}), 4, 0.05), Error);
    CHECK_THROWS_AS(wald_test(vec({1}), report(Matrix::Zero(1, 1)), Matrix::Identity(1, 1), vec({0}), 4, 0.05), Error);
    CHECK_THROWS_AS(wald_test(vec({1, 2}), report(Matrix::Identity(2, 2)), Matrix::Identity(3, 2), vec({0, 0}), 4, 0.05), Error);
    Matrix v(2, 2);
    v << 1, 1, 1, 1;
    const auto r = wald_test(vec({1, 1}), report(v), Matrix::Identity(2, 2), vec({0, 0}), 4, 0.05);
    CHECK(r.df == 2);
    REQUIRE_FALSE(r.warnings.empty());
    CHECK(r.warnings.back().find("pseudo-inverse") != std::string::npos);
    CHECK_THAT(r.statistic, WithinAbs(4.0 * 2.0 / 2.0, 1e-10));
}

TEST_CASE("t test") {
    const auto at = t_test(1.0, 2.0, 10, 1.0, 0.05);
    CHECK(at.p_value == 1.0);
    CHECK_FALSE(at.reject);
    CHECK_THROWS_AS(t_test(1.0, 0.0, 10, 0.0, 0.05), Error);
    const double z = 1.9599639845400542355;
    CHECK_THAT(t_test(z * (1 + 1e-9), 1.0, 1, 0.0, 0.05).p_value, WithinAbs(0.05, 1e-9));
    CHECK(t_test(z * (1 + 1e-9), 1.0, 1, 0.0, 0.05).reject);
    CHECK_FALSE(t_test(z * (1 - 1e-9), 1.0, 1, 0.0, 0.05).reject);
}

TEST_CASE("confidence interval") {
    const auto [lo, hi] = confidence_interval(3.0, 4.0, 100, 0.05);
    CHECK_THAT(hi - lo, WithinRel(2 * 1.9599639845400542355 * 0.2, 1e-12));
    CHECK_THAT(0.5 * (lo + hi), WithinAbs(3.0, 1e-15));
    const auto [a, b] = confidence_interval(1.0, 0.0, 10, 0.05);
    CHECK(a == 1.0);
    CHECK(b == 1.0);
}

TEST_CASE("wald with l = 1 agrees with the two-sided normal test") {
    RandomStream rng(1, 0);
    for (int t = 0; t < 2000; ++t) {
        const double est = rng.normal(), var = 0.1 + rng.uniform(), alpha = 0.01 + 0.2 * rng.uniform();
        const std::size_t n = 1 + rng.below(200);
        const auto w = wald_test(vec({est}), report(Matrix::Constant(1, 1, var)), Matrix::Identity(1, 1), vec({0}), n, alpha);
        const auto z = t_test(est, var, n, 0.0, alpha);
        REQUIRE(w.reject == z.reject);
        REQUIRE_THAT(w.p_value, WithinRel(z.p_value, 1e-9) || WithinAbs(z.p_value, 1e-15));
    }
}

TEST_CASE("p-values fall as the statistic grows and rejection is monotone in alpha") {
    double last = 2.0;
    for (double est = 0.0; est < 5.0; est += 0.05) {
        const auto r = t_test(est, 1.0, 1, 0.0, 0.05);
        CHECK(r.p_value < last);
        last = r.p_value;
        if (r.reject) CHECK(t_test(est, 1.0, 1, 0.0, 0.1).reject);
    }
}

TEST_CASE("wald statistic is scale invariant") {
    RandomStream rng(2, 0);
    auto [s, p] = testsupport::random_matched_tuples(rng, 4, 10);
    const Contrast nu = parse_contrast("rows:-1,1,0,0;-1,0,1,0", 4);
    const auto stat = [&](const Sample& x) {
        const auto rep = v_hat_adjusted(x, p, nu);
        return wald_test(delta_hat(gamma_hat(x), nu), rep, Matrix::Identity(2, 2), vec({0, 0}), rep.n, 0.05).statistic;
    };
    std::vector<double> y(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) y[i] = 3.5 * s.outcome(i);
    CHECK_THAT(stat(s.with_outcomes(y)), WithinRel(stat(s), 1e-9));
}
