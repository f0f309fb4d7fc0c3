#include "catch_amalgamated.hpp"
#include "tupleworks/distributions.hpp"

using namespace tupleworks;
using Catch::Matchers::WithinRel;
using Catch::Matchers::WithinAbs;

// Reference values computed once with mpmath at 40 digits.

TEST_CASE("regularized incomplete gamma") {
    struct Row { double a, x, p, q; };
    const Row rows[] = {
        {0.5, 0.1, 0.34527915398142297956, 0.65472084601857702044},
        {1, 1, 0.6321205588285576784, 0.3678794411714423216},
        {2.5, 3, 0.69378108158672159912, 0.30621891841327840088},
        {10, 5, 0.031828057306204811737, 0.96817194269379518826},
        {10, 15, 0.93014633930059023231, 0.069853660699409767692},
        {50, 45, 0.24680203440017027271, 0.75319796559982972729},
        {0.1, 2, 0.99432617602018847196, 0.0056738239798115280392},
    };
    for (const auto& r : rows) {
        CHECK_THAT(gamma_p(r.a, r.x), WithinRel(r.p, 1e-10));
        CHECK_THAT(gamma_q(r.a, r.x), WithinRel(r.q, 1e-10));
    }
    CHECK(gamma_p(2, 0) == 0.0);
    CHECK(gamma_q(2, 0) == 1.0);
}

TEST_CASE("normal cdf and quantile") {
    const std::pair<double, double> cdf[] = {
        {-8, 6.2209605742717841235e-16}, {-3, 0.0013498980316300945267}, {-1.5, 0.066807201268858066004},
        {0, 0.5}, {0.7, 0.75803634777692697138}, {2, 0.9772498680518207928}, {5, 0.99999971334842812081}};
    for (auto [x, p] : cdf) CHECK_THAT(normal_cdf(x), WithinRel(p, 1e-10));
    const std::pair<double, double> q[] = {
        {1e-10, -6.3613409024040561991}, {1e-4, -3.7190164854556805523}, {0.025, -1.9599639845400542355},
        {0.3, -0.52440051270804081597}, {0.9, 1.2815515655446005935}, {0.975, 1.9599639845400542355},
        {0.999999, 4.7534243088170877657}};
    for (auto [p, x] : q) CHECK_THAT(normal_quantile(p), WithinRel(x, 1e-10));
    CHECK_THAT(normal_quantile(0.5), WithinAbs(0.0, 1e-15));
}

TEST_CASE("chi-square cdf, survival and density") {
    struct Row { double x, k, cdf, sf, pdf; };
    const Row rows[] = {
        {3.841458820694124, 1, 0.94999999999999994256, 0.050000000000000057435, 0.0298194611054298361},
        {5.991464547107979, 2, 0.94999999999999992643, 0.050000000000000073572, 0.025000000000000036786},
        {1, 3, 0.19874804309879919757, 0.80125195690120080243, 0.24197072451914336634},
        {20, 10, 0.97074731192303892733, 0.029252688076961072673, 0.0094583187005176774032},
        {0.01, 1, 0.079655674554057963757, 0.92034432544594203624, 3.9695254747701178014},
        {100, 80, 0.93542963107886702424, 0.064570368921132975762, 0.0085998524787311925511},
    };
    for (const auto& r : rows) {
        CHECK_THAT(chi2_cdf(r.x, r.k), WithinRel(r.cdf, 1e-10));
        CHECK_THAT(chi2_sf(r.x, r.k), WithinRel(r.sf, 1e-10));
        CHECK_THAT(chi2_pdf(r.x, r.k), WithinRel(r.pdf, 1e-10));
    }
}

TEST_CASE("chi-square quantile") {
    struct Row { double p, k, x; };
    const Row rows[] = {{0.95, 1, 3.8414588206941244691}, {0.95, 2, 5.9914645471079802105},
                        {0.99, 3, 11.34486673014437001},  {0.5, 10, 9.3418177655919674406},
                        {0.01, 4, 0.29710948050653189536}, {0.999, 20, 45.31474661812585865}};
    for (const auto& r : rows) CHECK_THAT(chi2_quantile(r.p, r.k), WithinRel(r.x, 1e-10));
}

TEST_CASE("quantiles invert their cdfs") {
    for (double p = 0.001; p < 1.0; p += 0.0371) {
        CHECK_THAT(normal_cdf(normal_quantile(p)), WithinRel(p, 1e-12));
        for (double k : {1.0, 2.0, 5.0, 30.0}) CHECK_THAT(chi2_cdf(chi2_quantile(p, k), k), WithinRel(p, 1e-10));
    }
}
