#include "catch_amalgamated.hpp"
#include "support.hpp"
#include "tupleworks/simlab.hpp"

using namespace tupleworks;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

const Model scalar_models[] = {Model::M1, Model::M2, Model::M3, Model::M4, Model::M5, Model::M6};

Contrast param(const std::string& token, bool rescale = true) {
    auto c = parse_contrast(token, 4, rescale);
    c.label = token;
    return c;
}

const char* five_params[] = {"main:1", "main:2", "inter:1,2", "cond:1|2=+1", "cond:1|2=-1"};

}  // namespace

TEST_CASE("model 1 arm shifts") {
    const auto dgp = DgpSpec::benchmark(Model::M1, 0.2);
    CHECK_THAT(dgp.mu(4), WithinAbs(0.4, 1e-15));
    CHECK_THAT(dgp.mu(3), WithinAbs(0.2, 1e-15));
    CHECK_THAT(dgp.mu(2), WithinAbs(0.1, 1e-15));
    CHECK(dgp.mu(1) == 0.0);
    CHECK_THAT(dgp.mu(4), WithinAbs(2 * dgp.mu(3), 1e-15));
    CHECK_THAT(dgp.mu(4), WithinAbs(4 * dgp.mu(2), 1e-15));
}

TEST_CASE("model 1 with tau = 0 has no treatment effect") {
    const auto dgp = DgpSpec::benchmark(Model::M1, 0.0);
    const auto po = draw_potential_outcomes(dgp, 100000, 12);
    for (Arm d = 2; d <= 4; ++d) {
        const Vector diff = po.outcomes.col(d - 1) - po.outcomes.col(0);
        const double m = diff.mean();
        const double sd = std::sqrt((diff.array() - m).square().sum() / (diff.size() - 1));
        CHECK(std::fabs(m) <= 3 * sd / std::sqrt(double(diff.size())) + 1e-15);
        for (Eigen::Index i = 0; i < 100; ++i) CHECK(po.outcomes(i, d - 1) == po.outcomes(i, 0));
    }
    CHECK(po.covariates.cols() == 1);
}

TEST_CASE("model 6 noise scale") {
    const auto dgp = DgpSpec::benchmark(Model::M6, 0.0);
    CHECK(dgp.noise_scale(1, 2.0) == -4.0);
    CHECK(dgp.noise_scale(2, 2.0) == 4.0);
    CHECK(dgp.noise_scale(3, 2.0) == 4.0);
    CHECK(dgp.noise_scale(4, 2.0) == 12.0);
    // Recover eps from arm 1 and check it is standard normal, so Var(Y(1) | X) = X^4.
    const auto po = draw_potential_outcomes(dgp, 200000, 5);
    double s = 0, s2 = 0;
    int used = 0;
    for (Eigen::Index i = 0; i < po.outcomes.rows(); ++i) {
        const double x = po.covariates(i, 0);
        if (std::fabs(x) < 0.2) continue;
        const double e = (po.outcomes(i, 0) - dgp.mu(1) - dgp.conditional_shape(1, x)) / dgp.noise_scale(1, x);
        s += e, s2 += e * e, ++used;
    }
    CHECK_THAT(s2 / used - (s / used) * (s / used), WithinAbs(1.0, 0.02));
}

TEST_CASE("draws are reproducible") {
    const auto dgp = DgpSpec::benchmark(Model::M5, 0.3);
    const auto a = draw_potential_outcomes(dgp, 50, 9), b = draw_potential_outcomes(dgp, 50, 9);
    CHECK(a.outcomes == b.outcomes);
    CHECK(a.covariates == b.covariates);
}

TEST_CASE("true delta agrees with a large Monte Carlo") {
    for (Model m : scalar_models) {
        const auto dgp = DgpSpec::benchmark(m, 0.2);
        const auto po = draw_potential_outcomes(dgp, 1000000, 77);
        for (const char* tok : five_params) {
            const auto nu = param(tok);
            const Vector per_unit = po.outcomes * nu.matrix.transpose();
            const double mean = per_unit.mean();
            const double sd = std::sqrt((per_unit.array() - mean).square().sum() / (per_unit.size() - 1));
            INFO(to_string(m) << " " << tok);
            CHECK(std::fabs(mean - true_delta(dgp, nu)(0)) <= 3 * sd / 1000.0 + 1e-10);
        }
    }
}

TEST_CASE("analytic oracle: matched tuples") {
    const auto mt = parse_design("MT");
    const auto m1 = DgpSpec::benchmark(Model::M1, 0.0);
    const auto o1 = oracle_variance(m1, mt, param("main:1", false));
    CHECK_THAT(o1.v_nu(0, 0), WithinAbs(4.0, 1e-9));
    CHECK_THAT((param("main:1", false).matrix * o1.v2 * param("main:1", false).matrix.transpose())(0, 0), WithinAbs(0.0, 1e-9));
    const auto m3 = DgpSpec::benchmark(Model::M3, 0.0);
    const auto o3 = oracle_variance(m3, mt, pairwise_contrast(4, 1, 4));
    CHECK_THAT(o3.v_nu(0, 0), WithinAbs(4.25, 1e-9));
    CHECK_THROWS_AS(oracle_variance(m1, parse_design("RE"), param("main:1")), Error);
}

TEST_CASE("analytic oracle: single stratum is the two-sample limit") {
    const auto m1 = DgpSpec::benchmark(Model::M1, 0.0);
    const auto o = oracle_variance(m1, parse_design("C"), pairwise_contrast(4, 1, 4));
    // Var Y(4) + Var Y(1) = 2 + 2
    CHECK_THAT(o.v_nu(0, 0), WithinAbs(4.0, 1e-9));
    CHECK(o.vh2->cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("analytic oracle: factor-specific pairs") {
    const auto mp = parse_design("MP-B");
    CHECK_THAT(oracle_variance(DgpSpec::benchmark(Model::M1, 0.0), mp, param("main:1", false)).v_nu(0, 0), WithinAbs(4.0, 1e-9));
    const auto o = oracle_variance(DgpSpec::benchmark(Model::M1, 0.2), mp, param("main:1", false));
    CHECK_THAT(*o.xi1, WithinAbs(0.02, 1e-10));
    CHECK_THAT(*o.xi0, WithinAbs(0.005, 1e-10));
    CHECK_THAT(o.v_nu(0, 0), WithinAbs(4.025, 1e-9));
    CHECK_THROWS_AS(oracle_variance(DgpSpec::benchmark(Model::M1, 0.2), mp, param("main:2")), Error);
}

TEST_CASE("quadrature moments agree with Monte Carlo for the sine models") {
    for (Model m : {Model::M4, Model::M5}) {
        const auto dgp = DgpSpec::benchmark(m, 0.2);
        const auto o = oracle_variance(dgp, parse_design("MT"), {Matrix::Identity(4, 4), ""});
        RandomStream rng(derive_seed(3, to_string(m)), 0);
        const int N = 2000000;
        Vector mean = Vector::Zero(4);
        Matrix cross = Matrix::Zero(4, 4);
        Vector g(4);
        for (int i = 0; i < N; ++i) {
            const double x = rng.normal();
            for (Arm d = 1; d <= 4; ++d) g(d - 1) = dgp.mu(d) + dgp.conditional_shape(d, x);
            mean += g;
            cross += g * g.transpose();
        }
        mean /= N;
        cross /= N;
        const Matrix v2 = (cross - mean * mean.transpose()) / 4.0;
        INFO(to_string(m));
        CHECK((v2 - o.v2).cwiseAbs().maxCoeff() < 3e-3);
        CHECK((o.v1 - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("stratified oracle variance is never below the matched-tuples variance") {
    std::vector<DgpSpec> dgps;
    for (Model m : scalar_models) dgps.push_back(DgpSpec::benchmark(m, 0.2));
    dgps.push_back(DgpSpec::calibrated(2, 2, 0.2));
    dgps.push_back(DgpSpec::calibrated(3, 9, 0.1));
    for (const auto& dgp : dgps) {
        std::vector<Contrast> rows;
        if (dgp.K == 2)
            for (const char* tok : five_params) rows.push_back(param(tok));
        rows.push_back(pairwise_contrast(dgp.arm_count(), 1, dgp.arm_count()));
        for (const char* id : {"C", "B-B", "Large-2", "Large-4"}) {
            for (const auto& nu : rows) {
                const double v = oracle_variance(dgp, parse_design("MT"), nu).v_nu(0, 0);
                const double vh = oracle_variance(dgp, parse_design(id), nu).v_nu(0, 0);
                INFO(to_string(dgp.model) << " " << id << " " << nu.label);
                CHECK(vh >= v - 1e-10);
                CHECK(v >= 0.0);
            }
        }
    }
}

TEST_CASE("more strata never increase the stratified oracle variance") {
    const auto dgp = DgpSpec::benchmark(Model::M3, 0.0);
    const auto nu = pairwise_contrast(4, 1, 4);
    const double c = oracle_variance(dgp, parse_design("C"), nu).v_nu(0, 0);
    const double l2 = oracle_variance(dgp, parse_design("Large-2"), nu).v_nu(0, 0);
    const double l4 = oracle_variance(dgp, parse_design("Large-4"), nu).v_nu(0, 0);
    CHECK(c >= l2);
    CHECK(l2 >= l4);
}

TEST_CASE("calibrated linear model") {
    const auto k1 = DgpSpec::calibrated(1, 3, 0.5);
    CHECK(k1.arm_count() == 2);
    CHECK(k1.mu(2) == 0.5);
    CHECK(k1.mu(1) == -0.5);
    const auto k3 = DgpSpec::calibrated(3, 2, 1.0);
    // arm (+1,+1,-1): 1 + (1 - 1)/2
    CHECK_THAT(k3.mu(k3.factor_space().arm_of_levels(std::vector<int>{1, 1, -1})), WithinAbs(1.0, 1e-15));
    CHECK(k3.gamma(k3.factor_space().arm_of_levels(std::vector<int>{1, -1, 1})) == -1.0);
    const auto po = draw_potential_outcomes(k3, 10, 1);
    CHECK(po.covariates.cols() == 2);
    CHECK(po.outcomes.cols() == 8);

    // Matched-tuples variance of a pairwise contrast: nu V1 nu' = 2 (|beta_rest|^2 + 0.1)
    const auto b = default_calibration_beta();
    const double rest = b.tail(7).squaredNorm();
    const auto o = oracle_variance(k3, parse_design("MT"), pairwise_contrast(2, 1, 8));
    CHECK_THAT(o.v1(0, 0), WithinRel(rest + 0.1, 1e-12));

    Matrix pool(5, 9);
    for (Eigen::Index i = 0; i < 5; ++i)
        for (Eigen::Index k = 0; k < 9; ++k) pool(i, k) = double(i * i) + double(k);
    const auto pooled = DgpSpec::calibrated(2, 3, 0.2, pool);
    CHECK(pooled.covariate_pool->colwise().mean().cwiseAbs().maxCoeff() < 1e-12);
    const auto pd = draw_potential_outcomes(pooled, 20, 4);
    for (Eigen::Index i = 0; i < 20; ++i) {
        bool found = false;
        for (Eigen::Index r = 0; r < 5; ++r) found = found || pd.covariates.row(i) == pooled.covariate_pool->row(r).head(3);
        CHECK(found);
    }
    CHECK_THROWS_AS(oracle_variance(pooled, parse_design("MT"), pairwise_contrast(2, 1, 4)), Error);
    CHECK_THROWS_AS(DgpSpec::calibrated(2, 3, 0.2, Matrix::Zero(5, 4)), Error);
    CHECK_THROWS_AS(DgpSpec::calibrated(2, 10, 0.2), Error);
}

TEST_CASE("design ids") {
    CHECK(parse_design("Large-4").strata == 4);
    CHECK(parse_design("MP-2").factor == 2);
    CHECK(parse_design("MP-k", 2).factor == 2);
    try {
        parse_design("XYZ");
        FAIL("expected error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("MT2") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_design("Large-0"), Error);
}

TEST_CASE("quantile strata") {
    Matrix x(8, 1);
    x << 5, 1, 7, 3, 2, 8, 4, 6;
    CHECK(quantile_strata(x, 2) == std::vector<int>{1, 0, 1, 0, 0, 1, 0, 1});
    CHECK(quantile_strata(x, 4) == std::vector<int>{2, 0, 3, 1, 0, 3, 1, 2});
}

TEST_CASE("simulated MSE tracks the analytic variance") {
    StudyConfig cfg;
    cfg.dgp = DgpSpec::benchmark(Model::M3, 0.0);
    cfg.designs = {"MT", "C", "Large-2", "MP-B", "B-B", "MT2"};
    cfg.parameters = {"main:1", "cond:1|2=+1"};
    cfg.n = 1200;
    cfg.R = 600;
    cfg.seed = 2024;
    const auto rep = run_mse_study(cfg);
    const double n = 300;
    for (const auto& id : cfg.designs) {
        for (const auto& tok : cfg.parameters) {
            const auto design = parse_design(id);
            if (design.code == DesignCode::MP && tok != "main:1") continue;
            const double oracle = oracle_variance(cfg.dgp, design, param(tok)).v_nu(0, 0);
            INFO(id << " " << tok << " oracle " << oracle << " simulated " << n * rep.cell(id, tok).mse);
            CHECK_THAT(n * rep.cell(id, tok).mse, WithinRel(oracle, 0.2));
        }
    }
}

TEST_CASE("study reports are deterministic across thread counts") {
    StudyConfig cfg;
    cfg.dgp = DgpSpec::benchmark(Model::M2, 0.0);
    cfg.designs = {"B-B", "C", "MT", "MT2", "Large-2", "MP-B"};
    cfg.n = 64;
    cfg.R = 40;
    cfg.seed = 5;
    cfg.threads = 1;
    const auto a = run_size_power_study(cfg);
    cfg.threads = 3;
    const auto b = run_size_power_study(cfg);
    REQUIRE(a.cells.size() == b.cells.size());
    for (std::size_t i = 0; i < a.cells.size(); ++i) {
        const auto &x = a.cells[i], &y = b.cells[i];
        CHECK(x.mse == y.mse);
        CHECK((x.rejection_null == y.rejection_null || (std::isnan(x.rejection_null) && std::isnan(y.rejection_null))));
        CHECK((x.rejection_alt == y.rejection_alt || (std::isnan(x.rejection_alt) && std::isnan(y.rejection_alt))));
        if (x.design == "MT") CHECK(x.mse_ratio == 1.0);
        if (!std::isnan(x.rejection_null)) {
            CHECK(x.rejection_null >= 0.0);
            CHECK(x.rejection_null <= 1.0);
        }
    }
}

TEST_CASE("single replication and configuration errors") {
    StudyConfig cfg;
    cfg.dgp = DgpSpec::benchmark(Model::M1, 0.0);
    cfg.designs = {"MT", "C"};
    cfg.n = 40;
    cfg.R = 1;
    const auto rep = run_mse_study(cfg);
    CHECK(std::isnan(rep.cells.front().mse_se));
    CHECK_FALSE(rep.warnings.empty());

    cfg.designs = {"MT", "Nope"};
    CHECK_THROWS_AS(run_mse_study(cfg), Error);
    cfg.designs = {"MT2"};
    cfg.n = 36;
    CHECK_THROWS_AS(run_mse_study(cfg), Error);
    cfg.designs = {"MT"};
    cfg.parameters = {"rows:1,0,0,-1;0,1,-1,0"};
    CHECK_THROWS_AS(run_mse_study(cfg), Error);
}

TEST_CASE("power curve at tau = 0 reproduces the size column") {
    StudyConfig cfg;
    cfg.dgp = DgpSpec::benchmark(Model::M1, 0.0);
    cfg.designs = {"MT", "C"};
    cfg.parameters = {"main:1"};
    cfg.n = 80;
    cfg.R = 60;
    cfg.seed = 11;
    const auto size = run_size_power_study(cfg);
    const auto curve = run_power_curve(cfg, {0.0, 0.5});
    for (const auto& pt : curve) {
        CHECK(pt.rejection >= 0.0);
        CHECK(pt.rejection <= 1.0);
        if (pt.tau == 0.0) CHECK(pt.rejection == size.cell(pt.design, pt.parameter).rejection_null);
    }
    CHECK(curve.size() == 4);
}
