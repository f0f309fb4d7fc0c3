// Block 400 simulated units into matched quadruplets, run a 2x2 factorial
// experiment and test both main effects.

#include "tupleworks/assign.hpp"
#include "tupleworks/blocking.hpp"
#include "tupleworks/estimate.hpp"
#include "tupleworks/inference.hpp"
#include "tupleworks/simlab.hpp"
#include "tupleworks/variance.hpp"

#include <cstdio>

using namespace tupleworks;

int main() {
    const auto dgp = DgpSpec::benchmark(Model::M1, 0.2);
    const auto po = draw_potential_outcomes(dgp, 400, 42);

    const Sample units(po.ids, po.covariates, 4);
    const auto blocks = block_by_ordering(units, 4);
    const auto diag = diagnose(units, blocks);
    std::printf("%zu blocks, within_stat %.4g\n", blocks.num_blocks(), diag.within_stat);

    const auto plan = assign_matched_tuples(blocks, 4, 7);
    const auto observed = reveal(po, plan.arms);

    const auto nu = stack_contrasts({parse_contrast("main:1", 4), parse_contrast("main:2", 4)});
    const Vector est = delta_hat(gamma_hat(observed), nu);
    const auto v = v_hat_adjusted(observed, blocks, nu);
    for (const auto& w : v.warnings) std::printf("warning: %s\n", w.c_str());

    const auto truth = true_delta(dgp, nu);
    for (Eigen::Index r = 0; r < est.size(); ++r) {
        const auto t = t_test(est(r), v.v_contrast(r, r), v.n, 0.0, 0.05);
        const auto ci = confidence_interval(est(r), v.v_contrast(r, r), v.n, 0.05);
        std::printf("main effect %ld: estimate %.4f (truth %.4f), 95%% CI [%.4f, %.4f], p = %.4g\n",
                    static_cast<long>(r + 1), est(r), truth(r), ci.first, ci.second, t.p_value);
    }
    const auto joint = wald_test(est, v, Matrix::Identity(2, 2), Vector::Zero(2), v.n, 0.05);
    std::printf("joint Wald: T = %.3f on %d df, p = %.4g\n", joint.statistic, *joint.df, joint.p_value);
}
