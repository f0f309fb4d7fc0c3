#pragma once

// Wald and two-sided normal tests, and normal confidence intervals, for
// contrast estimates with variances on the sqrt(n) scale.

#include "tupleworks/core.hpp"
#include "tupleworks/distributions.hpp"
#include "tupleworks/variance.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace tupleworks {

struct TestResult {
    double statistic = 0.0;
    std::optional<int> df;  ///< chi-square degrees of freedom; empty for normal tests
    double p_value = 1.0;
    bool reject = false;
    std::string method;
    double critical_value = 0.0;
    std::vector<std::string> warnings;
};

/// T = n (Psi d - Psi d0)' (Psi V Psi')^{-1} (Psi d - Psi d0), compared with
/// the 1 - alpha quantile of chi2_l, l = rows of Psi. A pseudo-inverse is used
/// (with a warning) when the middle matrix has condition number above 1e12.
inline TestResult wald_test(const Vector& delta_hat, const VarianceReport& v, const Matrix& psi, const Vector& delta0,
                            std::size_t n, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw Error("wald_test: alpha must lie in (0, 1)");
    const auto m = delta_hat.size();
    const auto l = psi.rows();
    if (psi.cols() != m || v.v_contrast.rows() != m || v.v_contrast.cols() != m || delta0.size() != m)
        throw Error("wald_test: dimension mismatch between estimate, variance, Psi and null value");
    if (l < 1) throw Error("wald_test: Psi has no rows");
    if (Eigen::FullPivLU<Matrix>(psi).rank() < l) throw Error("wald_test: Psi does not have full row rank");

    TestResult r;
    r.method = "wald/" + to_string(v.method);
    r.warnings = v.warnings;
    const Matrix mid = psi * v.v_contrast * psi.transpose();
    Eigen::SelfAdjointEigenSolver<Matrix> eig(0.5 * (mid + mid.transpose()));
    const Vector& ev = eig.eigenvalues();
    const double top = ev.cwiseAbs().maxCoeff();
    if (!(top > 0.0)) throw Error("wald_test: degenerate variance (Psi V Psi' is zero)");
    const double tol = top * 1e-12;
    const double low = ev.cwiseAbs().minCoeff();
    Vector inv(ev.size());
    if (low <= tol) {
        std::ostringstream w;
        w << "Psi V Psi' is near singular (condition number " << (low > 0.0 ? top / low : INFINITY)
          << "); pseudo-inverse used, df kept at " << l;
        r.warnings.push_back(w.str());
        for (Eigen::Index k = 0; k < ev.size(); ++k) inv(k) = std::fabs(ev(k)) > tol ? 1.0 / ev(k) : 0.0;
    } else {
        inv = ev.cwiseInverse();
    }
    const Vector diff = psi * (delta_hat - delta0);
    const Vector z = eig.eigenvectors().transpose() * diff;
    r.statistic = static_cast<double>(n) * z.dot(inv.asDiagonal() * z);
    r.df = static_cast<int>(l);
    r.critical_value = chi2_quantile(1.0 - alpha, static_cast<double>(l));
    r.p_value = chi2_sf(r.statistic, static_cast<double>(l));
    r.reject = r.statistic > r.critical_value;
    return r;
}

/// Two-sided normal test of estimate = delta0, T = sqrt(n)(estimate - delta0)/sqrt(V).
inline TestResult t_test(double estimate, double variance, std::size_t n, double delta0, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw Error("t_test: alpha must lie in (0, 1)");
    if (!(variance > 0.0)) throw Error("t_test: degenerate variance (" + std::to_string(variance) + ")");
    if (n == 0) throw Error("t_test: n must be positive");
    TestResult r;
    r.method = "normal";
    r.statistic = std::sqrt(static_cast<double>(n)) * (estimate - delta0) / std::sqrt(variance);
    r.critical_value = normal_quantile(1.0 - alpha / 2.0);
    r.p_value = std::erfc(std::fabs(r.statistic) / std::numbers::sqrt2);
    r.reject = std::fabs(r.statistic) > r.critical_value;
    return r;
}

/// estimate -/+ z_{1-alpha/2} sqrt(V/n).
inline std::pair<double, double> confidence_interval(double estimate, double variance, std::size_t n, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw Error("confidence_interval: alpha must lie in (0, 1)");
    if (variance < 0.0) throw Error("confidence_interval: negative variance");
    if (n == 0) throw Error("confidence_interval: n must be positive");
    const double half = normal_quantile(1.0 - alpha / 2.0) * std::sqrt(variance / static_cast<double>(n));
    return {estimate - half, estimate + half};
}

}  // namespace tupleworks
