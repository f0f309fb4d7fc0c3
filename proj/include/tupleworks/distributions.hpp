#pragma once

// Normal and chi-square distribution functions backing critical values and
// p-values. Chi-square uses the regularized incomplete gamma function
// (series below a+1, Lentz continued fraction above); quantiles are found by
// safeguarded Newton iteration.

#include "tupleworks/core.hpp"

#include <cmath>
#include <limits>
#include <numbers>

namespace tupleworks {

namespace detail {

inline double gamma_p_series(double a, double x) {
    double term = 1.0 / a;
    double sum = term;
    for (int n = 1; n < 10000; ++n) {
        term *= x / (a + n);
        sum += term;
        if (std::fabs(term) < std::fabs(sum) * 1e-17) break;
    }
    return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

inline double gamma_q_fraction(double a, double x) {
    constexpr double tiny = 1e-300;
    double b = x + 1.0 - a;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < 10000; ++i) {
        const double an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if (std::fabs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < 1e-17) break;
    }
    return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace detail

/// Regularized lower incomplete gamma P(a, x).
inline double gamma_p(double a, double x) {
    if (!(a > 0.0)) throw Error("gamma_p: shape must be positive");
    if (x <= 0.0) return 0.0;
    if (std::isinf(x)) return 1.0;
    if (x < a + 1.0) return detail::gamma_p_series(a, x);
    return 1.0 - detail::gamma_q_fraction(a, x);
}

/// Regularized upper incomplete gamma Q(a, x) = 1 - P(a, x).
inline double gamma_q(double a, double x) {
    if (!(a > 0.0)) throw Error("gamma_q: shape must be positive");
    if (x <= 0.0) return 1.0;
    if (std::isinf(x)) return 0.0;
    if (x < a + 1.0) return 1.0 - detail::gamma_p_series(a, x);
    return detail::gamma_q_fraction(a, x);
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double normal_pdf(double x) {
    return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

/// Inverse standard normal CDF: Acklam's rational approximation polished by
/// two Halley steps on erfc.
inline double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw Error("normal_quantile: p must lie in (0, 1)");
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                   -2.759285104469687e+02, 1.383577518672690e+02,
                                   -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                   -1.556989798598866e+02, 6.680131188771972e+01,
                                   -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                   -2.400758277161838e+00, -2.549732539343734e+00,
                                   4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                   2.445134137142996e+00, 3.754408661907416e+00};
    constexpr double plow = 0.02425;
    double x;
    if (p < plow) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - plow) {
        const double q = p - 0.5;
        const double r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log1p(-p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    for (int it = 0; it < 2; ++it) {
        // residual evaluated in whichever tail keeps precision
        const double e = (x < 0.0) ? (normal_cdf(x) - p) : ((1.0 - p) - normal_cdf(-x));
        const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
        x = x - u / (1.0 + 0.5 * x * u);
    }
    return x;
}

inline double chi2_cdf(double x, double df) {
    if (!(df >= 1.0)) throw Error("chi2_cdf: df must be >= 1");
    return gamma_p(0.5 * df, 0.5 * x);
}

/// Upper tail 1 - F(x), computed without cancellation.
inline double chi2_sf(double x, double df) {
    if (!(df >= 1.0)) throw Error("chi2_sf: df must be >= 1");
    return gamma_q(0.5 * df, 0.5 * x);
}

inline double chi2_pdf(double x, double df) {
    if (x <= 0.0) return 0.0;
    const double k = 0.5 * df;
    return std::exp((k - 1.0) * std::log(x) - 0.5 * x - k * std::numbers::ln2 - std::lgamma(k));
}

inline double chi2_quantile(double p, double df) {
    if (!(p > 0.0 && p < 1.0)) throw Error("chi2_quantile: p must lie in (0, 1)");
    if (!(df >= 1.0)) throw Error("chi2_quantile: df must be >= 1");
    const bool upper = p > 0.5;
    const double target = upper ? 1.0 - p : p;
    // f is increasing in x in both branches
    auto f = [&](double x) { return upper ? target - chi2_sf(x, df) : chi2_cdf(x, df) - target; };

    double lo = 0.0;
    double hi = std::max(1.0, df);
    while (f(hi) < 0.0) {
        lo = hi;
        hi *= 2.0;
        if (hi > 1e300) throw Error("chi2_quantile: failed to bracket");
    }
    // Wilson-Hilferty start, clamped into the bracket
    const double z = normal_quantile(p);
    const double h = 2.0 / (9.0 * df);
    double x = df * std::pow(1.0 - h + z * std::sqrt(h), 3.0);
    if (!(x > lo && x < hi)) x = 0.5 * (lo + hi);

    for (int it = 0; it < 200; ++it) {
        const double fx = f(x);
        if (fx == 0.0) return x;
        if (fx < 0.0) lo = x; else hi = x;
        const double dens = chi2_pdf(x, df);
        double next = (dens > 0.0) ? x - fx / dens : 0.5 * (lo + hi);
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        if (std::fabs(next - x) <= 1e-15 * std::max(1.0, std::fabs(x))) return next;
        x = next;
        if (hi - lo <= 1e-15 * std::max(1.0, hi)) return 0.5 * (lo + hi);
    }
    return x;
}

}  // namespace tupleworks
