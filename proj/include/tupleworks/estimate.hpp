#pragma once

// Arm means, contrast estimates and factorial contrast builders, plus the
// small text syntax used to name contrasts on the command line.

#include "tupleworks/core.hpp"

#include <charconv>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace tupleworks {

struct GammaHat {
    Vector values;
    std::size_t n = 0;                ///< scaling basis: total units / number of arms
    std::vector<std::size_t> counts;  ///< units per arm
};

/// ArmCount divides by the number of units in each arm (the usual sample
/// mean). Nominal divides every arm by n = units / arms, which is what the
/// factor-specific matched-pairs estimator uses when arm counts are random.
enum class MeanBasis { ArmCount, Nominal };

inline GammaHat gamma_hat(const Sample& s, MeanBasis basis = MeanBasis::ArmCount) {
    const int A = s.num_arms();
    GammaHat g;
    g.values = Vector::Zero(A);
    g.counts.assign(static_cast<std::size_t>(A), 0);
    for (std::size_t i = 0; i < s.size(); ++i) {
        const Arm a = s.arm(i);
        g.values(a - 1) += s.outcome(i);
        ++g.counts[static_cast<std::size_t>(a - 1)];
    }
    g.n = s.size() / static_cast<std::size_t>(A);
    for (int d = 0; d < A; ++d) {
        const auto c = g.counts[static_cast<std::size_t>(d)];
        if (c == 0) throw Error("gamma_hat: arm " + std::to_string(d + 1) + " has no observations");
        g.values(d) /= (basis == MeanBasis::ArmCount) ? static_cast<double>(c) : static_cast<double>(g.n);
    }
    return g;
}

inline Vector delta_hat(const GammaHat& g, const Contrast& nu) {
    if (nu.arms() != g.values.size())
        throw Error("delta_hat: contrast has " + std::to_string(nu.arms()) + " columns but there are " +
                    std::to_string(g.values.size()) + " arms");
    return nu.matrix * g.values;
}

namespace detail {

inline double factorial_scale(const FactorSpace& fs, bool rescale) {
    return rescale ? std::ldexp(1.0, -(fs.factors() - 1)) : 1.0;
}

}  // namespace detail

/// Row d equals the level of factor k under arm d.
inline Contrast main_effect_contrast(int k, const FactorSpace& fs, bool rescale = false) {
    if (k < 1 || k > fs.factors())
        throw Error("main effect: factor " + std::to_string(k) + " outside 1.." + std::to_string(fs.factors()));
    Matrix m(1, fs.arm_count());
    for (Arm d = 1; d <= fs.arm_count(); ++d) m(0, d - 1) = fs.level(d, k);
    m *= detail::factorial_scale(fs, rescale);
    return {m, "main:" + std::to_string(k)};
}

/// Element-wise product of the main-effect rows of the listed factors.
inline Contrast interaction_contrast(const std::set<int>& factors, const FactorSpace& fs, bool rescale = false) {
    if (factors.empty()) throw Error("interaction: empty factor set");
    Matrix m = Matrix::Ones(1, fs.arm_count());
    std::string label = "inter:";
    for (int k : factors) {
        m.array() *= main_effect_contrast(k, fs).matrix.array();
        if (label.back() != ':') label += ",";
        label += std::to_string(k);
    }
    m *= detail::factorial_scale(fs, rescale);
    return {m, label};
}

/// Effect of factor k with the factors in `fixed` held at the given levels:
/// +w on matching arms with factor k high, -w with k low, w = 1 / (number of
/// matching high arms).
inline Contrast conditional_effect_contrast(int k, const std::map<int, int>& fixed, const FactorSpace& fs) {
    if (k < 1 || k > fs.factors())
        throw Error("conditional effect: factor " + std::to_string(k) + " outside 1.." + std::to_string(fs.factors()));
    if (fixed.count(k)) throw Error("conditional effect: factor " + std::to_string(k) + " cannot also be held fixed");
    for (auto [f, lv] : fixed) {
        if (f < 1 || f > fs.factors())
            throw Error("conditional effect: fixed factor " + std::to_string(f) + " out of range");
        if (lv != -1 && lv != 1) throw Error("conditional effect: fixed levels must be -1 or +1");
    }
    Matrix m = Matrix::Zero(1, fs.arm_count());
    int highs = 0;
    for (Arm d = 1; d <= fs.arm_count(); ++d) {
        bool match = true;
        for (auto [f, lv] : fixed) match = match && fs.level(d, f) == lv;
        if (!match) continue;
        const int lk = fs.level(d, k);
        m(0, d - 1) = lk;
        if (lk == 1) ++highs;
    }
    m /= static_cast<double>(highs);
    std::string label = "cond:" + std::to_string(k);
    char sep = '|';
    for (auto [f, lv] : fixed) {
        label += sep + std::to_string(f) + (lv > 0 ? "=+1" : "=-1");
        sep = ',';
    }
    return {m, label};
}

/// +1 at arm d, -1 at arm d0.
inline Contrast pairwise_contrast(Arm d, Arm d0, int num_arms) {
    if (d < 1 || d > num_arms || d0 < 1 || d0 > num_arms)
        throw Error("pairwise contrast: arms must lie in 1.." + std::to_string(num_arms));
    if (d == d0) throw Error("pairwise contrast: the two arms must differ");
    Matrix m = Matrix::Zero(1, num_arms);
    m(0, d - 1) = 1.0;
    m(0, d0 - 1) = -1.0;
    return {m, "pair:" + std::to_string(d) + "," + std::to_string(d0)};
}

/// Stack contrasts row-wise.
inline Contrast stack_contrasts(const std::vector<Contrast>& parts) {
    if (parts.empty()) throw Error("stack_contrasts: nothing to stack");
    Eigen::Index rows = 0;
    for (const auto& c : parts) {
        if (c.arms() != parts.front().arms()) throw Error("stack_contrasts: column counts differ");
        rows += c.rows();
    }
    Matrix m(rows, parts.front().arms());
    std::string label;
    Eigen::Index r = 0;
    for (const auto& c : parts) {
        m.middleRows(r, c.rows()) = c.matrix;
        r += c.rows();
        label += (label.empty() ? "" : " ; ") + c.label;
    }
    return {m, label};
}

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = s.find(sep, start);
        out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline int parse_int(std::string_view s, std::string_view what) {
    s = trim(s);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    int v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
        throw Error("contrast: expected an integer for " + std::string(what) + ", got '" + std::string(s) + "'");
    return v;
}

inline double parse_real(std::string_view s, std::string_view what) {
    s = trim(s);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty())
        throw Error("contrast: expected a number for " + std::string(what) + ", got '" + std::string(s) + "'");
    return v;
}

inline FactorSpace factor_space_for(int num_arms, std::string_view token) {
    int K = 0;
    while ((1 << K) < num_arms && K < 30) ++K;
    if (K < 1 || (1 << K) != num_arms)
        throw Error("contrast: '" + std::string(token) + "' needs a factorial arm count (2^K), got " +
                    std::to_string(num_arms) + " arms");
    return FactorSpace(K);
}

}  // namespace detail

/// Parse one contrast token:
///   main:k            main effect of factor k
///   inter:1,2         interaction of the listed factors
///   cond:k|2=+1       effect of k with other factors held fixed (comma-separated)
///   pair:d,d0         arm d minus arm d0
///   rows:a,b,c;e,f,g  explicit matrix, rows separated by ';'
/// `rescale` applies 2^-(K-1) to main and interaction contrasts.
inline Contrast parse_contrast(std::string_view token, int num_arms, bool rescale = false) {
    token = detail::trim(token);
    const auto colon = token.find(':');
    if (colon == std::string_view::npos)
        throw Error("contrast: unknown token '" + std::string(token) +
                    "' (expected main:, inter:, cond:, pair: or rows:)");
    const auto kind = token.substr(0, colon);
    const auto body = token.substr(colon + 1);

    if (kind == "main") {
        const auto fs = detail::factor_space_for(num_arms, token);
        return main_effect_contrast(detail::parse_int(body, "factor"), fs, rescale);
    }
    if (kind == "inter") {
        const auto fs = detail::factor_space_for(num_arms, token);
        std::set<int> factors;
        for (auto part : detail::split(body, ',')) factors.insert(detail::parse_int(part, "factor"));
        return interaction_contrast(factors, fs, rescale);
    }
    if (kind == "cond") {
        const auto fs = detail::factor_space_for(num_arms, token);
        const auto bar = body.find('|');
        const int k = detail::parse_int(body.substr(0, bar), "factor");
        std::map<int, int> fixed;
        if (bar != std::string_view::npos) {
            for (auto part : detail::split(body.substr(bar + 1), ',')) {
                const auto eq = part.find('=');
                if (eq == std::string_view::npos)
                    throw Error("contrast: expected factor=level in '" + std::string(part) + "'");
                const int f = detail::parse_int(part.substr(0, eq), "factor");
                if (!fixed.emplace(f, detail::parse_int(part.substr(eq + 1), "level")).second)
                    throw Error("contrast: factor " + std::to_string(f) + " fixed twice");
            }
        }
        return conditional_effect_contrast(k, fixed, fs);
    }
    if (kind == "pair") {
        const auto parts = detail::split(body, ',');
        if (parts.size() != 2) throw Error("contrast: pair needs exactly two arms, got '" + std::string(body) + "'");
        return pairwise_contrast(detail::parse_int(parts[0], "arm"), detail::parse_int(parts[1], "arm"), num_arms);
    }
    if (kind == "rows") {
        const auto rows = detail::split(body, ';');
        Matrix m(static_cast<Eigen::Index>(rows.size()), num_arms);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto cells = detail::split(rows[r], ',');
            if (static_cast<int>(cells.size()) != num_arms)
                throw Error("contrast: row " + std::to_string(r + 1) + " has " + std::to_string(cells.size()) +
                            " entries, expected " + std::to_string(num_arms));
            for (std::size_t c = 0; c < cells.size(); ++c)
                m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = detail::parse_real(cells[c], "entry");
        }
        return {m, std::string(token)};
    }
    throw Error("contrast: unknown token '" + std::string(token) +
                "' (expected main:, inter:, cond:, pair: or rows:)");
}

}  // namespace tupleworks
