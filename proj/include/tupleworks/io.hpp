#pragma once

// CSV reading and writing for samples, partitions and assignments.
// Sample files: id,x1,...,xp[,arm][,y]. Partition files: id,block.

#include "tupleworks/core.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace tupleworks {

struct CsvTable {
    std::string source;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
    std::vector<std::size_t> line_numbers;  ///< file line of each row (1-based)

    std::optional<std::size_t> find(const std::string& name) const {
        for (std::size_t c = 0; c < header.size(); ++c)
            if (header[c] == name) return c;
        return std::nullopt;
    }

    std::size_t require(const std::string& name) const {
        if (auto c = find(name)) return *c;
        throw Error(source + ": missing column '" + name + "'");
    }

    double number(std::size_t r, std::size_t c) const {
        const auto& cell = rows[r][c];
        std::string_view s = cell;
        if (!s.empty() && s.front() == '+') s.remove_prefix(1);
        double v = 0.0;
        const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v))
            throw Error(source + ": line " + std::to_string(line_numbers[r]) + ", column '" + header[c] +
                        "': expected a finite number, got '" + cell + "'");
        return v;
    }

    long integer(std::size_t r, std::size_t c) const {
        const auto& cell = rows[r][c];
        std::string_view s = cell;
        if (!s.empty() && s.front() == '+') s.remove_prefix(1);
        long v = 0;
        const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (s.empty() || ec != std::errc() || ptr != s.data() + s.size())
            throw Error(source + ": line " + std::to_string(line_numbers[r]) + ", column '" + header[c] +
                        "': expected an integer, got '" + cell + "'");
        return v;
    }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line, const std::string& source, std::size_t lineno) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') cur += '"', ++i;
            else if (ch == '"') quoted = false;
            else cur += ch;
        } else if (ch == '"' && cur.empty()) {
            quoted = true;
        } else if (ch == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    if (quoted) throw Error(source + ": line " + std::to_string(lineno) + ": unterminated quote");
    out.push_back(std::move(cur));
    for (auto& f : out) {
        while (!f.empty() && (f.back() == ' ' || f.back() == '\t')) f.pop_back();
        std::size_t b = 0;
        while (b < f.size() && (f[b] == ' ' || f[b] == '\t')) ++b;
        f.erase(0, b);
    }
    return out;
}

}  // namespace detail

inline CsvTable read_csv(std::istream& in, const std::string& source = "<input>") {
    CsvTable t;
    t.source = source;
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (lineno == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        auto fields = detail::split_csv_line(line, source, lineno);
        if (!have_header) {
            t.header = std::move(fields);
            std::map<std::string, int> seen;
            for (const auto& h : t.header) {
                if (h.empty()) throw Error(source + ": line " + std::to_string(lineno) + ": empty column name");
                if (seen[h]++) throw Error(source + ": duplicate column '" + h + "'");
            }
            have_header = true;
            continue;
        }
        if (fields.size() != t.header.size())
            throw Error(source + ": line " + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) +
                        " fields, found " + std::to_string(fields.size()));
        t.rows.push_back(std::move(fields));
        t.line_numbers.push_back(lineno);
    }
    if (!have_header) throw Error(source + ": empty file");
    return t;
}

inline CsvTable read_csv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "'");
    return read_csv(in, path);
}

struct SampleColumns {
    std::string id = "id";
    std::string arm = "arm";
    std::string outcome = "y";
    std::vector<std::string> covariates;  ///< empty: every column that is not id/arm/outcome/excluded
    std::vector<std::string> exclude;     ///< extra non-covariate columns (e.g. strata)
    bool require_covariates = true;       ///< false: outcome-only files get a constant column "const"
};

/// Build a Sample from a table. num_arms defaults to the largest arm present.
inline Sample sample_from_table(const CsvTable& t, std::optional<int> num_arms = std::nullopt,
                                const SampleColumns& cols = {}) {
    const auto id_col = t.require(cols.id);
    const auto arm_col = t.find(cols.arm);
    const auto y_col = t.find(cols.outcome);
    std::vector<std::size_t> cov_cols;
    std::vector<std::string> names;
    if (!cols.covariates.empty()) {
        for (const auto& c : cols.covariates) {
            cov_cols.push_back(t.require(c));
            names.push_back(c);
        }
    } else {
        for (std::size_t c = 0; c < t.header.size(); ++c) {
            const auto& h = t.header[c];
            if (h == cols.id || h == cols.arm || h == cols.outcome) continue;
            if (std::find(cols.exclude.begin(), cols.exclude.end(), h) != cols.exclude.end()) continue;
            cov_cols.push_back(c);
            names.push_back(h);
        }
    }
    if (cov_cols.empty() && cols.require_covariates) throw Error(t.source + ": no covariate columns");
    if (t.rows.empty()) throw Error(t.source + ": no data rows");
    const bool placeholder = cov_cols.empty();
    if (placeholder) names.push_back("const");

    const auto n = t.rows.size();
    std::vector<std::string> ids(n);
    Matrix x = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(placeholder ? 1 : cov_cols.size()));
    std::vector<std::optional<Arm>> arms;
    std::vector<std::optional<double>> ys;
    std::unordered_map<std::string, std::size_t> seen;
    int max_arm = 0;
    for (std::size_t r = 0; r < n; ++r) {
        ids[r] = t.rows[r][id_col];
        if (ids[r].empty()) throw Error(t.source + ": line " + std::to_string(t.line_numbers[r]) + ": empty id");
        if (!seen.emplace(ids[r], r).second)
            throw Error(t.source + ": line " + std::to_string(t.line_numbers[r]) + ": duplicate id '" + ids[r] + "'");
        for (std::size_t k = 0; k < cov_cols.size(); ++k)
            x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = t.number(r, cov_cols[k]);
        if (arm_col) {
            const long a = t.integer(r, *arm_col);
            if (a < 1 || a > 1024)
                throw Error(t.source + ": line " + std::to_string(t.line_numbers[r]) + ", column '" + cols.arm +
                            "': arm " + std::to_string(a) + " out of range");
            arms.emplace_back(static_cast<Arm>(a));
            max_arm = std::max(max_arm, static_cast<int>(a));
        }
        if (y_col) ys.emplace_back(t.number(r, *y_col));
    }
    int A = num_arms.value_or(std::max(max_arm, 2));
    if (max_arm > A)
        throw Error(t.source + ": arm " + std::to_string(max_arm) + " exceeds the declared " + std::to_string(A) + " arms");
    return Sample(std::move(ids), std::move(x), A, std::move(arms), std::move(ys), std::move(names));
}

inline Sample read_sample_csv(const std::string& path, std::optional<int> num_arms = std::nullopt,
                              const SampleColumns& cols = {}) {
    return sample_from_table(read_csv_file(path), num_arms, cols);
}

/// Integer labels from a named column (strata).
inline std::vector<int> int_column(const CsvTable& t, const std::string& name) {
    const auto c = t.require(name);
    std::vector<int> out;
    out.reserve(t.rows.size());
    for (std::size_t r = 0; r < t.rows.size(); ++r) out.push_back(static_cast<int>(t.integer(r, c)));
    return out;
}

/// Partition from an id,block table. Blocks are ordered by first appearance,
/// members by file order; every sample id must appear exactly once.
inline BlockPartition partition_from_table(const CsvTable& t, const Sample& s) {
    const auto id_col = t.require("id");
    const auto block_col = t.require("block");
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < s.size(); ++i) index.emplace(s.id(i), i);
    std::vector<std::vector<std::size_t>> blocks;
    std::map<std::string, std::size_t> block_index;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto it = index.find(t.rows[r][id_col]);
        if (it == index.end())
            throw Error(t.source + ": line " + std::to_string(t.line_numbers[r]) + ": unknown id '" + t.rows[r][id_col] + "'");
        const auto [b, fresh] = block_index.emplace(t.rows[r][block_col], blocks.size());
        if (fresh) blocks.emplace_back();
        blocks[b->second].push_back(it->second);
    }
    if (blocks.empty()) throw Error(t.source + ": no blocks");
    const auto size = blocks.front().size();
    for (std::size_t j = 0; j < blocks.size(); ++j)
        if (blocks[j].size() != size)
            throw Error(t.source + ": block " + std::to_string(j + 1) + " has " + std::to_string(blocks[j].size()) +
                        " units, expected " + std::to_string(size));
    BlockPartition p(std::move(blocks), size);
    p.require_matches(s);
    return p;
}

inline std::string format_real(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline void write_partition_csv(std::ostream& out, const Sample& s, const BlockPartition& p) {
    out << "id,block\n";
    for (std::size_t j = 0; j < p.num_blocks(); ++j)
        for (auto i : p.block(j)) out << s.id(i) << ',' << (j + 1) << '\n';
}

/// id,arm and, when a factor space is given, one level column per factor.
inline void write_arms_csv(std::ostream& out, const std::vector<std::string>& ids, const std::vector<Arm>& arms,
                           const std::optional<FactorSpace>& fs = std::nullopt) {
    if (ids.size() != arms.size()) throw Error("write_arms_csv: ids and arms differ in length");
    out << "id,arm";
    if (fs)
        for (int k = 1; k <= fs->factors(); ++k) out << ",f" << k;
    out << '\n';
    for (std::size_t i = 0; i < ids.size(); ++i) {
        out << ids[i] << ',' << arms[i];
        if (fs)
            for (int k = 1; k <= fs->factors(); ++k) out << ',' << (fs->level(arms[i], k) > 0 ? "+1" : "-1");
        out << '\n';
    }
}

}  // namespace tupleworks
