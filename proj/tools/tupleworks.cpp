// tupleworks command-line front end: design, analyze, simulate, rerun.
//
// Every command resolves its flags into a JSON config, executes from that
// config and writes a manifest.json next to its outputs. `rerun` replays a
// manifest and checks that the outputs are byte-identical.

#include "tupleworks/assign.hpp"
#include "tupleworks/blocking.hpp"
#include "tupleworks/estimate.hpp"
#include "tupleworks/inference.hpp"
#include "tupleworks/io.hpp"
#include "tupleworks/simlab.hpp"
#include "tupleworks/variance.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include <bit>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace tupleworks;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr int kSchema = 1;

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path.string() + "' for hashing");
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    std::string hex;
    char two[3];
    for (unsigned i = 0; i < len; ++i) {
        std::snprintf(two, sizeof two, "%02x", md[i]);
        hex += two;
    }
    return hex;
}

std::string utc_timestamp() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Output directory plus bookkeeping for the manifest.
struct RunContext {
    fs::path out;
    unsigned threads = 1;
    json inputs = json::object();
    std::vector<std::string> outputs;
    std::vector<std::string> warnings;
    std::vector<std::string> errors;  ///< reported failures that still produced output

    std::string read_input(const std::string& path) {
        inputs[path] = sha256_file(path);
        return path;
    }

    void write(const std::string& name, const std::string& content) {
        std::ofstream f(out / name, std::ios::binary);
        if (!f) throw Error("cannot write '" + (out / name).string() + "'");
        f << content;
        if (std::find(outputs.begin(), outputs.end(), name) == outputs.end()) outputs.push_back(name);
    }

    void warn(const std::string& w) { warnings.push_back(w); }
};

void reject_unknown_fields(const json& obj, const std::vector<std::string>& allowed, const std::string& where) {
    if (!obj.is_object()) throw Error(where + ": expected a JSON object");
    for (const auto& [key, _] : obj.items())
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw Error(where + ": unknown field '" + key + "'");
}

template <class T>
T get_or(const json& cfg, const char* key, T fallback) {
    if (!cfg.contains(key) || cfg[key].is_null()) return fallback;
    try {
        return cfg[key].get<T>();
    } catch (const json::exception&) {
        throw Error(std::string("config field '") + key + "' has the wrong type");
    }
}

template <class T>
std::optional<T> get_opt(const json& cfg, const char* key) {
    if (!cfg.contains(key) || cfg[key].is_null()) return std::nullopt;
    return get_or<T>(cfg, key, T{});
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

json real(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json matrix_json(const Matrix& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(real(m(r, c)));
        rows.push_back(row);
    }
    return rows;
}

// ---------------------------------------------------------------- design

const std::vector<std::string> kDesignFields{"step",       "input",      "partition", "covariates",  "id_col",
                                             "method",     "tuple_size", "strata_col", "order_by",   "mahalanobis",
                                             "matching",   "design",     "arms",      "K",           "factor",
                                             "seed",       "max_redraws"};

bool design_uses_blocks(const std::string& d) { return d == "mt" || d == "mt2" || d == "mpk"; }

/// Fill in arm count and tuple size from the design and factor count.
void resolve_design_config(json& cfg) {
    const auto step = cfg["step"].get<std::string>();
    const auto design = get_or<std::string>(cfg, "design", "");
    auto arms = get_opt<int>(cfg, "arms");
    const auto K = get_opt<int>(cfg, "K");
    auto tuple = get_opt<int>(cfg, "tuple_size");
    if (K && (*K < 1 || *K > 20)) throw Error("--k must be in 1..20");
    if (K && arms && *arms != (1 << *K))
        throw Error("--arms " + std::to_string(*arms) + " disagrees with --k " + std::to_string(*K));
    if (K && !arms) arms = 1 << *K;
    if (step == "assign" && !tuple && design_uses_blocks(design))
        if (auto pfile = get_opt<std::string>(cfg, "partition")) {
            // block size of the given partition
            const auto t = read_csv_file(*pfile);
            const auto b = t.require("block");
            std::map<std::string, int> sizes;
            for (const auto& row : t.rows) ++sizes[row[b]];
            if (!sizes.empty()) tuple = sizes.begin()->second;
        }

    if (step != "block") {
        static const std::vector<std::string> designs{"mt", "mt2", "strat", "bern", "mpk", "re"};
        if (std::find(designs.begin(), designs.end(), design) == designs.end())
            throw Error("unknown design '" + design + "' (expected mt, mt2, strat, bern, mpk or re)");
        if ((design == "bern" || design == "re" || design == "mpk") && !K)
            throw Error("design " + design + " needs --k (number of factors)");
        if (design == "mt") {
            if (!arms && tuple) arms = *tuple;
            if (!arms) throw Error("design mt needs --arms, --k or --tuple-size");
            if (tuple && *tuple != *arms)
                throw Error("design mt: tuple size " + std::to_string(*tuple) + " must equal the arm count " +
                            std::to_string(*arms));
            tuple = *arms;
        } else if (design == "mt2") {
            if (!arms && tuple) arms = *tuple / 2;
            if (!arms || *arms < 1) throw Error("design mt2 needs --arms, --k or an even --tuple-size");
            if (tuple && *tuple != 2 * *arms)
                throw Error("design mt2: tuple size " + std::to_string(*tuple) + " must be twice the arm count " +
                            std::to_string(*arms));
            tuple = 2 * *arms;
        } else if (design == "mpk") {
            if (tuple && *tuple != 2) throw Error("design mpk uses pairs (tuple size 2)");
            tuple = 2;
            const int k = get_or<int>(cfg, "factor", 1);
            if (k < 1 || k > *K) throw Error("design mpk: --factor must be in 1..K");
            cfg["factor"] = k;
        } else if (design == "strat" && !arms) {
            throw Error("design strat needs --arms or --k");
        }
        if (arms && *arms < 2) throw Error("at least two arms are required");
        cfg["arms"] = arms ? json(*arms) : json(nullptr);
        cfg["seed"] = get_or<std::uint64_t>(cfg, "seed", 1);
        if (design == "re") cfg["max_redraws"] = get_or<std::uint64_t>(cfg, "max_redraws", 100000);
    }
    const bool blocks = step == "block" || (step == "both" && design_uses_blocks(design));
    if (blocks) {
        if (!tuple) throw Error("blocking needs --tuple-size");
        if (*tuple < 1) throw Error("--tuple-size must be positive");
        cfg["tuple_size"] = *tuple;
        cfg["method"] = get_or<std::string>(cfg, "method", "order");
        cfg["mahalanobis"] = get_or<std::string>(cfg, "mahalanobis", "diag");
        cfg["matching"] = get_or<std::string>(cfg, "matching", "greedy");
    } else if (tuple) {
        cfg["tuple_size"] = *tuple;
    }
    if (step == "assign" && design_uses_blocks(design) && !get_opt<std::string>(cfg, "partition"))
        throw Error("design " + design + " needs --partition (or use `design` to block and assign in one step)");
}

SampleColumns design_columns(const json& cfg) {
    SampleColumns cols;
    cols.id = get_or<std::string>(cfg, "id_col", "id");
    cols.covariates = get_or<std::vector<std::string>>(cfg, "covariates", {});
    if (auto s = get_opt<std::string>(cfg, "strata_col")) cols.exclude.push_back(*s);
    return cols;
}

std::vector<int> strata_labels(const CsvTable& t, const json& cfg, std::size_t n) {
    if (auto col = get_opt<std::string>(cfg, "strata_col")) return int_column(t, *col);
    return std::vector<int>(n, 0);
}

Eigen::Index covariate_position(const Sample& s, const json& cfg) {
    const auto name = get_opt<std::string>(cfg, "order_by");
    if (!name) return 0;
    const auto& names = s.covariate_names();
    const auto it = std::find(names.begin(), names.end(), *name);
    if (it == names.end()) throw Error("--order-by: no covariate column '" + *name + "'");
    return static_cast<Eigen::Index>(it - names.begin());
}

void run_design(const json& cfg, RunContext& ctx) {
    const auto step = cfg["step"].get<std::string>();
    const auto design = get_or<std::string>(cfg, "design", "");
    const auto table = read_csv_file(ctx.read_input(cfg["input"].get<std::string>()));
    const auto cols = design_columns(cfg);
    const int arms = get_or<int>(cfg, "arms", 2);
    Sample sample = sample_from_table(table, arms, cols);
    std::vector<int> strata = strata_labels(table, cfg, sample.size());
    std::optional<BlockPartition> partition;

    if (step == "block" || (step == "both" && design_uses_blocks(design))) {
        const auto m = cfg["tuple_size"].get<std::size_t>();
        const auto method = cfg["method"].get<std::string>();
        const auto mode_s = cfg["mahalanobis"].get<std::string>();
        const auto match_s = cfg["matching"].get<std::string>();
        if (mode_s != "diag" && mode_s != "full") throw Error("--mahalanobis must be diag or full");
        if (match_s != "greedy" && match_s != "exact") throw Error("--matching must be greedy or exact");
        std::vector<std::string> dropped;
        if (method == "order") {
            partition = block_by_ordering(sample, m, covariate_position(sample, cfg));
        } else if (method == "prestrat") {
            if (!get_opt<std::string>(cfg, "strata_col")) throw Error("--method prestrat needs --strata-col");
            auto pb = block_prestratified(sample, strata, m, covariate_position(sample, cfg));
            std::unordered_map<std::string, std::size_t> row;
            for (std::size_t i = 0; i < sample.size(); ++i) row.emplace(sample.id(i), i);
            std::vector<int> kept_strata;
            for (const auto& id : pb.sample.ids()) kept_strata.push_back(strata[row.at(id)]);
            strata = std::move(kept_strata);
            sample = std::move(pb.sample);
            partition = std::move(pb.partition);
            dropped = std::move(pb.dropped_ids);
            if (!dropped.empty())
                ctx.warn(std::to_string(dropped.size()) + " unit(s) dropped to fill whole blocks within strata");
        } else if (method == "recursive") {
            if (!std::has_single_bit(m)) throw Error("--method recursive needs a power-of-two tuple size");
            partition = block_recursive_pairing(sample, std::countr_zero(m),
                                                mode_s == "full" ? MahalanobisMode::Full : MahalanobisMode::Diagonal,
                                                match_s == "exact" ? MatchingMethod::Exact : MatchingMethod::Greedy);
        } else {
            throw Error("unknown --method '" + method + "' (expected order, prestrat or recursive)");
        }
        std::ostringstream part;
        write_partition_csv(part, sample, *partition);
        ctx.write("partition.csv", part.str());
        const auto diag = diagnose(sample, *partition);
        json d;
        d["schema"] = kSchema;
        d["method"] = method;
        d["tuple_size"] = m;
        d["num_blocks"] = partition->num_blocks();
        d["within_stat"] = real(diag.within_stat);
        d["adjacent_stat"] = real(diag.adjacent_stat);
        d["dropped_ids"] = dropped;
        ctx.write("diagnostics.json", dump(d));
    } else if (auto pfile = get_opt<std::string>(cfg, "partition")) {
        partition = partition_from_table(read_csv_file(ctx.read_input(*pfile)), sample);
    }
    if (step == "block") return;

    const auto seed = cfg["seed"].get<std::uint64_t>();
    const auto K = get_opt<int>(cfg, "K");
    AssignmentPlan plan;
    if (design == "mt") plan = assign_matched_tuples(*partition, arms, seed);
    else if (design == "mt2") plan = assign_replicate_tuples(*partition, arms, seed);
    else if (design == "mpk") plan = assign_factor_specific_mp(*partition, cfg["factor"].get<int>(), *K, seed);
    else if (design == "strat") plan = assign_stratified(strata, arms, seed);
    else if (design == "bern") plan = assign_bernoulli_factors(sample.size(), *K, seed);
    else plan = assign_rerandomized(sample.covariates(), *K, seed, cfg["max_redraws"].get<std::uint64_t>());

    std::ostringstream out;
    write_arms_csv(out, sample.ids(), plan.arms, K ? std::optional<FactorSpace>(FactorSpace(*K)) : std::nullopt);
    ctx.write("arms.csv", out.str());
    json meta;
    meta["schema"] = kSchema;
    meta["design"] = design;
    meta["design_kind"] = to_string(plan.design_kind);
    meta["num_arms"] = plan.num_arms;
    meta["seed"] = plan.seed;
    meta["units"] = plan.arms.size();
    std::vector<std::size_t> counts(static_cast<std::size_t>(plan.num_arms), 0);
    for (Arm a : plan.arms) ++counts[static_cast<std::size_t>(a - 1)];
    meta["arm_counts"] = counts;
    if (plan.factors) meta["factors"] = *plan.factors;
    if (plan.focus_factor) meta["focus_factor"] = *plan.focus_factor;
    if (plan.main_threshold) meta["main_threshold"] = *plan.main_threshold;
    if (plan.interaction_threshold) meta["interaction_threshold"] = *plan.interaction_threshold;
    if (plan.redraws) meta["redraws"] = *plan.redraws;
    ctx.write("plan.json", dump(meta));
}

// ---------------------------------------------------------------- analyze

const std::vector<std::string> kAnalyzeFields{"input",   "partition", "contrasts", "variance", "arms",
                                              "strata_col", "alpha",  "null",      "rescale",  "basis",
                                              "id_col",  "arm_col",   "outcome_col"};

void resolve_analyze_config(json& cfg) {
    cfg["variance"] = get_or<std::string>(cfg, "variance", "adjusted");
    cfg["alpha"] = get_or<double>(cfg, "alpha", 0.05);
    cfg["rescale"] = get_or<bool>(cfg, "rescale", false);
    cfg["basis"] = get_or<std::string>(cfg, "basis", "arm-count");
    const auto v = cfg["variance"].get<std::string>();
    static const std::vector<std::string> methods{"adjusted", "adjusted-rep", "sfe-hc0", "sfe-hc1",
                                                  "bcve",     "strat",        "two-sample", "quad2c"};
    if (std::find(methods.begin(), methods.end(), v) == methods.end())
        throw Error("unknown --variance '" + v +
                    "' (expected adjusted, adjusted-rep, sfe-hc0, sfe-hc1, bcve, strat, two-sample or quad2c)");
    const bool needs_partition = v != "strat" && v != "two-sample";
    if (needs_partition && !get_opt<std::string>(cfg, "partition"))
        throw Error("--variance " + v + " needs --partition");
    auto contrasts = get_or<std::vector<std::string>>(cfg, "contrasts", {});
    if (contrasts.empty() && v != "quad2c") throw Error("at least one --contrast is required");
    cfg["contrasts"] = contrasts;
    const auto nulls = get_or<std::vector<double>>(cfg, "null", {});
    const std::size_t rows = v == "quad2c" && contrasts.empty() ? 3 : contrasts.size();
    if (!nulls.empty() && nulls.size() != rows)
        throw Error("--null takes one value per contrast row (" + std::to_string(rows) + ")");
    cfg["null"] = nulls.empty() ? std::vector<double>(rows, 0.0) : nulls;
    const auto basis = cfg["basis"].get<std::string>();
    if (basis != "arm-count" && basis != "nominal") throw Error("--basis must be arm-count or nominal");
}

/// Arm d of a contrast row of the form e_d - e_1; 0 otherwise.
Arm arm_versus_first(const Matrix& row) {
    Arm found = 0;
    for (Eigen::Index c = 0; c < row.cols(); ++c) {
        const double v = row(0, c);
        if (c == 0 ? v != -1.0 : (v != 0.0 && (v != 1.0 || found))) return 0;
        if (c > 0 && v == 1.0) found = static_cast<Arm>(c + 1);
    }
    return found;
}

void run_analyze(const json& cfg, RunContext& ctx) {
    const auto v = cfg["variance"].get<std::string>();
    const auto table = read_csv_file(ctx.read_input(cfg["input"].get<std::string>()));
    SampleColumns cols;
    cols.id = get_or<std::string>(cfg, "id_col", "id");
    cols.arm = get_or<std::string>(cfg, "arm_col", "arm");
    cols.outcome = get_or<std::string>(cfg, "outcome_col", "y");
    cols.require_covariates = false;
    if (auto s = get_opt<std::string>(cfg, "strata_col")) cols.exclude.push_back(*s);
    table.require(cols.arm);
    table.require(cols.outcome);
    const Sample s = sample_from_table(table, get_opt<int>(cfg, "arms"), cols);
    std::optional<BlockPartition> p;
    if (auto pfile = get_opt<std::string>(cfg, "partition"))
        p = partition_from_table(read_csv_file(ctx.read_input(*pfile)), s);

    const bool rescale = cfg["rescale"].get<bool>();
    const auto tokens = cfg["contrasts"].get<std::vector<std::string>>();
    Contrast nu;
    Sample analysed = s;
    std::vector<int> quad_rows;
    if (v == "quad2c") {
        for (const auto& t : tokens) {
            if (t.rfind("quad:", 0) != 0) throw Error("--variance quad2c takes contrasts quad:1, quad:2 or quad:3");
            quad_rows.push_back(detail::parse_int(std::string_view(t).substr(5), "quadruplet row"));
        }
        analysed = relabel_two_control_quad(s, *p);
        nu = two_control_quad_rows(quad_rows);
    } else {
        std::vector<Contrast> parts;
        for (const auto& t : tokens) {
            auto c = parse_contrast(t, s.num_arms(), rescale);
            if (c.label.empty()) c.label = t;
            parts.push_back(std::move(c));
        }
        nu = stack_contrasts(parts);
    }
    const auto basis = cfg["basis"].get<std::string>() == "nominal" ? MeanBasis::Nominal : MeanBasis::ArmCount;
    const auto g = gamma_hat(analysed, basis);
    const Vector est = delta_hat(g, nu);

    VarianceReport rep;
    bool joint_available = true;
    if (v == "adjusted") rep = v_hat_adjusted(s, *p, nu, false);
    else if (v == "adjusted-rep") rep = v_hat_adjusted(s, *p, nu, true);
    else if (v == "strat") rep = v_hat_strat_plugin(s, strata_labels(table, cfg, s.size()), nu);
    else if (v == "two-sample") rep = v_hat_two_sample(s, nu);
    else if (v == "quad2c") rep = v_hat_two_control_quad(s, *p, quad_rows);
    else {
        // per-arm estimators: only arm d versus arm 1, no covariances
        joint_available = false;
        rep.v_contrast = Matrix::Zero(nu.rows(), nu.rows());
        for (Eigen::Index r = 0; r < nu.rows(); ++r) {
            const Arm d = arm_versus_first(nu.matrix.row(r));
            if (d == 0) throw Error("--variance " + v + " supports only pair:d,1 contrasts");
            const auto one = v == "bcve" ? v_hat_bcve(s, *p, d)
                                         : v_hat_sfe(s, *p, d, v == "sfe-hc1" ? HcType::HC1 : HcType::HC0);
            rep.method = one.method;
            rep.n = one.n;
            rep.v_contrast(r, r) = one.v_contrast(0, 0);
            rep.warnings.insert(rep.warnings.end(), one.warnings.begin(), one.warnings.end());
        }
    }
    for (const auto& w : rep.warnings) ctx.warn(w);

    const double alpha = cfg["alpha"].get<double>();
    const auto nulls = cfg["null"].get<std::vector<double>>();
    json out;
    out["schema"] = kSchema;
    out["method"] = to_string(rep.method);
    out["n"] = rep.n;
    out["arm_means"] = std::vector<double>(g.values.data(), g.values.data() + g.values.size());
    out["arm_counts"] = g.counts;
    out["v_contrast"] = matrix_json(rep.v_contrast);
    json tests = json::array();
    std::vector<std::string> labels;
    if (v == "quad2c") {
        const std::vector<int> all{1, 2, 3};
        for (int r : quad_rows.empty() ? all : quad_rows) labels.push_back("quad:" + std::to_string(r));
    } else {
        labels = tokens;
    }
    for (Eigen::Index r = 0; r < nu.rows(); ++r) {
        json t;
        t["contrast"] = labels[static_cast<std::size_t>(r)];
        t["estimate"] = real(est(r));
        t["variance"] = real(rep.v_contrast(r, r));
        t["null"] = nulls[static_cast<std::size_t>(r)];
        try {
            const auto res = t_test(est(r), rep.v_contrast(r, r), rep.n, nulls[static_cast<std::size_t>(r)], alpha);
            const auto ci = confidence_interval(est(r), rep.v_contrast(r, r), rep.n, alpha);
            t["std_error"] = real(std::sqrt(rep.v_contrast(r, r) / static_cast<double>(rep.n)));
            t["statistic"] = real(res.statistic);
            t["p_value"] = real(res.p_value);
            t["reject"] = res.reject;
            t["ci"] = {real(ci.first), real(ci.second)};
        } catch (const Error& e) {
            t["error"] = e.what();
            ctx.errors.push_back(t["contrast"].get<std::string>() + ": " + e.what());
        }
        tests.push_back(t);
    }
    out["tests"] = tests;
    if (nu.rows() > 1 && joint_available) {
        json j;
        try {
            const Vector d0 = Eigen::Map<const Vector>(nulls.data(), static_cast<Eigen::Index>(nulls.size()));
            const auto w = wald_test(est, rep, Matrix::Identity(nu.rows(), nu.rows()), d0, rep.n, alpha);
            j = {{"method", w.method}, {"statistic", real(w.statistic)}, {"df", *w.df},
                 {"critical_value", real(w.critical_value)}, {"p_value", real(w.p_value)}, {"reject", w.reject}};
            for (const auto& wn : w.warnings)
                if (std::find(rep.warnings.begin(), rep.warnings.end(), wn) == rep.warnings.end()) ctx.warn(wn);
        } catch (const Error& e) {
            j = {{"error", e.what()}};
            ctx.errors.push_back(std::string("joint test: ") + e.what());
        }
        out["joint"] = j;
    } else if (nu.rows() > 1) {
        ctx.warn("no joint test: --variance " + v + " does not estimate covariances between contrasts");
    }
    out["warnings"] = ctx.warnings;
    out["errors"] = ctx.errors;
    ctx.write("analysis.json", dump(out));
}

// ---------------------------------------------------------------- simulate

void check_study_config(const json& cfg) {
    reject_unknown_fields(cfg,
                          {"schema", "study", "model", "tau_null", "tau_alt", "designs", "parameters", "n", "R",
                           "seed", "alpha", "rescale", "factor", "max_redraws", "K", "dim", "beta", "covariates",
                           "tau_grid"},
                          "study config");
    if (get_or<int>(cfg, "schema", 0) != kSchema)
        throw Error("study config: \"schema\" must be " + std::to_string(kSchema));
}

Model parse_model(const std::string& s) {
    for (Model m : {Model::M1, Model::M2, Model::M3, Model::M4, Model::M5, Model::M6, Model::CalibratedLinear})
        if (to_string(m) == s) return m;
    throw Error("unknown model '" + s + "' (expected M1..M6 or calibrated)");
}

void resolve_simulate_config(json& cfg) {
    check_study_config(cfg);
    const StudyConfig d;
    cfg["study"] = get_or<std::string>(cfg, "study", "size-power");
    cfg["model"] = get_or<std::string>(cfg, "model", "M1");
    cfg["tau_null"] = get_or<double>(cfg, "tau_null", d.tau_null);
    cfg["tau_alt"] = get_or<double>(cfg, "tau_alt", d.tau_alt);
    cfg["designs"] = get_or<std::vector<std::string>>(cfg, "designs", d.designs);
    cfg["parameters"] = get_or<std::vector<std::string>>(cfg, "parameters", d.parameters);
    cfg["n"] = get_or<std::size_t>(cfg, "n", d.n);
    cfg["R"] = get_or<std::size_t>(cfg, "R", d.R);
    cfg["seed"] = get_or<std::uint64_t>(cfg, "seed", d.seed);
    cfg["alpha"] = get_or<double>(cfg, "alpha", d.alpha);
    cfg["rescale"] = get_or<bool>(cfg, "rescale", d.rescale);
    cfg["factor"] = get_or<int>(cfg, "factor", d.factor);
    cfg["max_redraws"] = get_or<std::uint64_t>(cfg, "max_redraws", d.max_redraws);
    const auto study = cfg["study"].get<std::string>();
    if (study != "mse" && study != "size-power" && study != "power-curve")
        throw Error("study config: \"study\" must be mse, size-power or power-curve");
    if (study == "power-curve" && get_or<std::vector<double>>(cfg, "tau_grid", {}).empty())
        throw Error("study config: power-curve needs a non-empty \"tau_grid\"");
    if (parse_model(cfg["model"].get<std::string>()) == Model::CalibratedLinear) {
        cfg["K"] = get_or<int>(cfg, "K", 2);
        cfg["dim"] = get_or<int>(cfg, "dim", 2);
    } else {
        for (const char* f : {"K", "dim", "beta", "covariates"})
            if (cfg.contains(f)) throw Error(std::string("study config: \"") + f + "\" applies only to the calibrated model");
    }
}

StudyConfig study_from_json(const json& cfg, RunContext& ctx) {
    StudyConfig sc;
    const Model m = parse_model(cfg["model"].get<std::string>());
    if (m == Model::CalibratedLinear) {
        std::optional<Matrix> pool;
        if (auto path = get_opt<std::string>(cfg, "covariates")) {
            const auto t = read_csv_file(ctx.read_input(*path));
            Matrix x;
            std::vector<std::size_t> use;
            for (std::size_t c = 0; c < t.header.size(); ++c)
                if (t.header[c] != "id") use.push_back(c);
            x.resize(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(use.size()));
            for (std::size_t r = 0; r < t.rows.size(); ++r)
                for (std::size_t k = 0; k < use.size(); ++k)
                    x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = t.number(r, use[k]);
            pool = std::move(x);
        }
        std::optional<Vector> beta;
        if (auto b = get_opt<std::vector<double>>(cfg, "beta"))
            beta = Eigen::Map<const Vector>(b->data(), static_cast<Eigen::Index>(b->size()));
        sc.dgp = DgpSpec::calibrated(cfg["K"].get<int>(), cfg["dim"].get<int>(), 0.0, pool, beta);
    } else {
        sc.dgp = DgpSpec::benchmark(m, 0.0);
    }
    sc.tau_null = cfg["tau_null"].get<double>();
    sc.tau_alt = cfg["tau_alt"].get<double>();
    sc.designs = cfg["designs"].get<std::vector<std::string>>();
    sc.parameters = cfg["parameters"].get<std::vector<std::string>>();
    sc.n = cfg["n"].get<std::size_t>();
    sc.R = cfg["R"].get<std::size_t>();
    sc.seed = cfg["seed"].get<std::uint64_t>();
    sc.alpha = cfg["alpha"].get<double>();
    sc.rescale = cfg["rescale"].get<bool>();
    sc.factor = cfg["factor"].get<int>();
    sc.max_redraws = cfg["max_redraws"].get<std::uint64_t>();
    sc.threads = ctx.threads;
    return sc;
}

std::string csv_real(double v) { return std::isfinite(v) ? format_real(v) : "NA"; }

void run_simulate(const json& cfg, RunContext& ctx) {
    const auto sc = study_from_json(cfg, ctx);
    const auto study = cfg["study"].get<std::string>();
    json report;
    report["schema"] = kSchema;
    report["study"] = study;
    if (study == "power-curve") {
        const auto grid = cfg["tau_grid"].get<std::vector<double>>();
        const auto curve = run_power_curve(sc, grid);
        std::ostringstream csv;
        csv << "tau,design,parameter,rejection\n";
        json rows = json::array();
        for (const auto& pt : curve) {
            csv << format_real(pt.tau) << ',' << pt.design << ',' << pt.parameter << ',' << csv_real(pt.rejection) << '\n';
            rows.push_back({{"tau", pt.tau}, {"design", pt.design}, {"parameter", pt.parameter},
                            {"rejection", real(pt.rejection)}});
        }
        ctx.write("power_curve.csv", csv.str());
        report["curve"] = rows;
    } else {
        const auto rep = study == "mse" ? run_mse_study(sc) : run_size_power_study(sc);
        for (const auto& w : rep.warnings) ctx.warn(w);
        std::ostringstream csv;
        csv << "design,parameter,truth,mse,mse_se,bias,mse_ratio,rejection_null,rejection_alt,mean_ci_length,failures\n";
        json cells = json::array();
        for (const auto& c : rep.cells) {
            csv << c.design << ',' << '"' << c.parameter << '"' << ',' << csv_real(c.truth) << ',' << csv_real(c.mse)
                << ',' << csv_real(c.mse_se) << ',' << csv_real(c.bias) << ',' << csv_real(c.mse_ratio) << ','
                << csv_real(c.rejection_null) << ',' << csv_real(c.rejection_alt) << ',' << csv_real(c.mean_ci_length)
                << ',' << c.failures << '\n';
            cells.push_back({{"design", c.design},
                             {"parameter", c.parameter},
                             {"truth", real(c.truth)},
                             {"mse", real(c.mse)},
                             {"mse_se", real(c.mse_se)},
                             {"bias", real(c.bias)},
                             {"mse_ratio", real(c.mse_ratio)},
                             {"rejection_null", real(c.rejection_null)},
                             {"rejection_alt", real(c.rejection_alt)},
                             {"mean_ci_length", real(c.mean_ci_length)},
                             {"failures", c.failures}});
        }
        ctx.write(study == "mse" ? "mse_table.csv" : "rejection_table.csv", csv.str());
        report["replications"] = rep.replications;
        report["cells"] = cells;
    }
    report["warnings"] = ctx.warnings;
    ctx.write("report.json", dump(report));
}

// ---------------------------------------------------------------- manifest

void execute(const std::string& command, const json& cfg, RunContext& ctx) {
    if (command == "design") {
        reject_unknown_fields(cfg, kDesignFields, "design config");
        run_design(cfg, ctx);
    } else if (command == "analyze") {
        reject_unknown_fields(cfg, kAnalyzeFields, "analyze config");
        run_analyze(cfg, ctx);
    } else if (command == "simulate") {
        check_study_config(cfg);
        run_simulate(cfg, ctx);
    } else {
        throw Error("manifest: unknown command '" + command + "'");
    }
}

json output_digests(const RunContext& ctx) {
    json d = json::object();
    for (const auto& name : ctx.outputs) d[name] = sha256_file(ctx.out / name);
    return d;
}

void write_manifest(const std::string& command, const json& cfg, RunContext& ctx) {
    json m;
    m["schema"] = kSchema;
    m["command"] = command;
    m["config"] = cfg;
    m["seed"] = cfg.contains("seed") ? cfg["seed"] : json(nullptr);
    m["tool_version"] = kVersion;
    m["inputs"] = ctx.inputs;
    m["outputs"] = output_digests(ctx);
    m["timestamp"] = utc_timestamp();
    std::ofstream(ctx.out / "manifest.json") << dump(m);
}

void prepare_out(RunContext& ctx, const std::string& out) {
    ctx.out = out;
    fs::create_directories(ctx.out);
}

/// Run one command end to end; returns the process exit code.
int run_and_record(const std::string& command, json cfg, const std::string& out, unsigned threads,
                   const std::function<void(json&)>& resolve) {
    RunContext ctx;
    ctx.threads = threads;
    resolve(cfg);
    prepare_out(ctx, out);
    execute(command, cfg, ctx);
    write_manifest(command, cfg, ctx);
    for (const auto& w : ctx.warnings) std::cerr << "warning: " << w << '\n';
    for (const auto& e : ctx.errors) std::cerr << "error: " << e << '\n';
    std::cout << "wrote";
    for (const auto& o : ctx.outputs) std::cout << ' ' << (ctx.out / o).string();
    std::cout << ' ' << (ctx.out / "manifest.json").string() << '\n';
    return ctx.errors.empty() ? 0 : 1;
}

int rerun(const std::string& manifest_path, const std::string& out, unsigned threads) {
    std::ifstream in(manifest_path);
    if (!in) throw Error("cannot open manifest '" + manifest_path + "'");
    json m;
    try {
        m = json::parse(in);
    } catch (const json::exception& e) {
        throw Error("manifest: " + std::string(e.what()));
    }
    reject_unknown_fields(m, {"schema", "command", "config", "seed", "tool_version", "inputs", "outputs", "timestamp"},
                          "manifest");
    if (get_or<int>(m, "schema", 0) != kSchema) throw Error("manifest: unsupported schema");
    for (const auto& [path, digest] : m["inputs"].items())
        if (sha256_file(path) != digest.get<std::string>())
            throw Error("input '" + path + "' has changed since the manifest was written");
    RunContext ctx;
    ctx.threads = threads;
    prepare_out(ctx, out);
    const auto command = m["command"].get<std::string>();
    execute(command, m["config"], ctx);
    write_manifest(command, m["config"], ctx);
    const auto now = output_digests(ctx);
    int mismatches = 0;
    for (const auto& [name, digest] : m["outputs"].items()) {
        if (!now.contains(name)) {
            std::cerr << "error: output " << name << " was not produced\n";
            ++mismatches;
        } else if (now[name] != digest) {
            std::cerr << "error: output " << name << " differs from the recorded run\n";
            ++mismatches;
        }
    }
    if (mismatches) return 1;
    std::cout << "reproduced " << m["outputs"].size() << " output file(s) in " << ctx.out.string() << '\n';
    return ctx.errors.empty() ? 0 : 1;
}

// ---------------------------------------------------------------- flags

struct DesignFlags {
    std::string input, partition, id_col = "id", method, strata_col, order_by, mahalanobis, matching, design;
    std::vector<std::string> covariates;
    std::optional<int> tuple_size, arms, K, factor;
    std::optional<std::uint64_t> seed, max_redraws;

    void add_block(CLI::App* app) {
        app->add_option("--tuple-size", tuple_size, "Units per block");
        app->add_option("--method", method, "Blocking method: order, prestrat or recursive (default order)");
        app->add_option("--order-by", order_by, "Covariate column sorted by order/prestrat (default: first)");
        app->add_option("--mahalanobis", mahalanobis, "Distance scaling for recursive pairing: diag or full");
        app->add_option("--matching", matching, "Pair matching for recursive: greedy or exact");
    }
    void add_assign(CLI::App* app) {
        app->add_option("--design", design, "Assignment: mt, mt2, strat, bern, mpk or re");
        app->add_option("--arms", arms, "Number of treatment arms");
        app->add_option("--k", K, "Number of two-level factors (arms = 2^k)");
        app->add_option("--factor", factor, "Factor paired on by mpk (default 1)");
        app->add_option("--seed", seed, "Master seed (default 1)");
        app->add_option("--max-redraws", max_redraws, "Redraw cap for re (default 100000)");
    }
    void add_common(CLI::App* app) {
        app->add_option("--input", input, "Covariates CSV: id,x1,...,xp (required)");
        app->add_option("--covariates", covariates, "Covariate columns to use (default: all but id/strata)")
            ->delimiter(',');
        app->add_option("--id-col", id_col, "Unit id column");
        app->add_option("--strata-col", strata_col, "Integer stratum column (prestrat, strat)");
    }

    json to_json(const std::string& step) const {
        if (input.empty()) throw Error("design: --input is required");
        json c;
        c["step"] = step;
        c["input"] = input;
        if (!partition.empty()) c["partition"] = partition;
        if (!covariates.empty()) c["covariates"] = covariates;
        c["id_col"] = id_col;
        if (!method.empty()) c["method"] = method;
        if (tuple_size) c["tuple_size"] = *tuple_size;
        if (!strata_col.empty()) c["strata_col"] = strata_col;
        if (!order_by.empty()) c["order_by"] = order_by;
        if (!mahalanobis.empty()) c["mahalanobis"] = mahalanobis;
        if (!matching.empty()) c["matching"] = matching;
        if (!design.empty()) c["design"] = design;
        if (arms) c["arms"] = *arms;
        if (K) c["K"] = *K;
        if (factor) c["factor"] = *factor;
        if (seed) c["seed"] = *seed;
        if (max_redraws) c["max_redraws"] = *max_redraws;
        return c;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tupleworks: matched-tuples and factorial experiment design, analysis and simulation"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);
    std::string out = "out";
    unsigned threads = 1;

    DesignFlags df;
    auto* design = app.add_subcommand("design", "Block units on covariates and assign treatments");
    df.add_common(design);
    df.add_block(design);
    df.add_assign(design);
    design->add_option("--out", out, "Output directory");
    auto* block = design->add_subcommand("block", "Only form blocks (partition.csv, diagnostics.json)");
    auto* assign = design->add_subcommand("assign", "Only assign treatments (arms.csv, plan.json)");
    assign->add_option("--partition", df.partition, "Partition CSV id,block (mt, mt2, mpk)");
    design->require_subcommand(0, 1);
    block->fallthrough();
    assign->fallthrough();

    std::string a_input, a_partition, a_variance, a_strata, a_basis, a_id = "id", a_arm = "arm", a_y = "y";
    std::vector<std::string> a_contrasts;
    std::vector<double> a_null;
    std::optional<int> a_arms;
    double a_alpha = 0.05;
    bool a_rescale = false;
    auto* analyze = app.add_subcommand("analyze", "Estimate contrasts, variances and tests from observed outcomes");
    analyze->add_option("--input", a_input, "Data CSV: id,[x...],arm,y")->required();
    analyze->add_option("--partition", a_partition, "Partition CSV id,block");
    analyze->add_option("--contrast", a_contrasts,
                        "Contrast token, repeatable: main:k, inter:1,2, cond:k|2=+1, pair:d,d0, rows:...; quad:r for quad2c");
    analyze->add_option("--variance", a_variance,
                        "adjusted, adjusted-rep, sfe-hc0, sfe-hc1, bcve, strat, two-sample or quad2c (default adjusted)");
    analyze->add_option("--arms", a_arms, "Number of arms (default: largest arm in the file)");
    analyze->add_option("--strata-col", a_strata, "Stratum column for --variance strat");
    analyze->add_option("--alpha", a_alpha, "Test level");
    analyze->add_option("--null", a_null, "Null value per contrast row (default 0)")->delimiter(',');
    analyze->add_flag("--rescale", a_rescale, "Scale main and interaction contrasts by 2^-(K-1)");
    analyze->add_option("--basis", a_basis, "Arm-mean denominator: arm-count or nominal (default arm-count)");
    analyze->add_option("--id-col", a_id, "Unit id column");
    analyze->add_option("--arm-col", a_arm, "Arm column");
    analyze->add_option("--outcome-col", a_y, "Outcome column");
    analyze->add_option("--out", out, "Output directory");

    std::string s_config;
    std::optional<std::uint64_t> s_seed;
    auto* simulate = app.add_subcommand("simulate", "Run a Monte Carlo study from a JSON config");
    simulate->add_option("--config", s_config, "Study config JSON (\"schema\": 1)")->required();
    simulate->add_option("--seed", s_seed, "Override the config seed");
    simulate->add_option("--threads", threads, "Worker threads (outputs do not depend on this)");
    simulate->add_option("--out", out, "Output directory");

    std::string r_manifest;
    auto* rerun_cmd = app.add_subcommand("rerun", "Replay a manifest and verify the outputs match");
    rerun_cmd->add_option("--manifest", r_manifest, "manifest.json from an earlier run")->required();
    rerun_cmd->add_option("--threads", threads, "Worker threads");
    rerun_cmd->add_option("--out", out, "Output directory for the replay");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*design) {
            const std::string step = *block ? "block" : *assign ? "assign" : "both";
            return run_and_record("design", df.to_json(step), out, threads, resolve_design_config);
        }
        if (*analyze) {
            json c;
            c["input"] = a_input;
            if (!a_partition.empty()) c["partition"] = a_partition;
            c["contrasts"] = a_contrasts;
            if (!a_variance.empty()) c["variance"] = a_variance;
            if (a_arms) c["arms"] = *a_arms;
            if (!a_strata.empty()) c["strata_col"] = a_strata;
            c["alpha"] = a_alpha;
            if (!a_null.empty()) c["null"] = a_null;
            c["rescale"] = a_rescale;
            if (!a_basis.empty()) c["basis"] = a_basis;
            c["id_col"] = a_id;
            c["arm_col"] = a_arm;
            c["outcome_col"] = a_y;
            return run_and_record("analyze", c, out, threads, resolve_analyze_config);
        }
        if (*simulate) {
            std::ifstream in(s_config);
            if (!in) throw Error("cannot open '" + s_config + "'");
            json c;
            try {
                c = json::parse(in);
            } catch (const json::exception& e) {
                throw Error(s_config + ": " + e.what());
            }
            check_study_config(c);
            if (s_seed) c["seed"] = *s_seed;
            return run_and_record("simulate", c, out, threads, resolve_simulate_config);
        }
        return rerun(r_manifest, out, threads);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
