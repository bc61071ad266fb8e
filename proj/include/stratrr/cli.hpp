#pragma once

// Command-line front end: assign, analyze, quantile, simulate.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stratrr/balance.hpp"
#include "stratrr/config.hpp"
#include "stratrr/design.hpp"
#include "stratrr/inference.hpp"
#include "stratrr/io.hpp"
#include "stratrr/sim.hpp"

namespace stratrr::cli {

enum ExitCode : int { kOk = 0, kInternal = 1, kParse = 2, kValidation = 3, kExhausted = 4 };

namespace detail {

using io::Json;

struct CriterionFlags {
    std::string method = "srrom";
    double pa = 0.001;
    std::string srrsm_mode = "fair";
    std::vector<std::string> stratum_pa;  // LABEL=VALUE
    std::uint64_t max_attempts = kDefaultMaxAttempts;
    std::string fallback;  // "", "sr" or "error"
};

struct DataFlags {
    std::string in;
    std::vector<std::string> covariates;
    std::optional<double> propensity;
    std::vector<std::string> stratum_propensity;  // LABEL=VALUE
    bool center = false;
};

inline void add_criterion_options(CLI::App* app, CriterionFlags& f) {
    app->add_option("--method", f.method, "sr, srrom, srrsm or srrdm")
        ->check(CLI::IsMember({"sr", "srrom", "srrsm", "srrdm"}));
    app->add_option("--pa", f.pa, "target acceptance probability p_a (0, 1]");
    app->add_option("--srrsm", f.srrsm_mode, "stratum thresholds: fair (p_a^(1/K)) or unfair (p_a)")
        ->check(CLI::IsMember({"fair", "unfair"}));
    app->add_option("--stratum-pa", f.stratum_pa, "per-stratum p_a override, LABEL=VALUE (repeatable)");
    app->add_option("--max-attempts", f.max_attempts, "rejection-sampling budget");
    app->add_option("--fallback", f.fallback, "on exhaustion: sr or error")->check(CLI::IsMember({"sr", "error"}));
}

inline void add_data_options(CLI::App* app, DataFlags& f) {
    app->add_option("--in", f.in, "input CSV")->required();
    app->add_option("--covariates", f.covariates, "covariate columns (default: x_* columns)")->delimiter(',');
    app->add_option("--propensity", f.propensity, "treated share in every stratum");
    app->add_option("--stratum-propensity", f.stratum_propensity, "per-stratum propensity, LABEL=VALUE (repeatable)");
    app->add_flag("--center", f.center, "center exported covariates at their stratum means");
}

inline std::map<std::string, double> parse_label_values(const std::vector<std::string>& items,
                                                        const std::string& flag) {
    std::map<std::string, double> out;
    for (const auto& item : items) {
        const auto eq = item.rfind('=');
        if (eq == std::string::npos || eq == 0)
            throw io::ParseError(flag + ": '" + item + "' is not LABEL=VALUE");
        out[item.substr(0, eq)] = io::parse_double(item.substr(eq + 1), flag);
    }
    return out;
}

inline io::LoadOptions load_options(const DataFlags& f) {
    io::LoadOptions o;
    o.covariates = f.covariates;
    if (f.propensity) o.propensity = *f.propensity;
    o.stratum_propensity = parse_label_values(f.stratum_propensity, "--stratum-propensity");
    return o;
}

inline BalanceCriterion make_criterion(const CriterionFlags& f, const StratifiedPopulation& pop) {
    const int p = static_cast<int>(pop.dim());
    const std::size_t K = pop.strata_count();
    const auto m = parse_method(f.method);
    BalanceCriterion c;
    switch (*m) {
        case Method::SR: c = BalanceCriterion::sr(); break;
        case Method::SRRoM: c = BalanceCriterion::overall(p, f.pa); break;
        case Method::SRRdM: c = BalanceCriterion::difference_in_means(p, f.pa); break;
        case Method::SRRsM: {
            Vector targets(K, f.srrsm_mode == "fair" ? std::pow(f.pa, 1.0 / static_cast<double>(K)) : f.pa);
            const auto over = parse_label_values(f.stratum_pa, "--stratum-pa");
            for (const auto& [label, v] : over) {
                bool found = false;
                for (std::size_t k = 0; k < K; ++k)
                    if (pop.label(k) == label) {
                        targets[k] = v;
                        found = true;
                    }
                if (!found) throw ValidationError("--stratum-pa: unknown stratum '" + label + "'");
            }
            c = BalanceCriterion::stratum_specific(p, targets);
            c.target = f.pa;
            break;
        }
    }
    c.max_attempts = f.max_attempts;
    if (f.fallback == "sr") c.fallback = Fallback::FallBackToSR;
    if (f.fallback == "error") c.fallback = Fallback::ErrorOut;
    return c;
}

inline Json criterion_json(const BalanceCriterion& c, const StratifiedPopulation& pop) {
    Json j;
    j["method"] = method_name(c.method);
    if (c.method == Method::SRRsM) {
        Json strata = Json::array();
        for (std::size_t k = 0; k < pop.strata_count(); ++k)
            strata.push_back({{"stratum", pop.label(k)},
                              {"target", c.stratum_targets[k]},
                              {"threshold", io::json_number(c.stratum_thresholds[k])}});
        j["strata"] = strata;
    } else if (c.method != Method::SR) {
        j["target"] = c.target;
        j["threshold"] = io::json_number(c.threshold);
    }
    j["max_attempts"] = c.max_attempts;
    j["fallback"] = c.fallback == Fallback::FallBackToSR ? "sr" : "error";
    return j;
}

inline Json manifest(const std::string& command, const std::vector<std::string>& args) {
    Json j;
    j["tool"] = "stratrr";
    j["version"] = io::kToolVersion;
    j["command"] = command;
    j["args"] = args;
    return j;
}

inline Json strata_json(const StratifiedPopulation& pop) {
    Json a = Json::array();
    for (std::size_t k = 0; k < pop.strata_count(); ++k)
        a.push_back({{"label", pop.label(k)},
                     {"size", pop.stratum_size(k)},
                     {"propensity", pop.propensity(k)},
                     {"treated", pop.treated_count(k)}});
    return a;
}

inline void require_valid_or_report(const StratifiedPopulation& pop, Json* notes) {
    const auto report = validate_population(pop);
    if (!report.ok()) throw ValidationError(report.first_error());
    if (notes)
        for (const auto& i : report.issues) notes->push_back(i.message);
}

inline void emit(const Json& j, const std::string& path, std::ostream& out) {
    if (path.empty() || path == "-") out << j.dump(2) << '\n';
    else io::write_json_file(path, j);
}

// ---------------------------------------------------------------------------

struct AssignFlags {
    DataFlags data;
    CriterionFlags crit;
    std::uint64_t seed = 1;
    std::string out;
    std::string report;
    std::uint64_t enumerate_cap = 100'000;
};

inline int cmd_assign(const AssignFlags& f, const std::vector<std::string>& args, std::ostream& out) {
    auto opts = load_options(f.data);
    opts.forbid_treated = true;
    auto data = io::load_units(io::read_csv_file(f.data.in), opts);
    const auto& pop = data.population;
    Json notes = Json::array();
    require_valid_or_report(pop, &notes);
    const auto crit = make_criterion(f.crit, pop);
    const auto dm = build_design_matrices(pop);
    RerandomizerOptions ro;
    ro.enumerate_cap = crit.method == Method::SRRsM ? f.enumerate_cap : 0;
    Rerandomizer rr(pop, dm, crit, ro);
    Rng rng(f.seed);
    const auto res = rr.run(rng);
    const auto& z = res.assignment.z;

    io::CsvTable table = data.table;
    if (f.data.center) {
        const Matrix xc = io::centered_covariates(pop);
        for (std::size_t i = 0; i < table.rows.size(); ++i)
            for (std::size_t j = 0; j < data.covariate_columns.size(); ++j)
                table.rows[i][data.covariate_columns[j]] = io::format_double(xc(i, j));
    }
    table.header.push_back("treated");
    for (std::size_t i = 0; i < table.rows.size(); ++i) table.rows[i].push_back(z[i] ? "1" : "0");
    if (f.out.empty() || f.out == "-") {
        io::write_csv(out, table);
    } else {
        std::ofstream o(f.out);
        if (!o) throw io::ParseError("cannot write " + f.out);
        io::write_csv(o, table);
    }

    if (res.fell_back) notes.push_back("no acceptable assignment within the attempt budget; fell back to SR");
    if (crit.method == Method::SRRoM || crit.method == Method::SRRdM)
        notes.push_back("expected attempts ~ 1 / target for large n");
    Json j;
    j["schema"] = io::kSchemaVersion;
    j["command"] = "assign";
    j["n"] = pop.size();
    j["K"] = pop.strata_count();
    j["p"] = pop.dim();
    j["covariates"] = data.covariate_names;
    j["strata"] = strata_json(pop);
    j["criterion"] = criterion_json(crit, pop);
    j["seed"] = f.seed;
    j["stream"] = {{"seed", res.assignment.stream.seed},
                   {"stream", res.assignment.stream.stream},
                   {"substream", res.assignment.stream.substream}};
    j["attempts"] = res.attempts;
    j["stratum_attempts"] = res.stratum_attempts;
    j["fell_back"] = res.fell_back;
    j["statistic"] = io::json_number(res.statistic);
    j["stratum_statistics"] = io::json_array(res.stratum_statistics);
    j["m_overall"] = mahalanobis_overall(dm, tau_x_hat(pop, dm, z), pop.size());
    if (dm.u_chol) j["m_difference_in_means"] = mahalanobis_dm(pop, dm, z);
    j["centered"] = f.data.center;
    j["notes"] = notes;
    j["manifest"] = manifest("assign", args);
    std::string report = f.report;
    if (report.empty()) report = (f.out.empty() || f.out == "-") ? std::string("-") : f.out + ".json";
    emit(j, report, report == "-" ? std::cerr : out);
    return kOk;
}

// ---------------------------------------------------------------------------

struct AnalyzeFlags {
    DataFlags data;
    CriterionFlags crit;
    double alpha = 0.05;
    std::size_t draws = kDefaultLawDraws;
    std::uint64_t law_seed = kDefaultLawSeed;
    std::optional<double> r2;
    std::string out;
};

inline Json quantile_json(const QuantileEstimate& q, double xi) {
    return {{"xi", xi}, {"value", q.value}, {"mc_se", q.mc_se}};
}

inline Json report_json(const InferenceReport& r, const StratifiedPopulation& pop) {
    Json j;
    j["method"] = method_name(r.method);
    j["tau_hat"] = r.tau_hat;
    j["alpha"] = r.alpha;
    j["variance_estimate"] = r.variance_estimate;
    j["se"] = std::sqrt(r.variance_estimate / static_cast<double>(pop.size()));
    j["sigma_tautau"] = r.sigma_tt;
    j["ci"] = {{"lower", r.ci_lower}, {"upper", r.ci_upper}};
    if (r.method == Method::SRRsM) {
        j["r2_estimates"] = io::json_array(r.stratum_r2);
        j["stratum_sigma_tautau"] = io::json_array(r.stratum_sigma_tt);
        j["v_pa"] = io::json_array(r.stratum_v_pa);
        j["floored_strata"] = r.floored_strata;
        j["unadjusted_strata"] = r.unadjusted_strata;
    } else {
        j["r2_estimate"] = r.r2;
        j["v_pa"] = r.v_pa;
    }
    j["r2_clipped"] = r.r2_clipped;
    j["quantiles"] = {quantile_json(r.q_lower, r.alpha / 2), quantile_json(r.q_upper, 1 - r.alpha / 2)};
    j["law_draws"] = r.law_draws;
    j["law_seed"] = r.law_seed;
    return j;
}

inline int cmd_analyze(const AnalyzeFlags& f, bool propensity_given, const std::vector<std::string>& args,
                       std::ostream& out) {
    auto opts = load_options(f.data);
    opts.require_treated = true;
    opts.require_outcome = true;
    opts.infer_propensity = !propensity_given;
    auto data = io::load_units(io::read_csv_file(f.data.in), opts);
    const auto& pop = data.population;
    Json notes = Json::array();
    require_valid_or_report(pop, &notes);
    const auto crit = make_criterion(f.crit, pop);
    const auto dm = build_design_matrices(pop);
    AnalysisOptions ao;
    ao.ci = {f.alpha, f.draws, f.law_seed};
    ao.r2_override = f.r2;
    LawEngine engine;
    const auto r = analyze(pop, dm, crit, *data.treated, *data.outcome, ao, engine);

    Json full;
    full["schema"] = io::kSchemaVersion;
    full["command"] = "analyze";
    full["n"] = pop.size();
    full["K"] = pop.strata_count();
    full["p"] = pop.dim();
    full["covariates"] = data.covariate_names;
    full["strata"] = strata_json(pop);
    full["criterion"] = criterion_json(crit, pop);
    full["r2_override"] = f.r2 ? Json(*f.r2) : Json(nullptr);
    full["report"] = report_json(r, pop);
    full["notes"] = notes;
    full["manifest"] = manifest("analyze", args);
    emit(full, f.out, out);
    return kOk;
}

// ---------------------------------------------------------------------------

struct QuantileFlags {
    int p = 0;
    std::optional<double> pa;
    std::optional<double> a;
    double r2 = 0.0;
    std::vector<double> weights;
    std::vector<double> stratum_r2;
    std::vector<double> stratum_pa;
    std::vector<double> stratum_a;
    std::vector<double> xi = {0.025, 0.975};
    std::size_t draws = kDefaultLawDraws;
    std::uint64_t seed = kDefaultLawSeed;
    std::string out;
};

inline int cmd_quantile(const QuantileFlags& f, const std::vector<std::string>& args, std::ostream& out) {
    if (f.p < 1) throw DomainError("--p must be >= 1");
    for (double x : f.xi)
        if (!(x > 0.0 && x < 1.0)) throw DomainError("--xi values must lie in (0, 1)");
    Json j;
    j["schema"] = io::kSchemaVersion;
    j["command"] = "quantile";
    j["p"] = f.p;
    TruncatedGaussianLaw law;
    const bool mixture = !f.weights.empty();
    if (!mixture) {
        if (f.pa.has_value() == f.a.has_value()) throw DomainError("give exactly one of --pa and --a");
        if (!(f.r2 >= 0.0 && f.r2 <= 1.0)) throw DomainError("--r2 must lie in [0, 1]");
        const double a = f.a ? *f.a : threshold_for(f.p, *f.pa);
        if (!(a > 0.0)) throw DomainError("--a must be > 0");
        law = TruncatedGaussianLaw::overall(f.r2, f.p, a, f.draws, f.seed);
        j["target"] = f.a ? chi2_cdf(f.p, a) : *f.pa;
        j["threshold"] = io::json_number(a);
        j["r2"] = f.r2;
        j["v_pa"] = v_pa(f.p, a);
    } else {
        const std::size_t K = f.weights.size();
        if (f.stratum_r2.size() != K) throw DomainError("--stratum-r2 needs one value per weight");
        if (f.stratum_pa.empty() == f.stratum_a.empty())
            throw DomainError("give exactly one of --stratum-pa and --stratum-a");
        Vector thresholds, targets, vs;
        for (std::size_t k = 0; k < K; ++k) {
            if (!(f.weights[k] >= 0.0)) throw DomainError("--weights must be >= 0");
            if (!(f.stratum_r2[k] >= 0.0 && f.stratum_r2[k] <= 1.0)) throw DomainError("--stratum-r2 must lie in [0, 1]");
            double a;
            if (!f.stratum_pa.empty()) {
                if (f.stratum_pa.size() != K) throw DomainError("--stratum-pa needs one value per weight");
                a = threshold_for(f.p, f.stratum_pa[k]);
            } else {
                if (f.stratum_a.size() != K) throw DomainError("--stratum-a needs one value per weight");
                a = f.stratum_a[k];
                if (!(a > 0.0)) throw DomainError("--stratum-a must be > 0");
            }
            thresholds.push_back(a);
            targets.push_back(std::isinf(a) ? 1.0 : chi2_cdf(f.p, a));
            vs.push_back(v_pa(f.p, a));
        }
        law = TruncatedGaussianLaw::stratified(f.weights, f.stratum_r2, f.p, thresholds, f.draws, f.seed);
        j["weights"] = f.weights;
        j["stratum_r2"] = f.stratum_r2;
        j["targets"] = targets;
        j["thresholds"] = io::json_array(thresholds);
        j["v_pa"] = vs;
    }
    LawEngine engine;
    const auto qs = engine.quantiles(law, f.xi);
    Json qa = Json::array();
    for (std::size_t i = 0; i < qs.size(); ++i) qa.push_back(quantile_json(qs[i], f.xi[i]));
    j["quantiles"] = qa;
    j["draws"] = f.draws;
    j["seed"] = f.seed;
    j["manifest"] = manifest("quantile", args);
    emit(j, f.out, out);
    return kOk;
}

// ---------------------------------------------------------------------------

struct SimulateFlags {
    std::string config;
    std::vector<std::string> overrides;
    std::string full_scale;
    std::optional<unsigned> threads;
    std::string out;
    bool samples = false;
    bool dry_run = false;
};

inline unsigned default_threads() {
    if (const char* env = std::getenv("STRATRR_THREADS")) {
        try {
            const int v = std::stoi(env);
            if (v > 0) return static_cast<unsigned>(v);
        } catch (const std::exception&) {
        }
    }
    return 1;
}

inline Json metrics_json(const sim::StudyResult& r) {
    Json methods = Json::array();
    for (const auto& m : r.methods) {
        const auto& x = m.metrics;
        methods.push_back({{"method", x.method},
                           {"bias", x.bias},
                           {"sd", x.sd},
                           {"rmse", x.rmse},
                           {"mean_ci_length", x.mean_ci_length},
                           {"coverage", x.coverage},
                           {"reps", x.reps},
                           {"fallbacks", x.fallbacks},
                           {"failures", x.failures},
                           {"mean_attempts", x.mean_attempts},
                           {"acceptance_rate", x.acceptance_rate}});
    }
    return {{"schema", io::kSchemaVersion}, {"tau", io::json_number(r.tau)}, {"methods", methods}};
}

inline int cmd_simulate(const SimulateFlags& f, const std::vector<std::string>& args, std::ostream& out) {
    const std::string text = f.config.empty() ? std::string() : config::read_file(f.config);
    auto settings = config::parse(text, f.overrides, f.full_scale);
    if (f.samples) settings.samples = true;
    if (f.threads) settings.study.threads = *f.threads;
    else if (std::getenv("STRATRR_THREADS")) settings.study.threads = default_threads();
    if (settings.study.threads == 0) throw config::ConfigError("threads must be >= 1");
    const auto methods = config::build_methods(settings);
    namespace fs = std::filesystem;
    fs::create_directories(f.out);
    Json m = manifest("simulate", args);
    m["schema"] = io::kSchemaVersion;
    m["config_file"] = f.config;
    m["overrides"] = f.overrides;
    m["settings"] = config::to_json(settings);
    io::write_json_file((fs::path(f.out) / "manifest.json").string(), m);
    if (f.dry_run) return kOk;

    const auto result = sim::run_study(settings.dgp, methods, settings.study);
    const Json metrics = metrics_json(result);
    io::write_json_file((fs::path(f.out) / "metrics.json").string(), metrics);
    const std::string table = sim::format_table(result);
    {
        std::ofstream t(fs::path(f.out) / "metrics.txt");
        t << table;
    }
    if (settings.samples) {
        io::CsvTable s;
        s.header = {"method", "rep", "error", "ci_lower", "ci_upper", "attempts", "fell_back", "failed"};
        for (const auto& mr : result.methods)
            for (std::size_t i = 0; i < mr.records.size(); ++i) {
                const auto& rec = mr.records[i];
                s.rows.push_back({mr.metrics.method, std::to_string(i), io::format_double(rec.error_value()),
                                  io::format_double(rec.ci_lower), io::format_double(rec.ci_upper),
                                  std::to_string(rec.attempts), rec.fell_back ? "1" : "0", rec.failed ? "1" : "0"});
            }
        std::ofstream o(fs::path(f.out) / "samples.csv");
        io::write_csv(o, s);
    }
    out << table;
    return kOk;
}

}  // namespace detail

/// Parses argv, runs the subcommand and maps errors to exit codes:
/// 2 bad arguments or unreadable input, 3 invalid data/parameters,
/// 4 no acceptable assignment within the attempt budget.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    using namespace detail;
    CLI::App app{"Stratified rerandomization: design, analysis and simulation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", io::kToolVersion);

    AssignFlags af;
    auto* assign = app.add_subcommand("assign", "draw one acceptable assignment for a unit table");
    add_data_options(assign, af.data);
    add_criterion_options(assign, af.crit);
    assign->add_option("--seed", af.seed, "random seed");
    assign->add_option("--out", af.out, "output CSV (default: stdout)");
    assign->add_option("--report", af.report, "sidecar JSON (default: <out>.json)");
    assign->add_option("--enumerate-cap", af.enumerate_cap, "enumerate strata with at most this many assignments");

    AnalyzeFlags nf;
    auto* analyze_cmd = app.add_subcommand("analyze", "estimate and confidence interval from an assigned table");
    add_data_options(analyze_cmd, nf.data);
    add_criterion_options(analyze_cmd, nf.crit);
    analyze_cmd->add_option("--alpha", nf.alpha, "1 - confidence level");
    analyze_cmd->add_option("--draws", nf.draws, "Monte Carlo draws for the limiting law");
    analyze_cmd->add_option("--law-seed", nf.law_seed, "seed of the Monte Carlo draws");
    analyze_cmd->add_option("--r2", nf.r2, "override the estimated R^2 (all strata for srrsm)");
    analyze_cmd->add_option("--out", nf.out, "output JSON (default: stdout)");

    QuantileFlags qf;
    auto* quantile = app.add_subcommand("quantile", "quantiles of the truncated-Gaussian limiting law");
    quantile->add_option("--p", qf.p, "covariate dimension")->required();
    quantile->add_option("--pa", qf.pa, "acceptance probability");
    quantile->add_option("--a", qf.a, "threshold");
    quantile->add_option("--r2", qf.r2, "R^2 of the single-term law");
    quantile->add_option("--weights", qf.weights, "per-stratum weights pi_k Sigma_[k]tautau")->delimiter(',');
    quantile->add_option("--stratum-r2", qf.stratum_r2, "per-stratum R^2")->delimiter(',');
    quantile->add_option("--stratum-pa", qf.stratum_pa, "per-stratum acceptance probabilities")->delimiter(',');
    quantile->add_option("--stratum-a", qf.stratum_a, "per-stratum thresholds")->delimiter(',');
    quantile->add_option("--xi", qf.xi, "quantile levels")->delimiter(',');
    quantile->add_option("--draws", qf.draws, "Monte Carlo draws");
    quantile->add_option("--seed", qf.seed, "Monte Carlo seed");
    quantile->add_option("--out", qf.out, "output JSON (default: stdout)");

    SimulateFlags sf;
    auto* simulate = app.add_subcommand("simulate", "run a replication study");
    simulate->add_option("--config", sf.config, "INI config file");
    simulate->add_option("--set", sf.overrides, "override KEY=VALUE (repeatable)");
    simulate->add_option("overrides", sf.overrides, "KEY=VALUE overrides");
    simulate->add_option("--full-scale,--paper-scale", sf.full_scale, "full-size preset: case1, case2, case3 or case4")
        ->check(CLI::IsMember({"case1", "case2", "case3", "case4"}));
    simulate->add_option("--threads", sf.threads, "worker threads (default: STRATRR_THREADS or config)");
    simulate->add_option("--out", sf.out, "output directory")->required();
    simulate->add_flag("--samples", sf.samples, "write per-replication errors to samples.csv");
    simulate->add_flag("--dry-run", sf.dry_run, "validate the settings and write manifest.json only");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kParse;
    }

    std::vector<std::string> args(argv + 1, argv + argc);
    try {
        if (*assign) return cmd_assign(af, args, out);
        if (*analyze_cmd) return cmd_analyze(nf, analyze_cmd->count("--propensity") > 0, args, out);
        if (*quantile) return cmd_quantile(qf, args, out);
        if (*simulate) return cmd_simulate(sf, args, out);
    } catch (const io::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kParse;
    } catch (const AttemptsExhausted& e) {
        err << "error: " << e.what() << '\n';
        return kExhausted;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const config::ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const SingularCovariance& e) {
        err << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const InsufficientArm& e) {
        err << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const DomainError& e) {
        err << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << '\n';
        return kInternal;
    }
    return kInternal;
}

}  // namespace stratrr::cli
