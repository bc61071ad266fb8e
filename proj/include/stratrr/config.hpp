#pragma once

// Simulation study configuration: a sectioned key/value (INI) file whose
// keys mirror DgpConfig, StudyConfig and BalanceCriterion fields, plus
// KEY=VALUE overrides and the full-size presets.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <algorithm>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "stratrr/io.hpp"
#include "stratrr/sim.hpp"

namespace stratrr::config {

class ConfigError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct StudySpec {
    sim::DgpConfig dgp;
    sim::StudyConfig study;
    std::vector<std::string> method_names = {"srrom", "srrsm_fair", "srrsm_unfair", "sr"};
    double target = 0.001;  // p_a
    std::uint64_t max_attempts = kDefaultMaxAttempts;
    std::optional<Fallback> fallback;  // unset: per-method default
    bool samples = false;              // write per-replication tau_hat - tau
    std::string full_scale;           // empty, or case1..case4
    std::size_t K = 0;                 // as configured (before expansion into stratum_sizes)
    std::size_t stratum_size = 0;
    std::size_t large_size = 100;
};

namespace detail {

// Which section a bare override key belongs to.
inline const std::map<std::string, std::string>& key_sections() {
    static const std::map<std::string, std::string> m = {
        {"case", "dgp"},          {"K", "dgp"},
        {"stratum_size", "dgp"},  {"large_size", "dgp"},
        {"stratum_sizes", "dgp"}, {"propensity", "dgp"},
        {"p", "dgp"},             {"noise_var", "dgp"},
        {"ar_rho", "dgp"},        {"seed", "study"},
        {"dgp_seed", "dgp"},      {"linear_only", "dgp"},
        {"reps", "study"},        {"alpha", "study"},
        {"threads", "study"},     {"law_draws", "study"},
        {"law_seed", "study"},    {"enumerate_cap", "study"},
        {"redraw_population", "study"}, {"samples", "study"},
        {"methods", "criterion"}, {"target", "criterion"},
        {"pa", "criterion"},      {"max_attempts", "criterion"},
        {"fallback", "criterion"},
    };
    return m;
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (auto t = io::trim(item); !t.empty()) out.push_back(t);
    return out;
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        return io::parse_double(v, key);
    } catch (const io::ParseError& e) {
        throw ConfigError(e.what());
    }
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
    if (res.ec != std::errc() || res.ptr != v.data() + v.size() || v.empty())
        throw ConfigError(key + ": '" + v + "' is not a non-negative integer");
    return out;
}

inline bool to_bool(const std::string& key, std::string v) {
    std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(key + ": '" + v + "' is not a boolean");
}

inline sim::DgpCase to_case(const std::string& v) {
    if (v == "1" || v == "case1" || v == "many-small") return sim::DgpCase::ManySmall;
    if (v == "2" || v == "case2" || v == "many-small-plus-two-large") return sim::DgpCase::ManySmallPlusTwoLarge;
    if (v == "3" || v == "case3" || v == "two-large-homogeneous") return sim::DgpCase::TwoLargeHomogeneous;
    if (v == "4" || v == "case4" || v == "two-large-heterogeneous") return sim::DgpCase::TwoLargeHeterogeneous;
    throw ConfigError("case: unknown value '" + v + "'");
}

using Tree = boost::property_tree::ptree;

inline void set_key(Tree& tree, const std::string& key, const std::string& value) {
    std::string path = key;
    if (key.find('.') == std::string::npos) {
        const auto& m = key_sections();
        const auto it = m.find(key);
        if (it == m.end()) throw ConfigError("unknown configuration key '" + key + "'");
        path = it->second + "." + key;
    }
    tree.put(Tree::path_type(path, '.'), value);
}

}  // namespace detail

inline const std::vector<std::size_t>& full_scale_values(sim::DgpCase c) {
    static const std::vector<std::size_t> case1 = {25, 50, 100}, case2 = {10, 20, 50},
                                          large = {100, 200, 500};
    switch (c) {
        case sim::DgpCase::ManySmall: return case1;
        case sim::DgpCase::ManySmallPlusTwoLarge: return case2;
        default: return large;
    }
}

/// Applies `overrides` ("key=value" or "section.key=value") on top of the INI
/// text, then the full-size preset if requested, and interprets the result.
inline StudySpec parse(const std::string& ini_text, const std::vector<std::string>& overrides,
                       const std::string& full_scale = {}) {
    using detail::Tree;
    Tree tree;
    if (!ini_text.empty()) {
        std::istringstream in(ini_text);
        try {
            boost::property_tree::ini_parser::read_ini(in, tree);
        } catch (const boost::property_tree::ini_parser_error& e) {
            throw ConfigError(std::string("config: ") + e.what());
        }
    }
    for (const auto& [section, body] : tree) {
        if (section != "dgp" && section != "study" && section != "criterion")
            throw ConfigError("unknown config section [" + section + "]");
        for (const auto& [key, v] : body) {
            (void)v;
            const auto& m = detail::key_sections();
            const bool ok = m.count(key) && (m.at(key) == section || (key == "seed" && section == "dgp"));
            if (!ok) throw ConfigError("unknown key '" + key + "' in [" + section + "]");
        }
    }

    StudySpec s;
    if (!full_scale.empty()) {
        const auto c = detail::to_case(full_scale);
        s.full_scale = full_scale;
        tree.put("dgp.case", std::to_string(static_cast<int>(c)));
        tree.put("study.reps", "10000");
        tree.put("criterion.target", "0.001");
        tree.put("criterion.methods", "srrom,srrsm_fair,srrsm_unfair,sr");
        tree.put("dgp.p", "8");
        tree.put("dgp.noise_var", "10");
        tree.put("dgp.large_size", "100");
        if (auto dg = tree.get_child_optional("dgp")) dg->erase("stratum_sizes");
        // Size settings come from the preset; pick among them with K= or stratum_size=.
        if (c == sim::DgpCase::ManySmall || c == sim::DgpCase::ManySmallPlusTwoLarge) {
            tree.put("dgp.stratum_size", "10");
            tree.put("dgp.K", std::to_string(full_scale_values(c).front()));
        } else {
            tree.put("dgp.K", "2");
            tree.put("dgp.stratum_size", std::to_string(full_scale_values(c).front()));
        }
    }
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not KEY=VALUE");
        detail::set_key(tree, io::trim(o.substr(0, eq)), io::trim(o.substr(eq + 1)));
    }

    auto get = [&](const std::string& path) -> std::optional<std::string> {
        if (auto v = tree.get_optional<std::string>(Tree::path_type(path, '.'))) return io::trim(*v);
        return std::nullopt;
    };

    auto& d = s.dgp;
    if (auto v = get("dgp.case")) d.dgp_case = detail::to_case(*v);
    if (auto v = get("dgp.p")) d.p = static_cast<int>(detail::to_uint("p", *v));
    if (auto v = get("dgp.noise_var")) d.noise_var = detail::to_double("noise_var", *v);
    if (auto v = get("dgp.ar_rho")) d.ar_rho = detail::to_double("ar_rho", *v);
    if (auto v = get("dgp.seed")) d.seed = detail::to_uint("dgp.seed", *v);
    if (auto v = get("dgp.dgp_seed")) d.seed = detail::to_uint("dgp_seed", *v);
    if (auto v = get("dgp.linear_only")) d.linear_only = detail::to_bool("linear_only", *v);
    if (auto v = get("dgp.propensity")) {
        if (*v == "equal") d.propensity = sim::PropensityMode::Equal;
        else if (*v == "unequal") d.propensity = sim::PropensityMode::Unequal;
        else throw ConfigError("propensity must be 'equal' or 'unequal'");
    }
    const bool two_large = d.dgp_case == sim::DgpCase::TwoLargeHomogeneous ||
                           d.dgp_case == sim::DgpCase::TwoLargeHeterogeneous;
    s.K = two_large ? 2 : 25;
    s.stratum_size = two_large ? 200 : 10;
    if (auto v = get("dgp.K")) s.K = detail::to_uint("K", *v);
    if (auto v = get("dgp.stratum_size")) s.stratum_size = detail::to_uint("stratum_size", *v);
    if (auto v = get("dgp.large_size")) s.large_size = detail::to_uint("large_size", *v);
    if (auto v = get("dgp.stratum_sizes")) {
        d.stratum_sizes.clear();
        for (const auto& item : detail::split_list(*v)) d.stratum_sizes.push_back(detail::to_uint("stratum_sizes", item));
        s.K = d.stratum_sizes.size();
    } else if (d.dgp_case == sim::DgpCase::ManySmallPlusTwoLarge) {
        d.stratum_sizes.assign(s.K, s.stratum_size);
        d.stratum_sizes.push_back(s.large_size);
        d.stratum_sizes.push_back(s.large_size);
    } else {
        if (two_large && s.K != 2) throw ConfigError("cases 3 and 4 have K = 2");
        d.stratum_sizes.assign(s.K, s.stratum_size);
    }

    auto& st = s.study;
    if (auto v = get("study.reps")) st.reps = detail::to_uint("reps", *v);
    if (auto v = get("study.alpha")) st.alpha = detail::to_double("alpha", *v);
    if (auto v = get("study.seed")) st.seed = detail::to_uint("seed", *v);
    if (auto v = get("study.threads")) st.threads = static_cast<unsigned>(detail::to_uint("threads", *v));
    if (auto v = get("study.law_draws")) st.law_draws = detail::to_uint("law_draws", *v);
    if (auto v = get("study.law_seed")) st.law_seed = detail::to_uint("law_seed", *v);
    if (auto v = get("study.enumerate_cap")) st.enumerate_cap = detail::to_uint("enumerate_cap", *v);
    if (auto v = get("study.redraw_population")) st.redraw_population = detail::to_bool("redraw_population", *v);
    if (auto v = get("study.samples")) s.samples = detail::to_bool("samples", *v);

    if (auto v = get("criterion.methods")) s.method_names = detail::split_list(*v);
    if (auto v = get("criterion.pa")) s.target = detail::to_double("pa", *v);
    if (auto v = get("criterion.target")) s.target = detail::to_double("target", *v);
    if (auto v = get("criterion.max_attempts")) s.max_attempts = detail::to_uint("max_attempts", *v);
    if (auto v = get("criterion.fallback")) {
        if (*v == "sr") s.fallback = Fallback::FallBackToSR;
        else if (*v == "error") s.fallback = Fallback::ErrorOut;
        else throw ConfigError("fallback must be 'sr' or 'error'");
    }

    // Range checks.
    if (d.p < 1) throw ConfigError("p must be >= 1");
    if (!(d.noise_var >= 0.0)) throw ConfigError("noise_var must be >= 0");
    if (!(std::abs(d.ar_rho) < 1.0)) throw ConfigError("ar_rho must lie in (-1, 1)");
    if (d.stratum_sizes.empty()) throw ConfigError("at least one stratum required");
    for (auto n : d.stratum_sizes)
        if (n < 4) throw ConfigError("stratum sizes must be >= 4");
    if (st.reps < 2) throw ConfigError("reps must be >= 2");
    if (!(st.alpha > 0.0 && st.alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
    if (st.law_draws < 100) throw ConfigError("law_draws must be >= 100");
    if (!(s.target > 0.0 && s.target <= 1.0)) throw ConfigError("target must lie in (0, 1]");
    if (s.max_attempts < 1) throw ConfigError("max_attempts must be >= 1");
    if (s.method_names.empty()) throw ConfigError("no methods");
    if (!s.full_scale.empty()) {
        const auto& allowed = full_scale_values(d.dgp_case);
        const std::size_t v = two_large ? s.stratum_size : s.K;
        if (std::find(allowed.begin(), allowed.end(), v) == allowed.end())
            throw ConfigError(std::string(two_large ? "stratum_size" : "K") + " = " + std::to_string(v) +
                              " is not one of the full-size settings");
        if (d.p != 8 || d.noise_var != 10.0) throw ConfigError("full-size runs fix p = 8 and noise_var = 10");
        std::vector<std::size_t> expected;
        if (two_large) expected.assign(2, s.stratum_size);
        else expected.assign(s.K, 10);
        if (d.dgp_case == sim::DgpCase::ManySmallPlusTwoLarge) expected.insert(expected.end(), 2, 100);
        if (d.stratum_sizes != expected) throw ConfigError("full-size runs fix the stratum sizes of each case");
    }
    for (std::size_t k = 0; k < d.stratum_sizes.size(); ++k) {
        const double nk1 = static_cast<double>(d.stratum_sizes[k]) * d.propensity_of(k);
        if (std::abs(nk1 - std::round(nk1)) > 1e-9)
            throw ConfigError("stratum " + std::to_string(k + 1) + ": size " +
                              std::to_string(d.stratum_sizes[k]) + " times propensity is not an integer");
    }
    return s;
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

/// Methods listed in the settings, with criteria built for dimension p and K strata.
inline std::vector<sim::MethodSpec> build_methods(const StudySpec& s) {
    const int p = s.dgp.p;
    const std::size_t K = s.dgp.strata_count();
    std::vector<sim::MethodSpec> out;
    for (const auto& name : s.method_names) {
        BalanceCriterion c;
        std::string label;
        if (name == "sr") {
            c = BalanceCriterion::sr();
            label = "SR";
        } else if (name == "srrom") {
            c = BalanceCriterion::overall(p, s.target);
            label = "SRRoM";
        } else if (name == "srrdm") {
            c = BalanceCriterion::difference_in_means(p, s.target);
            label = "SRRdM";
        } else if (name == "srrsm_fair" || name == "srrsm") {
            c = BalanceCriterion::fair(p, s.target, K);
            c.target = s.target;
            label = "SRRsM(f)";
        } else if (name == "srrsm_unfair") {
            c = BalanceCriterion::unfair(p, s.target, K);
            c.target = s.target;
            label = "SRRsM(u)";
        } else {
            throw ConfigError("unknown method '" + name + "'");
        }
        c.max_attempts = s.max_attempts;
        if (s.fallback) c.fallback = *s.fallback;
        out.push_back({label, c});
    }
    return out;
}

inline io::Json to_json(const StudySpec& s) {
    io::Json sizes = io::Json::array();
    for (auto n : s.dgp.stratum_sizes) sizes.push_back(n);
    io::Json props = io::Json::array();
    for (std::size_t k = 0; k < s.dgp.strata_count(); ++k) props.push_back(s.dgp.propensity_of(k));
    io::Json methods = io::Json::array();
    for (const auto& m : build_methods(s)) {
        io::Json j;
        j["name"] = m.name;
        j["method"] = method_name(m.criterion.method);
        j["target"] = m.criterion.target;
        j["threshold"] = io::json_number(m.criterion.threshold);
        j["stratum_targets"] = io::json_array(m.criterion.stratum_targets);
        j["stratum_thresholds"] = io::json_array(m.criterion.stratum_thresholds);
        j["max_attempts"] = m.criterion.max_attempts;
        j["fallback"] = m.criterion.fallback == Fallback::FallBackToSR ? "sr" : "error";
        methods.push_back(j);
    }
    io::Json j;
    j["full_scale"] = s.full_scale.empty() ? io::Json(nullptr) : io::Json(s.full_scale);
    j["dgp"] = {{"case", static_cast<int>(s.dgp.dgp_case)},
                {"case_name", sim::case_name(s.dgp.dgp_case)},
                {"K", s.dgp.strata_count()},
                {"stratum_sizes", sizes},
                {"propensity", s.dgp.propensity == sim::PropensityMode::Equal ? "equal" : "unequal"},
                {"propensities", props},
                {"p", s.dgp.p},
                {"noise_var", s.dgp.noise_var},
                {"ar_rho", s.dgp.ar_rho},
                {"seed", s.dgp.seed},
                {"linear_only", s.dgp.linear_only}};
    j["study"] = {{"reps", s.study.reps},
                  {"alpha", s.study.alpha},
                  {"seed", s.study.seed},
                  {"threads", s.study.threads},
                  {"law_draws", s.study.law_draws},
                  {"law_seed", s.study.law_seed},
                  {"enumerate_cap", s.study.enumerate_cap},
                  {"redraw_population", s.study.redraw_population},
                  {"samples", s.samples}};
    j["criterion"] = {{"target", s.target}, {"methods", methods}};
    return j;
}

}  // namespace stratrr::config
