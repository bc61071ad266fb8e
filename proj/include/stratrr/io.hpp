#pragma once

// CSV ingestion/export of unit tables and JSON helpers.

#include <boost/tokenizer.hpp>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "stratrr/design.hpp"
#include "stratrr/numeric.hpp"

namespace stratrr::io {

using Json = nlohmann::ordered_json;

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kToolVersion = "0.1.0";

/// Malformed input (unreadable file, bad CSV, non-numeric cell, bad config).
class ParseError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::optional<std::size_t> column(std::string_view name) const {
        for (std::size_t j = 0; j < header.size(); ++j)
            if (header[j] == name) return j;
        return std::nullopt;
    }
};

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

/// Comma-separated, header row required, double-quote escaping.
inline CsvTable read_csv(std::istream& in) {
    using Tokenizer = boost::tokenizer<boost::escaped_list_separator<char>>;
    const boost::escaped_list_separator<char> sep('\\', ',', '"');
    CsvTable t;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line_no == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
        if (trim(line).empty()) continue;
        std::vector<std::string> cells;
        try {
            for (const auto& tok : Tokenizer(line, sep)) cells.push_back(trim(tok));
        } catch (const boost::escaped_list_error& e) {
            throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        }
        if (t.header.empty()) {
            t.header = std::move(cells);
            continue;
        }
        if (cells.size() != t.header.size())
            throw ParseError("line " + std::to_string(line_no) + ": expected " +
                             std::to_string(t.header.size()) + " fields, found " +
                             std::to_string(cells.size()));
        t.rows.push_back(std::move(cells));
    }
    if (t.header.empty()) throw ParseError("empty CSV: header row required");
    return t;
}

inline CsvTable read_csv_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open " + path);
    return read_csv(f);
}

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + '"';
}

inline void write_csv(std::ostream& out, const CsvTable& t) {
    auto row = [&](const std::vector<std::string>& cells) {
        for (std::size_t j = 0; j < cells.size(); ++j) out << (j ? "," : "") << csv_escape(cells[j]);
        out << '\n';
    };
    row(t.header);
    for (const auto& r : t.rows) row(r);
}

/// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s, const std::string& where) {
    double v = 0.0;
    const char* b = s.data();
    const char* e = b + s.size();
    if (b != e && *b == '+') ++b;
    const auto res = std::from_chars(b, e, v);
    if (res.ec != std::errc() || res.ptr != e || s.empty())
        throw ParseError(where + ": '" + s + "' is not a number");
    return v;
}

struct LoadOptions {
    std::vector<std::string> covariates;  // explicit list; empty: every column starting with x_
    double propensity = 0.5;
    std::map<std::string, double> stratum_propensity;  // by label, overrides `propensity`
    bool infer_propensity = false;  // p_k = treated share when the treated column is present
    bool require_treated = false;
    bool require_outcome = false;
    bool forbid_treated = false;
};

/// A unit table turned into a population plus its optional design columns.
struct UnitData {
    CsvTable table;
    StratifiedPopulation population;
    std::vector<std::string> covariate_names;
    std::vector<std::size_t> covariate_columns;
    std::optional<ZVector> treated;
    std::optional<Vector> outcome;
};

inline UnitData load_units(CsvTable table, const LoadOptions& opt) {
    const auto stratum_col = table.column("stratum");
    if (!stratum_col) throw ParseError("missing required column 'stratum'");
    if (table.rows.empty()) throw ParseError("no data rows");
    const auto treated_col = table.column("treated");
    const auto outcome_col = table.column("outcome");
    if (opt.forbid_treated && treated_col) throw ParseError("input already has a 'treated' column");
    if (opt.require_treated && !treated_col) throw ParseError("missing required column 'treated'");
    if (opt.require_outcome && !outcome_col) throw ParseError("missing required column 'outcome'");

    UnitData d;
    if (opt.covariates.empty()) {
        for (std::size_t j = 0; j < table.header.size(); ++j)
            if (table.header[j].rfind("x_", 0) == 0) {
                d.covariate_names.push_back(table.header[j]);
                d.covariate_columns.push_back(j);
            }
    } else {
        for (const auto& name : opt.covariates) {
            const auto c = table.column(name);
            if (!c) throw ParseError("covariate column '" + name + "' not found");
            d.covariate_names.push_back(name);
            d.covariate_columns.push_back(*c);
        }
    }
    if (d.covariate_columns.empty()) throw ParseError("no covariate columns (x_* or --covariates)");

    const std::size_t n = table.rows.size();
    const std::size_t p = d.covariate_columns.size();
    std::vector<std::string> labels;
    std::map<std::string, std::size_t> index;
    std::vector<std::size_t> stratum_of(n);
    Matrix x(n, p);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& row = table.rows[i];
        const std::string where = "row " + std::to_string(i + 1);
        const std::string& lab = row[*stratum_col];
        if (lab.empty()) throw ParseError(where + ": empty stratum label");
        auto [it, inserted] = index.emplace(lab, labels.size());
        if (inserted) labels.push_back(lab);
        stratum_of[i] = it->second;
        for (std::size_t j = 0; j < p; ++j)
            x(i, j) = parse_double(row[d.covariate_columns[j]], where + ", column " + d.covariate_names[j]);
    }
    if (treated_col) {
        ZVector z(n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& c = table.rows[i][*treated_col];
            if (c != "0" && c != "1")
                throw ParseError("row " + std::to_string(i + 1) + ": treated must be 0 or 1");
            z[i] = c == "1";
        }
        d.treated = std::move(z);
    }
    if (outcome_col) {
        Vector y(n);
        for (std::size_t i = 0; i < n; ++i)
            y[i] = parse_double(table.rows[i][*outcome_col], "row " + std::to_string(i + 1) + ", column outcome");
        d.outcome = std::move(y);
    }

    const std::size_t K = labels.size();
    for (const auto& [lab, v] : opt.stratum_propensity)
        if (!index.count(lab)) throw ParseError("propensity given for unknown stratum '" + lab + "'");
    Vector props(K, opt.propensity);
    std::vector<std::size_t> nk(K), n1(K);
    for (std::size_t i = 0; i < n; ++i) {
        ++nk[stratum_of[i]];
        if (d.treated) n1[stratum_of[i]] += (*d.treated)[i];
    }
    for (std::size_t k = 0; k < K; ++k) {
        if (auto it = opt.stratum_propensity.find(labels[k]); it != opt.stratum_propensity.end())
            props[k] = it->second;
        else if (opt.infer_propensity && d.treated)
            props[k] = static_cast<double>(n1[k]) / static_cast<double>(nk[k]);
    }
    d.population = StratifiedPopulation(std::move(stratum_of), std::move(props), std::move(x), labels);
    if (d.outcome) d.population.set_observed_outcome(*d.outcome);
    if (d.treated) {
        for (std::size_t k = 0; k < K; ++k) {
            const double expected = static_cast<double>(nk[k]) * d.population.propensity(k);
            if (std::abs(expected - static_cast<double>(n1[k])) > 1e-9)
                throw ValidationError("stratum '" + labels[k] + "': " + std::to_string(n1[k]) +
                                      " treated units but n*p = " + std::to_string(expected));
        }
    }
    d.table = std::move(table);
    return d;
}

/// Covariates centered at their stratum means.
inline Matrix centered_covariates(const StratifiedPopulation& pop) {
    Matrix x = pop.covariates();
    for (std::size_t k = 0; k < pop.strata_count(); ++k) {
        const auto idx = pop.stratum(k);
        for (std::size_t j = 0; j < pop.dim(); ++j) {
            double m = 0.0;
            for (std::size_t i : idx) m += x(i, j);
            m /= static_cast<double>(idx.size());
            for (std::size_t i : idx) x(i, j) -= m;
        }
    }
    return x;
}

inline Json json_number(double v) {
    if (std::isnan(v) || std::isinf(v)) return Json(format_double(v));
    return Json(v);
}

inline Json json_array(std::span<const double> v) {
    Json a = Json::array();
    for (double x : v) a.push_back(json_number(x));
    return a;
}

inline void write_json_file(const std::string& path, const Json& j) {
    std::ofstream f(path);
    if (!f) throw ParseError("cannot write " + path);
    f << j.dump(2) << '\n';
}

}  // namespace stratrr::io
