#pragma once

// Replication simulator: data-generating process, repeated
// (re)randomization + estimation, and per-method evaluation metrics.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "stratrr/balance.hpp"
#include "stratrr/design.hpp"
#include "stratrr/inference.hpp"
#include "stratrr/numeric.hpp"
#include "stratrr/random.hpp"

namespace stratrr::sim {

enum class DgpCase { ManySmall = 1, ManySmallPlusTwoLarge = 2, TwoLargeHomogeneous = 3, TwoLargeHeterogeneous = 4 };
enum class PropensityMode { Equal, Unequal };

struct DgpConfig {
    DgpCase dgp_case = DgpCase::TwoLargeHomogeneous;
    std::vector<std::size_t> stratum_sizes = {200, 200};
    PropensityMode propensity = PropensityMode::Equal;
    int p = 8;
    double noise_var = 10.0;
    double ar_rho = 0.5;
    std::uint64_t seed = 1;
    bool linear_only = false;  // zero the exp-term coefficients

    static DgpConfig case1(std::size_t K, std::size_t size = 10) {
        DgpConfig c;
        c.dgp_case = DgpCase::ManySmall;
        c.stratum_sizes.assign(K, size);
        return c;
    }
    static DgpConfig case2(std::size_t small_strata, std::size_t small = 10, std::size_t large = 100) {
        DgpConfig c;
        c.dgp_case = DgpCase::ManySmallPlusTwoLarge;
        c.stratum_sizes.assign(small_strata, small);
        c.stratum_sizes.push_back(large);
        c.stratum_sizes.push_back(large);
        return c;
    }
    static DgpConfig case3(std::size_t size) {
        DgpConfig c;
        c.dgp_case = DgpCase::TwoLargeHomogeneous;
        c.stratum_sizes = {size, size};
        return c;
    }
    static DgpConfig case4(std::size_t size) {
        DgpConfig c = case3(size);
        c.dgp_case = DgpCase::TwoLargeHeterogeneous;
        return c;
    }

    std::size_t strata_count() const { return stratum_sizes.size(); }
    std::size_t size() const {
        std::size_t n = 0;
        for (auto s : stratum_sizes) n += s;
        return n;
    }

    /// 0.5 everywhere, or 0.4 for k <= K/2 and 0.6 otherwise (k one-based).
    double propensity_of(std::size_t k) const {
        if (propensity == PropensityMode::Equal) return 0.5;
        return 2 * (k + 1) <= strata_count() ? 0.4 : 0.6;
    }
};

inline const char* case_name(DgpCase c) {
    switch (c) {
        case DgpCase::ManySmall: return "many-small";
        case DgpCase::ManySmallPlusTwoLarge: return "many-small-plus-two-large";
        case DgpCase::TwoLargeHomogeneous: return "two-large-homogeneous";
        case DgpCase::TwoLargeHeterogeneous: return "two-large-heterogeneous";
    }
    return "?";
}

struct Coefficients {
    Vector b1_lin, b1_exp, b0_lin, b0_exp;
};

inline Coefficients draw_coefficients(int p, Rng& rng, bool linear_only) {
    Coefficients c;
    for (int j = 0; j < p; ++j) {
        const double b11 = rng.student_t(3);
        const double b12 = 0.1 * rng.student_t(3);
        const double b01 = b11 + rng.student_t(3);
        const double b02 = b12 + 0.1 * rng.student_t(3);
        c.b1_lin.push_back(b11);
        c.b0_lin.push_back(b01);
        c.b1_exp.push_back(linear_only ? 0.0 : b12);
        c.b0_exp.push_back(linear_only ? 0.0 : b02);
    }
    return c;
}

/// Y_i(z) = X_i'b_z1 + exp(X_i'b_z2) + eps_i(z), X_i ~ N(0, [rho^|i-j|]).
/// Coefficients are shared across strata except in the heterogeneous case,
/// where each stratum draws its own.
inline StratifiedPopulation generate_population(const DgpConfig& cfg) {
    if (cfg.p < 1) throw DomainError("generate_population: p must be >= 1");
    if (cfg.stratum_sizes.empty()) throw DomainError("generate_population: no strata");
    const std::size_t K = cfg.strata_count();
    const std::size_t n = cfg.size();
    const auto p = static_cast<std::size_t>(cfg.p);
    Rng rng(cfg.seed, 0x706f70ULL);

    std::vector<Coefficients> coefs;
    const std::size_t sets = cfg.dgp_case == DgpCase::TwoLargeHeterogeneous ? K : 1;
    for (std::size_t s = 0; s < sets; ++s) coefs.push_back(draw_coefficients(cfg.p, rng, cfg.linear_only));

    Matrix ar(p, p);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < p; ++j)
            ar(i, j) = std::pow(cfg.ar_rho, std::abs(static_cast<double>(i) - static_cast<double>(j)));
    const Cholesky chol(SpdMatrix{ar});
    const Matrix& l = chol.lower();

    Matrix x(n, p);
    std::vector<std::size_t> stratum_of(n);
    Vector propensity(K);
    Vector y1(n), y0(n);
    const double noise_sd = std::sqrt(cfg.noise_var);
    std::size_t unit = 0;
    Vector g(p);
    for (std::size_t k = 0; k < K; ++k) {
        propensity[k] = cfg.propensity_of(k);
        const Coefficients& c = coefs[sets == 1 ? 0 : k];
        for (std::size_t r = 0; r < cfg.stratum_sizes[k]; ++r, ++unit) {
            stratum_of[unit] = k;
            for (auto& v : g) v = rng.normal();
            auto xi = x.row(unit);
            for (std::size_t i = 0; i < p; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j <= i; ++j) s += l(i, j) * g[j];
                xi[i] = s;
            }
            y1[unit] = dot(xi, c.b1_lin) + std::exp(dot(xi, c.b1_exp)) + noise_sd * rng.normal();
            y0[unit] = dot(xi, c.b0_lin) + std::exp(dot(xi, c.b0_exp)) + noise_sd * rng.normal();
        }
    }
    StratifiedPopulation pop(std::move(stratum_of), std::move(propensity), std::move(x));
    pop.set_potential_outcomes({std::move(y1), std::move(y0)});
    return pop;
}

struct MethodSpec {
    std::string name;
    BalanceCriterion criterion;
};

/// The four comparisons used throughout: SRRoM, fair and unfair SRRsM, SR.
inline std::vector<MethodSpec> standard_methods(int p, double pa, std::size_t K) {
    return {{"SRRoM", BalanceCriterion::overall(p, pa)},
            {"SRRsM(f)", BalanceCriterion::fair(p, pa, K)},
            {"SRRsM(u)", BalanceCriterion::unfair(p, pa, K)},
            {"SR", BalanceCriterion::sr()}};
}

struct StudyConfig {
    std::size_t reps = 2000;
    double alpha = 0.05;
    unsigned threads = 1;
    std::uint64_t seed = 1;
    std::size_t law_draws = 20'000;
    std::uint64_t law_seed = kDefaultLawSeed;
    std::uint64_t enumerate_cap = 100'000;
    bool compute_ci = true;
    bool redraw_population = false;  // super-population mode (DgpConfig overload only)
};

struct ReplicationRecord {
    double tau = 0.0;
    double tau_hat = 0.0;
    double ci_lower = 0.0;
    double ci_upper = 0.0;
    std::uint64_t attempts = 0;
    bool fell_back = false;
    bool failed = false;
    std::string error;

    double error_value() const { return tau_hat - tau; }
    bool covered() const { return ci_lower <= tau && tau <= ci_upper; }
};

struct ReplicationMetrics {
    std::string method;
    std::size_t reps = 0;  // successful replications
    double bias = 0.0;
    double sd = 0.0;       // sample SD, divisor reps - 1
    double rmse = 0.0;
    double mean_ci_length = 0.0;
    double coverage = 0.0;
    std::size_t fallbacks = 0;
    std::size_t failures = 0;
    double mean_attempts = 0.0;
    double acceptance_rate = 0.0;  // accepted draws / total draws, non-fallback reps
};

struct MethodResult {
    MethodSpec spec;
    ReplicationMetrics metrics;
    std::vector<ReplicationRecord> records;
};

struct StudyResult {
    double tau = 0.0;  // of the fixed population (NaN when redrawn)
    std::vector<MethodResult> methods;
};

inline ReplicationMetrics summarize(const std::string& name, const std::vector<ReplicationRecord>& records) {
    ReplicationMetrics m;
    m.method = name;
    CompensatedSum err, err_sq, len, att;
    std::size_t covered = 0, accepted_reps = 0;
    std::uint64_t accepted_attempts = 0;
    for (const auto& r : records) {
        if (r.failed) {
            ++m.failures;
            continue;
        }
        ++m.reps;
        const double e = r.error_value();
        err.add(e);
        err_sq.add(e * e);
        len.add(r.ci_upper - r.ci_lower);
        att.add(static_cast<double>(r.attempts));
        covered += r.covered() ? 1 : 0;
        if (r.fell_back) {
            ++m.fallbacks;
        } else {
            ++accepted_reps;
            accepted_attempts += r.attempts;
        }
    }
    if (m.reps == 0) return m;
    const double n = static_cast<double>(m.reps);
    m.bias = err.value() / n;
    const double mse = err_sq.value() / n;
    m.rmse = std::sqrt(mse);
    m.sd = m.reps > 1 ? std::sqrt(std::max(0.0, (mse - m.bias * m.bias) * n / (n - 1.0))) : 0.0;
    m.mean_ci_length = len.value() / n;
    m.coverage = static_cast<double>(covered) / n;
    m.mean_attempts = att.value() / n;
    if (accepted_attempts > 0)
        m.acceptance_rate = static_cast<double>(accepted_reps) / static_cast<double>(accepted_attempts);
    return m;
}

namespace detail {

/// Per-population state for one method: the design and a rerandomizer per worker.
struct MethodContext {
    const MethodSpec* spec;
    std::vector<Rerandomizer> workers;
};

inline ReplicationRecord replicate(const StratifiedPopulation& pop, const DesignMatrices& dm,
                                   Rerandomizer& rr, const StudyConfig& cfg, LawEngine& engine,
                                   std::size_t method_index, std::size_t rep, double tau) {
    ReplicationRecord rec;
    rec.tau = tau;
    try {
        Rng rng(cfg.seed, method_index + 1, rep);
        const auto res = rr.run(rng);
        rec.attempts = res.attempts;
        rec.fell_back = res.fell_back;
        const Vector y = observed_outcomes(pop, res.assignment.z);
        if (!cfg.compute_ci) {
            rec.tau_hat = stratified_diff_in_means(pop, res.assignment.z, y);
            rec.ci_lower = rec.ci_upper = rec.tau_hat;
            return rec;
        }
        AnalysisOptions opt;
        opt.ci = {cfg.alpha, cfg.law_draws, cfg.law_seed};
        const BalanceCriterion& used = res.fell_back ? BalanceCriterion{} : rr.criterion();
        const auto report = analyze(pop, dm, used, res.assignment.z, y, opt, engine);
        rec.tau_hat = report.tau_hat;
        rec.ci_lower = report.ci_lower;
        rec.ci_upper = report.ci_upper;
    } catch (const std::exception& e) {
        rec.failed = true;
        rec.error = e.what();
    }
    return rec;
}

template <class Fn>
void parallel_for(std::size_t count, unsigned threads, Fn&& fn) {
    threads = std::max(1u, threads);
    if (threads == 1 || count < 2) {
        for (std::size_t i = 0; i < count; ++i) fn(0u, i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t)
        pool.emplace_back([&, t] {
            for (std::size_t i = next++; i < count; i = next++) fn(t, i);
        });
    for (auto& th : pool) th.join();
}

}  // namespace detail

/// Runs `cfg.reps` replications of every method on a fixed population.
/// Replication r of method m uses stream (seed, m + 1, r), so results do not
/// depend on the thread count and a longer run extends a shorter one.
inline StudyResult run_study(const StratifiedPopulation& pop, const std::vector<MethodSpec>& methods,
                             const StudyConfig& cfg, LawEngine* shared_engine = nullptr) {
    check_alpha(cfg.alpha);
    LawEngine local;
    LawEngine& engine = shared_engine ? *shared_engine : local;
    const DesignMatrices dm = build_design_matrices(pop);
    const double tau = pop.average_treatment_effect();
    const unsigned threads = std::max(1u, cfg.threads);

    StudyResult out;
    out.tau = tau;
    for (std::size_t m = 0; m < methods.size(); ++m) {
        std::vector<Rerandomizer> workers;
        RerandomizerOptions ro;
        ro.enumerate_cap = cfg.enumerate_cap;
        workers.emplace_back(pop, dm, methods[m].criterion, ro);
        for (unsigned t = 1; t < threads; ++t) workers.push_back(workers.front());
        std::vector<ReplicationRecord> records(cfg.reps);
        detail::parallel_for(cfg.reps, threads, [&](unsigned t, std::size_t rep) {
            records[rep] = detail::replicate(pop, dm, workers[t], cfg, engine, m, rep, tau);
        });
        MethodResult mr{methods[m], summarize(methods[m].name, records), std::move(records)};
        out.methods.push_back(std::move(mr));
    }
    return out;
}

/// Study driven by a DGP. With `redraw_population` each replication gets its
/// own population (seed offset by the replication index); otherwise the
/// population is drawn once.
inline StudyResult run_study(const DgpConfig& dgp, const std::vector<MethodSpec>& methods,
                             const StudyConfig& cfg) {
    if (!cfg.redraw_population) return run_study(generate_population(dgp), methods, cfg);
    check_alpha(cfg.alpha);
    LawEngine engine;
    StudyResult out;
    out.tau = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t m = 0; m < methods.size(); ++m) {
        std::vector<ReplicationRecord> records(cfg.reps);
        detail::parallel_for(cfg.reps, cfg.threads, [&](unsigned, std::size_t rep) {
            DgpConfig d = dgp;
            d.seed = dgp.seed + 0x9e3779b97f4a7c15ULL * (rep + 1);
            const auto pop = generate_population(d);
            const auto dm = build_design_matrices(pop);
            RerandomizerOptions ro;
            ro.enumerate_cap = cfg.enumerate_cap;
            Rerandomizer rr(pop, dm, methods[m].criterion, ro);
            records[rep] = detail::replicate(pop, dm, rr, cfg, engine, m, rep, pop.average_treatment_effect());
        });
        out.methods.push_back({methods[m], summarize(methods[m].name, records), std::move(records)});
    }
    return out;
}

/// Aligned text table: Method, Bias, SD, RMSE, CI length, CP(%).
inline std::string format_table(const StudyResult& r) {
    std::ostringstream os;
    os << std::left << std::setw(10) << "Method" << std::right << std::setw(10) << "Bias"
       << std::setw(10) << "SD" << std::setw(10) << "RMSE" << std::setw(11) << "CI length"
       << std::setw(9) << "CP(%)" << '\n';
    os << std::fixed;
    for (const auto& m : r.methods) {
        const auto& x = m.metrics;
        os << std::left << std::setw(10) << x.method << std::right << std::setprecision(4)
           << std::setw(10) << x.bias << std::setw(10) << x.sd << std::setw(10) << x.rmse
           << std::setw(11) << x.mean_ci_length << std::setprecision(2) << std::setw(9)
           << 100.0 * x.coverage << '\n';
    }
    return os.str();
}

}  // namespace stratrr::sim
