// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "stratrr/balance.hpp"
#include "stratrr/config.hpp"
#include "stratrr/design.hpp"
#include "stratrr/inference.hpp"
#include "stratrr/sim.hpp"
#include "support.hpp"

using namespace stratrr;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double binomial_se(double p, std::size_t n) { return std::sqrt(p * (1 - p) / static_cast<double>(n)); }

// Additive-noise linear outcomes with per-stratum slopes.
void linear_outcomes(StratifiedPopulation& pop, const std::vector<Vector>& b1, const std::vector<Vector>& b0,
                     double sd, std::uint64_t seed) {
    testsupport::add_linear_outcomes(pop, b1, b0, sd, seed);
}

// ---------------------------------------------------------------------------

Verdict exact_covariance() {
    auto pop = testsupport::gaussian_population({4, 6}, {0.5, 0.5}, 2, 1);
    linear_outcomes(pop, {{1.0, -0.5}, {0.2, 0.9}}, {{0.3, 0.8}, {-0.4, 0.1}}, 1.0, 2);
    const auto dm = build_design_matrices(pop);
    const Matrix v = joint_covariance(pop, dm);
    const double tau = pop.average_treatment_effect();
    const double n = static_cast<double>(pop.size());
    std::vector<CompensatedSum> acc(9);
    std::size_t count = 0;
    AssignmentEnumerator e(pop, 1000);
    e.for_each([&](const ZVector& z) {
        const Vector tx = tau_x_hat(pop, dm, z);
        const double w[3] = {stratified_diff_in_means(pop, z) - tau, tx[0], tx[1]};
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) acc[3 * a + b].add(n * w[a] * w[b]);
        ++count;
    });
    double worst = 0.0;
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = 0; b < 3; ++b)
            worst = std::max(worst, std::abs(acc[3 * a + b].value() / static_cast<double>(count) - v(a, b)));
    return {count == 120 && worst <= 1e-12, fmt("%zu assignments, max entry error %.2e (tol 1e-12)", count, worst)};
}

Verdict special_functions() {
    double closed = 0.0;
    for (int i = 0; i <= 1000; ++i) {
        const double x = 0.05 * i;
        closed = std::max(closed, std::abs(chi2_cdf(2, x) - (1.0 - std::exp(-x / 2))));
        closed = std::max(closed, std::abs(chi2_cdf(4, x) - (1.0 - std::exp(-x / 2) * (1.0 + x / 2))));
    }
    double prob_trip = 0.0, value_trip = 0.0;
    for (int df = 1; df <= 50; ++df) {
        for (double p : {1e-10, 1e-6, 1e-3, 0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99, 0.999, 1 - 1e-6})
            prob_trip = std::max(prob_trip, std::abs(chi2_cdf(df, chi2_quantile(df, p)) - p));
        for (int i = 1; i <= 1000; ++i) {
            const double x = 0.05 * i;
            const double c = chi2_cdf(df, x);
            if (c < 1e-12) continue;
            if (c > 1.0 - 1e-6) break;
            value_trip = std::max(value_trip, std::abs(chi2_quantile(df, c) - x) / x);
        }
    }
    const bool ok = closed <= 1e-12 && prob_trip <= 1e-8 && value_trip <= 1e-8;
    return {ok, fmt("closed-form error %.1e, cdf(quantile) error %.1e, relative quantile(cdf) error %.1e", closed,
                    prob_trip, value_trip)};
}

Verdict acceptance_rate() {
    const auto pop = testsupport::gaussian_population({500, 500, 500, 500}, {0.5, 0.5, 0.5, 0.5}, 4, 3);
    const auto dm = build_design_matrices(pop);
    const double a = threshold_for(4, 0.01);
    StratifiedSampler sampler(pop);
    Rng rng(4);
    ZVector z(pop.size());
    const std::size_t draws = 100'000;
    std::size_t hits = 0;
    for (std::size_t r = 0; r < draws; ++r) {
        sampler.draw(rng, z);
        hits += mahalanobis_overall(dm, tau_x_hat(pop, dm, z), pop.size()) < a;
    }
    const double rate = static_cast<double>(hits) / static_cast<double>(draws);
    const double rel = std::abs(rate - 0.01) / 0.01;
    return {rel <= 0.15, fmt("acceptance %.5f vs 0.01 (relative error %.1f%%, tol 15%%)", rate, 100 * rel)};
}

Verdict variance_reduction() {
    auto cfg = sim::DgpConfig::case3(500);
    cfg.linear_only = true;
    cfg.seed = 5;
    const auto pop = sim::generate_population(cfg);
    const auto dm = build_design_matrices(pop);
    const auto crit = BalanceCriterion::overall(cfg.p, 0.001);
    const auto tv = theoretical_variances(pop, dm, crit.threshold);
    sim::StudyConfig sc;
    sc.reps = 4000;
    sc.seed = 6;
    sc.compute_ci = false;
    const auto res = sim::run_study(pop, {{"SRRoM", crit}}, sc);
    const double n = static_cast<double>(pop.size());
    CompensatedSum s, s2;
    for (const auto& r : res.methods[0].records) {
        const double e = std::sqrt(n) * r.error_value();
        s.add(e);
        s2.add(e * e);
    }
    const double m = static_cast<double>(sc.reps);
    const double mean = s.value() / m;
    const double var = (s2.value() - m * mean * mean) / (m - 1);
    const double rel = std::abs(var / tv.var_srrom - 1.0);
    return {rel <= 0.10, fmt("empirical %.4f vs theory %.4f (R^2 %.3f, SR %.4f; relative error %.1f%%, tol 10%%)", var,
                             tv.var_srrom, tv.r2, tv.var_sr, 100 * rel)};
}

// Residuals orthogonal to X within each stratum and a common slope pair give
// identical projection coefficients in every stratum.
StratifiedPopulation equal_projection_population(std::uint64_t seed) {
    auto pop = testsupport::gaussian_population({60, 90}, {0.5, 0.5}, 3, seed);
    Rng rng(seed + 1);
    const Vector b1 = {1.0, -0.7, 0.4}, b0 = {0.2, 0.5, -1.1};
    Vector y1(pop.size()), y0(pop.size());
    for (std::size_t k = 0; k < 2; ++k) {
        const auto idx = pop.stratum(k);
        const std::size_t nk = idx.size(), p = pop.dim();
        Vector mx(p, 0.0);
        for (std::size_t i : idx)
            for (std::size_t j = 0; j < p; ++j) mx[j] += pop.x(i)[j] / static_cast<double>(nk);
        Matrix sxx(p, p);
        for (std::size_t i : idx)
            for (std::size_t a = 0; a < p; ++a)
                for (std::size_t b = 0; b < p; ++b) sxx(a, b) += (pop.x(i)[a] - mx[a]) * (pop.x(i)[b] - mx[b]);
        const Matrix inv = testsupport::dense_inverse(sxx);
        for (int arm = 0; arm < 2; ++arm) {
            Vector e(nk);
            for (double& v : e) v = (k + 1.0) * rng.normal();
            Vector sxe(p, 0.0);
            for (std::size_t t = 0; t < nk; ++t)
                for (std::size_t j = 0; j < p; ++j) sxe[j] += (pop.x(idx[t])[j] - mx[j]) * e[t];
            Vector coef(p, 0.0);
            for (std::size_t a = 0; a < p; ++a)
                for (std::size_t b = 0; b < p; ++b) coef[a] += inv(a, b) * sxe[b];
            const Vector& beta = arm ? b1 : b0;
            for (std::size_t t = 0; t < nk; ++t) {
                double v = e[t] + 3.0 * static_cast<double>(k);
                for (std::size_t j = 0; j < p; ++j) v += pop.x(idx[t])[j] * beta[j] - (pop.x(idx[t])[j] - mx[j]) * coef[j];
                (arm ? y1 : y0)[idx[t]] = v;
            }
        }
    }
    pop.set_potential_outcomes({y1, y0});
    return pop;
}

Verdict variance_ordering() {
    Rng rng(7);
    int violations = 0;
    double worst_ratio = 0.0;
    const double a = threshold_for(3, 0.01);
    const Vector th = {a, a};
    for (int rep = 0; rep < 20; ++rep) {
        const double p0 = rep % 2 ? 0.5 : 0.4;
        auto pop = testsupport::gaussian_population({50, 70}, {0.5, p0}, 3, 100 + rep);
        std::vector<Vector> b1, b0;
        for (int k = 0; k < 2; ++k) {
            b1.push_back({rng.normal(), rng.normal(), rng.normal()});
            b0.push_back({rng.normal(), rng.normal(), rng.normal()});
        }
        linear_outcomes(pop, b1, b0, 0.5, 200 + rep);
        const auto tv = theoretical_variances(pop, build_design_matrices(pop), a, th);
        if (!(tv.var_srrsm <= tv.var_srrom)) ++violations;
        worst_ratio = std::max(worst_ratio, tv.var_srrsm / tv.var_srrom);
    }
    const auto pop = equal_projection_population(300);
    const auto tv = theoretical_variances(pop, build_design_matrices(pop), a, th);
    const double gap = std::abs(tv.var_srrsm - tv.var_srrom);
    return {violations == 0 && gap <= 1e-10,
            fmt("%d/20 violations (max SRRsM/SRRoM %.4f); equal-projection gap %.1e (tol 1e-10)", violations,
                worst_ratio, gap)};
}

Verdict distribution_shape() {
    auto cfg = sim::DgpConfig::case3(1000);
    cfg.linear_only = true;
    cfg.noise_var = 1.0;
    cfg.seed = 8;
    const auto pop = sim::generate_population(cfg);
    const auto dm = build_design_matrices(pop);
    const auto crit = BalanceCriterion::overall(cfg.p, 0.01);
    const auto tv = theoretical_variances(pop, dm, crit.threshold);
    sim::StudyConfig sc;
    sc.reps = 5000;
    sc.seed = 9;
    sc.compute_ci = false;
    const auto res = sim::run_study(pop, {{"SRRoM", crit}}, sc);
    const double scale = std::sqrt(static_cast<double>(pop.size()) / tv.sigma_tt);
    std::vector<double> est;
    for (const auto& r : res.methods[0].records) est.push_back(scale * r.error_value());
    LawEngine engine;
    const auto law = TruncatedGaussianLaw::overall(tv.r2, cfg.p, crit.threshold, 1'000'000, 10);
    const Vector draws = engine.sample(law);
    const auto ks = testsupport::ks_two_sample(est, std::vector<double>(draws.begin(), draws.end()));
    return {ks.p_value > 0.001, fmt("R^2 %.3f, KS D = %.4f, p = %.3f (reject below 0.001)", tv.r2, ks.statistic,
                                    ks.p_value)};
}

// Desk-scale studies shared by the coverage and ordering criteria.
std::map<std::string, sim::StudyResult>& desk_results() {
    static std::map<std::string, sim::StudyResult> cache;
    if (cache.empty())
        for (const char* c : {"case1", "case2", "case3", "case4"}) {
            const auto settings = config::parse(config::read_file(std::string(STRATRR_CONFIG_DIR) + "/" + c + ".ini"), {}, "");
            cache[c] = sim::run_study(settings.dgp, config::build_methods(settings), settings.study);
        }
    return cache;
}

const sim::ReplicationMetrics& metrics_of(const sim::StudyResult& r, const std::string& name) {
    for (const auto& m : r.methods)
        if (m.metrics.method == name) return m.metrics;
    throw std::runtime_error("method " + name + " missing from study");
}

Verdict coverage() {
    auto& res = desk_results();
    bool ok = true;
    std::string detail;
    for (const char* c : {"case1", "case3"})
        for (const char* m : {"SR", "SRRoM", "SRRsM(f)", "SRRsM(u)"}) {
            const auto& x = metrics_of(res[c], m);
            const double floor = 0.95 - 3 * binomial_se(0.95, x.reps);
            ok = ok && x.coverage >= floor && x.failures == 0;
            detail += fmt("%s %s %.2f%%; ", c, m, 100 * x.coverage);
        }
    const auto& any = metrics_of(res["case1"], "SR");
    detail += fmt("floor %.2f%%", 100 * (0.95 - 3 * binomial_se(0.95, any.reps)));
    return {ok, detail};
}

Verdict table_ordering() {
    auto& res = desk_results();
    bool ok = true;
    std::string detail;
    for (const char* c : {"case1", "case2", "case3", "case4"}) {
        const double rom = metrics_of(res[c], "SRRoM").mean_ci_length, sr = metrics_of(res[c], "SR").mean_ci_length;
        ok = ok && rom < sr;
        detail += fmt("%s CI %.3f<%.3f; ", c, rom, sr);
    }
    const double fair = metrics_of(res["case4"], "SRRsM(f)").rmse, rom = metrics_of(res["case4"], "SRRoM").rmse;
    ok = ok && fair < rom;
    detail += fmt("case4 RMSE SRRsM(f) %.4f < SRRoM %.4f", fair, rom);
    return {ok, detail};
}

Verdict srrdm_bias_check() {
    // Unequal propensities and stratum-dependent covariate means make the
    // pooled covariate contrast off-center.
    const std::size_t nk = 400;
    const double shift = 0.08;
    std::vector<std::size_t> strata;
    Matrix x(2 * nk, 2);
    Rng rx(11);
    for (std::size_t i = 0; i < 2 * nk; ++i) {
        const std::size_t k = i < nk ? 0 : 1;
        strata.push_back(k);
        for (std::size_t j = 0; j < 2; ++j) x(i, j) = rx.normal() + (k ? shift : -shift);
    }
    StratifiedPopulation pop(strata, {0.25, 0.75}, x);
    Vector y1(pop.size()), y0(pop.size());
    for (std::size_t i = 0; i < pop.size(); ++i) {
        y0[i] = 2.0 * x(i, 0) + 1.0 * x(i, 1) + 0.5 * rx.normal();
        y1[i] = y0[i] + 1.0 + 0.5 * x(i, 0);
    }
    pop.set_potential_outcomes({y1, y0});
    const auto dm = build_design_matrices(pop);
    const auto crit = BalanceCriterion::difference_in_means(2, 0.1);
    Rng rb(12);
    const auto predicted = srrdm_bias(pop, dm, crit.threshold, 400'000, rb);

    sim::StudyConfig sc;
    sc.reps = 4000;
    sc.seed = 13;
    sc.compute_ci = false;
    const auto res = sim::run_study(pop, {{"SRRdM", crit}}, sc);
    const double rn = std::sqrt(static_cast<double>(pop.size()));
    CompensatedSum s, s2;
    for (const auto& r : res.methods[0].records) {
        s.add(rn * r.error_value());
        s2.add(rn * rn * r.error_value() * r.error_value());
    }
    const double m = static_cast<double>(sc.reps);
    const double bias = s.value() / m;
    const double se = std::sqrt((s2.value() - m * bias * bias) / (m - 1) / m);
    const double se_diff = std::hypot(se, predicted.mc_se);
    const bool biased = std::abs(bias) > 3 * se;
    const bool matches = std::abs(bias - predicted.bias) <= 3 * se_diff;

    // Equal propensities: pooled and stratified statistics coincide.
    const auto eq = testsupport::gaussian_population({300, 500}, {0.5, 0.5}, 3, 14);
    const auto dme = build_design_matrices(eq);
    Rng rz(15);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const auto z = stratified_randomize(eq, rz).z;
        const double mo = mahalanobis_overall(dme, tau_x_hat(eq, dme, z), eq.size());
        worst = std::max(worst, std::abs(mahalanobis_dm(eq, dme, z) - mo));
    }
    return {biased && matches && worst <= 1e-10,
            fmt("empirical %.4f (SE %.4f) vs predicted %.4f (SE %.4f); equal-p max |M_dm - M| %.1e", bias, se,
                predicted.bias, predicted.mc_se, worst)};
}

// Interval length nu_{0.975} - nu_{0.025} and its MC standard error.
struct Range {
    double length;
    double se;
};

Range range_of(LawEngine& engine, const TruncatedGaussianLaw& law) {
    const double xi[] = {0.025, 0.975};
    const auto q = engine.quantiles(law, xi);
    return {q[1].value - q[0].value, std::hypot(q[0].mc_se, q[1].mc_se)};
}

Verdict monotonicity() {
    LawEngine engine;
    const std::size_t draws = 200'000;
    const std::uint64_t seed = 16;
    int bad = 0, checks = 0;
    std::string detail;
    // direction +1: non-decreasing along the grid; -1: non-increasing.
    auto check = [&](const char* name, const std::vector<Range>& r, int direction) {
        for (std::size_t i = 1; i < r.size(); ++i) {
            ++checks;
            const double step = direction * (r[i].length - r[i - 1].length);
            if (step < -3 * std::hypot(r[i].se, r[i - 1].se)) ++bad;
        }
        detail += fmt("%s %.3f..%.3f; ", name, r.front().length, r.back().length);
    };
    std::vector<Range> by_r2, by_pa, by_p, by_stratum_r2;
    for (double r2 : {0.0, 0.25, 0.5, 0.75, 0.99})
        by_r2.push_back(range_of(engine, TruncatedGaussianLaw::overall(r2, 4, threshold_for(4, 0.01), draws, seed)));
    for (double pa : {0.001, 0.01, 0.1, 1.0})
        by_pa.push_back(range_of(engine, TruncatedGaussianLaw::overall(0.5, 4, threshold_for(4, pa), draws, seed)));
    for (int p : {1, 2, 4, 8})
        by_p.push_back(range_of(engine, TruncatedGaussianLaw::overall(0.5, p, threshold_for(p, 0.01), draws, seed)));
    for (double r2 : {0.0, 0.25, 0.5, 0.75, 0.99}) {
        const Vector w = {0.6, 0.4}, r2s = {r2, 0.5};
        const Vector th = {threshold_for(3, 0.05), threshold_for(3, 0.05)};
        by_stratum_r2.push_back(range_of(engine, TruncatedGaussianLaw::stratified(w, r2s, 3, th, draws, seed)));
    }
    check("R^2", by_r2, -1);
    check("p_a", by_pa, +1);
    check("p", by_p, +1);
    check("R^2_[1]", by_stratum_r2, -1);
    detail += fmt("%d/%d steps outside 3 MC SE", bad, checks);
    return {bad == 0, detail};
}

}  // namespace

int main() {
    const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria = {
        {"exact SR covariance by enumeration", exact_covariance},
        {"chi-square special functions", special_functions},
        {"acceptance rate at p_a = 0.01", acceptance_rate},
        {"SRRoM variance reduction", variance_reduction},
        {"SRRsM vs SRRoM variance ordering", variance_ordering},
        {"SRRoM limiting distribution (KS)", distribution_shape},
        {"interval coverage, desk cases 1 and 3", coverage},
        {"CI length and RMSE ordering, desk cases", table_ordering},
        {"SRRdM bias", srrdm_bias_check},
        {"quantile-range monotonicity", monotonicity},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const auto start = std::chrono::steady_clock::now();
        Verdict v;
        try {
            v = criteria[i].second();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        failures += !v.pass;
        std::printf("%s %2zu %s: %s [%.1f s]\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, v.detail.c_str(),
                    secs);
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
