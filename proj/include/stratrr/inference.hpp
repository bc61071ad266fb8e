#pragma once

// Point estimation, variance estimation, truncated-Gaussian quantiles and
// confidence intervals under SR, SRRoM and SRRsM; theoretical variances and
// the SRRdM bias diagnostic for simulation-truth mode.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "stratrr/balance.hpp"
#include "stratrr/design.hpp"
#include "stratrr/numeric.hpp"
#include "stratrr/random.hpp"

namespace stratrr {

class EmptyArm : public std::runtime_error {
   public:
    explicit EmptyArm(std::size_t k)
        : std::runtime_error("stratum " + std::to_string(k) + " has an empty arm"), stratum_(k) {}
    std::size_t stratum() const noexcept { return stratum_; }

   private:
    std::size_t stratum_;
};

class InsufficientArm : public std::runtime_error {
   public:
    InsufficientArm(std::size_t k, int arm)
        : std::runtime_error("stratum " + std::to_string(k) + " arm " + std::to_string(arm) +
                             " has fewer than 2 units"),
          stratum_(k), arm_(arm) {}
    std::size_t stratum() const noexcept { return stratum_; }
    int arm() const noexcept { return arm_; }

   private:
    std::size_t stratum_;
    int arm_;
};

class MissingPotentialOutcomes : public std::runtime_error {
   public:
    MissingPotentialOutcomes() : std::runtime_error("potential outcomes are required") {}
};

inline constexpr std::size_t kDefaultLawDraws = 200'000;
inline constexpr std::uint64_t kDefaultLawSeed = 20200901;

// ---------------------------------------------------------------------------
// Point estimate

/// Y^obs under assignment z from known potential outcomes.
inline Vector observed_outcomes(const StratifiedPopulation& pop, const ZVector& z) {
    const auto& po = pop.potential_outcomes();
    if (!po) throw MissingPotentialOutcomes();
    Vector y(pop.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = z[i] ? po->treated[i] : po->control[i];
    return y;
}

inline double stratified_diff_in_means(const StratifiedPopulation& pop, const ZVector& z,
                                       std::span<const double> y) {
    double tau = 0.0;
    for (std::size_t k = 0; k < pop.strata_count(); ++k) {
        double s1 = 0.0, s0 = 0.0;
        std::size_t n1 = 0, n0 = 0;
        for (std::size_t i : pop.stratum(k)) {
            if (z[i]) {
                s1 += y[i];
                ++n1;
            } else {
                s0 += y[i];
                ++n0;
            }
        }
        if (n1 == 0 || n0 == 0) throw EmptyArm(k);
        tau += pop.weight(k) * (s1 / static_cast<double>(n1) - s0 / static_cast<double>(n0));
    }
    return tau;
}

/// Uses the observed outcome column when present, else potential outcomes.
inline double stratified_diff_in_means(const StratifiedPopulation& pop, const ZVector& z) {
    if (pop.observed_outcome()) return stratified_diff_in_means(pop, z, *pop.observed_outcome());
    return stratified_diff_in_means(pop, z, observed_outcomes(pop, z));
}

// ---------------------------------------------------------------------------
// The truncated Gaussian L_{p,a}

/// Variance of L_{p,a}: P(chi2_{p+2} <= a) / P(chi2_p <= a).
inline double v_pa(int p, double a) {
    if (p < 1) throw DomainError("v_pa: p must be >= 1");
    if (!(a > 0.0)) throw DomainError("v_pa: threshold must be > 0");
    if (std::isinf(a)) return 1.0;
    const double den = chi2_cdf(p, a);
    if (den == 0.0) return a / (p + 2.0);  // small-a limit
    return std::min(1.0, chi2_cdf(p + 2, a) / den);
}

enum class LSampler { Auto, Rejection, Radial };

/// Draws from D_1 | D'D < a, D ~ N(0, I_p).
///
/// Rejection redraws D until it lands in the ball. Radial draws the squared
/// radius from chi2_p truncated to [0, a] by CDF inversion and multiplies its
/// root by the first coordinate of a uniform direction; by spherical symmetry
/// the two are the same law. Auto picks radial when P(chi2_p < a) < 1e-2.
class LpaSampler {
   public:
    LpaSampler(int p, double a, LSampler method = LSampler::Auto) : p_(p), a_(a) {
        if (p < 1) throw DomainError("L_{p,a}: p must be >= 1");
        if (!(a > 0.0)) throw DomainError("L_{p,a}: threshold must be > 0");
        mass_ = std::isinf(a) ? 1.0 : chi2_cdf(p, a);
        if (method == LSampler::Auto) method = mass_ < 1e-2 ? LSampler::Radial : LSampler::Rejection;
        method_ = method;
    }

    LSampler method() const noexcept { return method_; }
    double acceptance() const noexcept { return mass_; }

    double operator()(Rng& rng) const {
        if (std::isinf(a_)) return rng.normal();
        if (method_ == LSampler::Rejection) {
            while (true) {
                const double d1 = rng.normal();
                double ss = d1 * d1;
                for (int j = 1; j < p_ && ss < a_; ++j) {
                    const double d = rng.normal();
                    ss += d * d;
                }
                if (ss < a_) return d1;
            }
        }
        const double u = rng.uniform_open() * mass_;
        const double r = std::sqrt(chi2_quantile(p_, u));
        if (p_ == 1) return rng.uniform() < 0.5 ? -r : r;
        double g1 = rng.normal();
        double ss = g1 * g1;
        for (int j = 1; j < p_; ++j) {
            const double g = rng.normal();
            ss += g * g;
        }
        return r * g1 / std::sqrt(ss);
    }

   private:
    int p_;
    double a_;
    double mass_ = 1.0;
    LSampler method_ = LSampler::Rejection;
};

inline double sample_L_pa(int p, double a, Rng& rng, LSampler method = LSampler::Auto) {
    return LpaSampler(p, a, method)(rng);
}

struct LawTerm {
    double scale = 0.0;  // coefficient in front of L^k_{p,a_k}
    int p = 1;
    double a = std::numeric_limits<double>::infinity();
};

/// normal_scale * eps_0 + sum_k terms[k].scale * L^k_{p,a_k}, all independent.
/// Covers both the single-term SRRoM law and the K-term SRRsM mixture.
struct TruncatedGaussianLaw {
    double normal_scale = 1.0;
    std::vector<LawTerm> terms;
    std::size_t draws = kDefaultLawDraws;
    std::uint64_t seed = kDefaultLawSeed;

    /// (1 - R^2)^{1/2} eps_0 + (R^2)^{1/2} L_{p,a}.
    static TruncatedGaussianLaw overall(double r2, int p, double a,
                                        std::size_t draws = kDefaultLawDraws,
                                        std::uint64_t seed = kDefaultLawSeed) {
        r2 = std::clamp(r2, 0.0, 1.0);
        TruncatedGaussianLaw law;
        law.normal_scale = std::sqrt(1.0 - r2);
        law.terms.push_back({std::sqrt(r2), p, a});
        law.draws = draws;
        law.seed = seed;
        return law;
    }

    /// {sum_k w_k (1 - R_k^2)}^{1/2} eps_0 + sum_k (w_k R_k^2)^{1/2} L^k_{p,a_k},
    /// with w_k = pi_k Sigma_[k]tautau.
    static TruncatedGaussianLaw stratified(std::span<const double> weights, std::span<const double> r2,
                                           int p, std::span<const double> thresholds,
                                           std::size_t draws = kDefaultLawDraws,
                                           std::uint64_t seed = kDefaultLawSeed) {
        if (weights.size() != r2.size() || weights.size() != thresholds.size())
            throw DomainError("stratified law: length mismatch");
        TruncatedGaussianLaw law;
        double normal_var = 0.0;
        for (std::size_t k = 0; k < weights.size(); ++k) {
            const double rk = std::clamp(r2[k], 0.0, 1.0);
            const double wk = std::max(weights[k], 0.0);
            normal_var += wk * (1.0 - rk);
            law.terms.push_back({std::sqrt(wk * rk), p, thresholds[k]});
        }
        law.normal_scale = std::sqrt(normal_var);
        law.draws = draws;
        law.seed = seed;
        return law;
    }
};

struct QuantileEstimate {
    double value = 0.0;
    double mc_se = 0.0;
};

/// Monte Carlo engine for truncated-Gaussian laws. Caches the base draws
/// (eps_0 and each L^k bank) by (p, a, seed, stream, draws) so repeated
/// quantile requests with different mixing weights reuse them. The cache is
/// guarded by a mutex; the engine may be shared across threads.
class LawEngine {
   public:
    using Bank = std::shared_ptr<const Vector>;

    Bank normal_bank(std::uint64_t seed, std::size_t draws) {
        return bank(1, std::numeric_limits<double>::infinity(), seed, 0, draws);
    }

    /// Bank for the L term at position `index` (independent per position).
    Bank l_bank(int p, double a, std::uint64_t seed, std::size_t index, std::size_t draws) {
        return bank(p, a, seed, index + 1, draws);
    }

    /// Materialized draws of the law (unsorted).
    Vector sample(const TruncatedGaussianLaw& law) {
        const std::size_t n = law.draws;
        if (n < 2) throw DomainError("law needs at least 2 draws");
        Vector out(n, 0.0);
        if (law.normal_scale != 0.0) {
            const auto e = normal_bank(law.seed, n);
            for (std::size_t i = 0; i < n; ++i) out[i] = law.normal_scale * (*e)[i];
        }
        for (std::size_t k = 0; k < law.terms.size(); ++k) {
            const auto& t = law.terms[k];
            if (t.scale == 0.0) continue;
            const auto l = l_bank(t.p, t.a, law.seed, k, n);
            for (std::size_t i = 0; i < n; ++i) out[i] += t.scale * (*l)[i];
        }
        return out;
    }

    /// Empirical quantiles from one common sample (type-7 interpolation),
    /// with an order-statistic density-based MC standard error.
    std::vector<QuantileEstimate> quantiles(const TruncatedGaussianLaw& law, std::span<const double> xis) {
        Vector s = sample(law);
        std::vector<QuantileEstimate> out;
        for (double xi : xis) out.push_back(quantile_of(s, xi));
        return out;
    }

    QuantileEstimate quantile(const TruncatedGaussianLaw& law, double xi) {
        const double x[] = {xi};
        return quantiles(law, x).front();
    }

    /// Quantile of an unsorted sample; reorders `s` partially.
    static QuantileEstimate quantile_of(Vector& s, double xi) {
        if (!(xi > 0.0 && xi < 1.0)) throw DomainError("quantile level must lie in (0, 1)");
        const std::size_t n = s.size();
        const double h = (static_cast<double>(n) - 1.0) * xi;
        const auto lo = static_cast<std::size_t>(std::floor(h));
        const double value = interpolate(s, h);
        // f(q) ~ 2m / (n (x_(j+m) - x_(j-m))), m ~ sqrt(n).
        const auto m = std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(static_cast<double>(n))));
        const std::size_t j0 = lo >= m ? lo - m : 0;
        const std::size_t j1 = std::min(n - 1, lo + m);
        const double span = order_stat(s, j1) - order_stat(s, j0);
        double se = 0.0;
        if (span > 0.0) {
            const double density = static_cast<double>(j1 - j0) / (static_cast<double>(n) * span);
            se = std::sqrt(xi * (1.0 - xi) / static_cast<double>(n)) / density;
        }
        return {value, se};
    }

   private:
    static double order_stat(Vector& s, std::size_t j) {
        std::nth_element(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(j), s.end());
        return s[j];
    }

    static double interpolate(Vector& s, double h) {
        const auto lo = static_cast<std::size_t>(std::floor(h));
        const double v_lo = order_stat(s, lo);
        if (lo + 1 >= s.size()) return v_lo;
        // After nth_element, the next order statistic is the minimum of the upper part.
        const double v_hi = *std::min_element(s.begin() + static_cast<std::ptrdiff_t>(lo) + 1, s.end());
        return v_lo + (h - std::floor(h)) * (v_hi - v_lo);
    }

    Bank bank(int p, double a, std::uint64_t seed, std::size_t stream, std::size_t draws) {
        const Key key{p, a, seed, stream, draws};
        {
            std::lock_guard lock(mu_);
            if (auto it = cache_.find(key); it != cache_.end()) return it->second;
        }
        auto v = std::make_shared<Vector>(draws);
        Rng rng(seed, stream, 0x4c61775f42616e6bULL);
        if (std::isinf(a)) {
            for (double& x : *v) x = rng.normal();
        } else {
            const LpaSampler sampler(p, a);
            for (double& x : *v) x = sampler(rng);
        }
        std::lock_guard lock(mu_);
        return cache_.emplace(key, std::move(v)).first->second;
    }

    using Key = std::tuple<int, double, std::uint64_t, std::size_t, std::size_t>;
    std::mutex mu_;
    std::map<Key, Bank> cache_;
};

/// xi-quantile of the law (nu_xi for the single-term law, q_xi for the mixture).
inline QuantileEstimate nu_quantile(const TruncatedGaussianLaw& law, double xi) {
    LawEngine engine;
    return engine.quantile(law, xi);
}

// ---------------------------------------------------------------------------
// Variance estimators

namespace detail {

struct ArmMoments {
    std::size_t count = 0;
    double var_y = 0.0;  // s^2_Y(z)
    Vector cov_xy;       // s_XY(z)
};

inline ArmMoments arm_moments(const StratifiedPopulation& pop, std::size_t k, const ZVector& z,
                              std::span<const double> y, int arm) {
    const std::size_t p = pop.dim();
    ArmMoments m;
    m.cov_xy.assign(p, 0.0);
    double my = 0.0;
    Vector mx(p, 0.0);
    for (std::size_t i : pop.stratum(k)) {
        if (static_cast<int>(z[i]) != arm) continue;
        ++m.count;
        my += y[i];
        const auto xi = pop.x(i);
        for (std::size_t j = 0; j < p; ++j) mx[j] += xi[j];
    }
    if (m.count < 2) throw InsufficientArm(k, arm);
    const double c = static_cast<double>(m.count);
    my /= c;
    for (double& v : mx) v /= c;
    for (std::size_t i : pop.stratum(k)) {
        if (static_cast<int>(z[i]) != arm) continue;
        const double dy = y[i] - my;
        m.var_y += dy * dy;
        const auto xi = pop.x(i);
        for (std::size_t j = 0; j < p; ++j) m.cov_xy[j] += (xi[j] - mx[j]) * dy;
    }
    m.var_y /= (c - 1.0);
    for (double& v : m.cov_xy) v /= (c - 1.0);
    return m;
}

}  // namespace detail

struct OverallEstimates {
    double sigma_tt = 0.0;  // Sigma_hat_tautau
    Vector sigma_tx;        // Sigma_hat_taux
    double r2 = 0.0;        // clipped to [0, 1]
    double r2_raw = 0.0;
    bool r2_clipped = false;
};

inline OverallEstimates overall_variance_estimators(const StratifiedPopulation& pop,
                                                    const DesignMatrices& dm, const ZVector& z,
                                                    std::span<const double> y) {
    OverallEstimates e;
    e.sigma_tx.assign(pop.dim(), 0.0);
    for (std::size_t k = 0; k < pop.strata_count(); ++k) {
        const auto t = detail::arm_moments(pop, k, z, y, 1);
        const auto c = detail::arm_moments(pop, k, z, y, 0);
        const double pk = pop.propensity(k);
        const double w = pop.weight(k);
        e.sigma_tt += w * (t.var_y / pk + c.var_y / (1.0 - pk));
        for (std::size_t j = 0; j < e.sigma_tx.size(); ++j)
            e.sigma_tx[j] += w * (t.cov_xy[j] / pk + c.cov_xy[j] / (1.0 - pk));
    }
    if (e.sigma_tt > 0.0) e.r2_raw = dm.sigma_chol->inverse_quad_form(e.sigma_tx) / e.sigma_tt;
    e.r2 = std::clamp(e.r2_raw, 0.0, 1.0);
    e.r2_clipped = e.r2 != e.r2_raw;
    return e;
}

struct StratumEstimates {
    double s2_tau_given_x = 0.0;  // s^2_[k]tau|X
    double sigma_tt = 0.0;        // Sigma_hat_[k]tautau, floored at 0
    double r2 = 0.0;              // R_hat^2_[k], clipped to [0, 1]
    double r2_raw = 0.0;
    bool floored = false;
    bool r2_clipped = false;
    bool adjusted = true;  // false: an arm too small to regress on X, no covariate terms used
};

inline StratumEstimates stratum_variance_estimators(const StratifiedPopulation& pop,
                                                    const DesignMatrices& dm, const ZVector& z,
                                                    std::span<const double> y, std::size_t k) {
    const auto t = detail::arm_moments(pop, k, z, y, 1);
    const auto c = detail::arm_moments(pop, k, z, y, 0);
    const Cholesky& f = stratum_factor(dm, k);
    const double pk = pop.propensity(k);
    // f factors S_[k]XX / (p (1 - p)); rescale to quadratic forms in S_[k]XX^{-1}.
    const double scale = 1.0 / (pk * (1.0 - pk));
    auto quad_s = [&](std::span<const double> v) { return f.inverse_quad_form(v) * scale; };

    Vector diff(pop.dim());
    for (std::size_t j = 0; j < diff.size(); ++j) diff[j] = t.cov_xy[j] - c.cov_xy[j];

    StratumEstimates e;
    // With n_[k]z <= p + 1 the within-arm regression on X is not identified and
    // the covariate terms are noise of unbounded size; keep the unadjusted
    // Neyman term and R^2 = 0 for that stratum.
    if (std::min(t.count, c.count) < pop.dim() + 2) {
        e.adjusted = false;
        e.sigma_tt = t.var_y / pk + c.var_y / (1.0 - pk);
        return e;
    }
    e.s2_tau_given_x = quad_s(diff);
    const double raw = t.var_y / pk + c.var_y / (1.0 - pk) - e.s2_tau_given_x;
    e.sigma_tt = std::max(raw, 0.0);
    e.floored = raw < 0.0;
    if (e.sigma_tt > 0.0) {
        const double explained = quad_s(t.cov_xy) / pk + quad_s(c.cov_xy) / (1.0 - pk) - e.s2_tau_given_x;
        e.r2_raw = explained / e.sigma_tt;
    }
    e.r2 = std::clamp(e.r2_raw, 0.0, 1.0);
    e.r2_clipped = e.r2 != e.r2_raw;
    return e;
}

// ---------------------------------------------------------------------------
// Confidence intervals

struct InferenceReport {
    Method method = Method::SR;
    double tau_hat = 0.0;
    double alpha = 0.05;
    double variance_estimate = 0.0;  // of sqrt(n) (tau_hat - tau)
    double sigma_tt = 0.0;           // Sigma_hat_tautau (pooled for SRRsM)
    double r2 = 0.0;                 // overall R_hat^2 (SRRoM)
    Vector stratum_r2;               // R_hat^2_[k] (SRRsM)
    Vector stratum_sigma_tt;
    double ci_lower = 0.0;
    double ci_upper = 0.0;
    double v_pa = 1.0;  // SRRoM
    Vector stratum_v_pa;
    QuantileEstimate q_lower;  // law quantile at alpha/2
    QuantileEstimate q_upper;  // law quantile at 1 - alpha/2
    std::size_t law_draws = 0;
    std::uint64_t law_seed = 0;
    bool r2_clipped = false;
    std::vector<std::size_t> floored_strata;
    std::vector<std::size_t> unadjusted_strata;
    bool fell_back = false;
};

struct CiOptions {
    double alpha = 0.05;
    std::size_t draws = kDefaultLawDraws;
    std::uint64_t seed = kDefaultLawSeed;
};

inline void check_alpha(double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("alpha must lie in (0, 1)");
}

/// Normal interval used under plain stratified randomization.
inline InferenceReport ci_sr(double tau_hat, double sigma_tt, std::size_t n, double alpha) {
    check_alpha(alpha);
    InferenceReport r;
    r.method = Method::SR;
    r.tau_hat = tau_hat;
    r.alpha = alpha;
    r.sigma_tt = sigma_tt;
    r.variance_estimate = sigma_tt;
    const double z = normal_quantile(1.0 - alpha / 2.0);
    const double se = std::sqrt(sigma_tt / static_cast<double>(n));
    r.q_lower = {-z, 0.0};
    r.q_upper = {z, 0.0};
    r.ci_lower = tau_hat - se * z;
    r.ci_upper = tau_hat + se * z;
    return r;
}

inline InferenceReport ci_srrom(double tau_hat, const OverallEstimates& est, std::size_t n, int p,
                                double a, const CiOptions& opt, LawEngine& engine) {
    check_alpha(opt.alpha);
    InferenceReport r;
    r.method = Method::SRRoM;
    r.tau_hat = tau_hat;
    r.alpha = opt.alpha;
    r.sigma_tt = est.sigma_tt;
    r.r2 = est.r2;
    r.r2_clipped = est.r2_clipped;
    r.v_pa = v_pa(p, a);
    r.variance_estimate = est.sigma_tt * (1.0 - (1.0 - r.v_pa) * est.r2);
    const auto law = TruncatedGaussianLaw::overall(est.r2, p, a, opt.draws, opt.seed);
    const double xis[] = {opt.alpha / 2.0, 1.0 - opt.alpha / 2.0};
    const auto q = engine.quantiles(law, xis);
    r.q_lower = q[0];
    r.q_upper = q[1];
    const double se = std::sqrt(est.sigma_tt / static_cast<double>(n));
    r.ci_lower = tau_hat - se * q[1].value;
    r.ci_upper = tau_hat - se * q[0].value;
    r.law_draws = opt.draws;
    r.law_seed = opt.seed;
    return r;
}

inline InferenceReport ci_srrsm(double tau_hat, std::span<const StratumEstimates> est,
                                const StratifiedPopulation& pop, int p,
                                std::span<const double> thresholds, const CiOptions& opt,
                                LawEngine& engine) {
    check_alpha(opt.alpha);
    const std::size_t K = pop.strata_count();
    if (est.size() != K || thresholds.size() != K) throw DomainError("ci_srrsm: one entry per stratum");
    InferenceReport r;
    r.method = Method::SRRsM;
    r.tau_hat = tau_hat;
    r.alpha = opt.alpha;
    Vector weights(K), r2(K);
    for (std::size_t k = 0; k < K; ++k) {
        const double w = pop.weight(k) * est[k].sigma_tt;
        const double v = v_pa(p, thresholds[k]);
        weights[k] = w;
        r2[k] = est[k].r2;
        r.sigma_tt += w;
        r.variance_estimate += w * (1.0 - (1.0 - v) * est[k].r2);
        r.stratum_v_pa.push_back(v);
        r.stratum_r2.push_back(est[k].r2);
        r.stratum_sigma_tt.push_back(est[k].sigma_tt);
        if (est[k].floored) r.floored_strata.push_back(k);
        if (!est[k].adjusted) r.unadjusted_strata.push_back(k);
        r.r2_clipped = r.r2_clipped || est[k].r2_clipped;
    }
    const auto law = TruncatedGaussianLaw::stratified(weights, r2, p, thresholds, opt.draws, opt.seed);
    const double xis[] = {opt.alpha / 2.0, 1.0 - opt.alpha / 2.0};
    const auto q = engine.quantiles(law, xis);
    r.q_lower = q[0];
    r.q_upper = q[1];
    const double rn = std::sqrt(static_cast<double>(pop.size()));
    r.ci_lower = tau_hat - q[1].value / rn;
    r.ci_upper = tau_hat - q[0].value / rn;
    r.law_draws = opt.draws;
    r.law_seed = opt.seed;
    return r;
}

/// Overrides applied when analyzing (used by the CLI and simulator).
struct AnalysisOptions {
    CiOptions ci;
    std::optional<double> r2_override;  // force R_hat^2 (SRRoM) or every R_hat^2_[k] (SRRsM)
};

/// Estimate and interval for assignment z and observed outcome y under the
/// design `criterion` that produced z.
inline InferenceReport analyze(const StratifiedPopulation& pop, const DesignMatrices& dm,
                               const BalanceCriterion& criterion, const ZVector& z,
                               std::span<const double> y, const AnalysisOptions& opt,
                               LawEngine& engine) {
    const double tau_hat = stratified_diff_in_means(pop, z, y);
    const int p = static_cast<int>(pop.dim());
    switch (criterion.method) {
        case Method::SR:
        case Method::SRRdM: {
            const auto est = overall_variance_estimators(pop, dm, z, y);
            auto r = ci_sr(tau_hat, est.sigma_tt, pop.size(), opt.ci.alpha);
            r.method = criterion.method;
            r.r2 = est.r2;
            return r;
        }
        case Method::SRRoM: {
            auto est = overall_variance_estimators(pop, dm, z, y);
            if (opt.r2_override) est.r2 = std::clamp(*opt.r2_override, 0.0, 1.0);
            return ci_srrom(tau_hat, est, pop.size(), p, criterion.threshold, opt.ci, engine);
        }
        case Method::SRRsM: {
            std::vector<StratumEstimates> est;
            for (std::size_t k = 0; k < pop.strata_count(); ++k) {
                est.push_back(stratum_variance_estimators(pop, dm, z, y, k));
                if (opt.r2_override) est.back().r2 = std::clamp(*opt.r2_override, 0.0, 1.0);
            }
            return ci_srrsm(tau_hat, est, pop, p, criterion.stratum_thresholds, opt.ci, engine);
        }
    }
    throw DomainError("analyze: unknown method");
}

// ---------------------------------------------------------------------------
// Simulation-truth quantities

struct StratumTruth {
    double var_y1 = 0.0;   // S^2_[k]Y(1)
    double var_y0 = 0.0;   // S^2_[k]Y(0)
    double var_tau = 0.0;  // S^2_[k]tau
    Vector cov_xy1;        // S_[k]XY(1)
    Vector cov_xy0;        // S_[k]XY(0)
    double sigma_tt = 0.0; // Sigma_[k]tautau
    Vector sigma_xt;       // Sigma_[k]xtau
    double r2 = 0.0;       // R^2_[k]
};

struct TheoreticalVariances {
    double sigma_tt = 0.0;
    Vector sigma_xt;
    double r2 = 0.0;
    std::vector<StratumTruth> strata;
    double v_overall = 1.0;
    Vector v_strata;
    double var_sr = 0.0;
    double var_srrom = 0.0;
    double var_srrsm = 0.0;
    double reduction_srrom = 0.0;  // (1 - v) R^2
    double reduction_srrsm = 0.0;
    Vector u_tx;  // U_taux for the pooled criterion
};

inline StratumTruth stratum_truth(const StratifiedPopulation& pop, const DesignMatrices& dm, std::size_t k) {
    const auto& po = pop.potential_outcomes();
    if (!po) throw MissingPotentialOutcomes();
    const std::size_t p = pop.dim();
    const auto idx = pop.stratum(k);
    const double nk = static_cast<double>(idx.size());
    double m1 = 0.0, m0 = 0.0;
    for (std::size_t i : idx) {
        m1 += po->treated[i];
        m0 += po->control[i];
    }
    m1 /= nk;
    m0 /= nk;
    const auto& mx = dm.stratum_means[k];
    StratumTruth t;
    t.cov_xy1.assign(p, 0.0);
    t.cov_xy0.assign(p, 0.0);
    for (std::size_t i : idx) {
        const double d1 = po->treated[i] - m1;
        const double d0 = po->control[i] - m0;
        t.var_y1 += d1 * d1;
        t.var_y0 += d0 * d0;
        t.var_tau += (d1 - d0) * (d1 - d0);
        const auto xi = pop.x(i);
        for (std::size_t j = 0; j < p; ++j) {
            t.cov_xy1[j] += (xi[j] - mx[j]) * d1;
            t.cov_xy0[j] += (xi[j] - mx[j]) * d0;
        }
    }
    t.var_y1 /= nk - 1.0;
    t.var_y0 /= nk - 1.0;
    t.var_tau /= nk - 1.0;
    for (std::size_t j = 0; j < p; ++j) {
        t.cov_xy1[j] /= nk - 1.0;
        t.cov_xy0[j] /= nk - 1.0;
    }
    const double pk = pop.propensity(k);
    t.sigma_tt = t.var_y1 / pk + t.var_y0 / (1.0 - pk) - t.var_tau;
    t.sigma_xt.resize(p);
    for (std::size_t j = 0; j < p; ++j) t.sigma_xt[j] = t.cov_xy1[j] / pk + t.cov_xy0[j] / (1.0 - pk);
    if (dm.stratum_chol[k] && t.sigma_tt > 0.0)
        t.r2 = dm.stratum_chol[k]->inverse_quad_form(t.sigma_xt) / t.sigma_tt;
    return t;
}

/// Exact covariance of sqrt(n)(tau_hat - tau, tau_hat_X) under SR, as a
/// (1 + p) x (1 + p) matrix with the outcome first.
inline Matrix joint_covariance(const StratifiedPopulation& pop, const DesignMatrices& dm) {
    const std::size_t p = pop.dim();
    Matrix s(p + 1, p + 1);
    for (std::size_t k = 0; k < pop.strata_count(); ++k) {
        const auto t = stratum_truth(pop, dm, k);
        const double w = pop.weight(k);
        s(0, 0) += w * t.sigma_tt;
        for (std::size_t j = 0; j < p; ++j) {
            s(0, j + 1) += w * t.sigma_xt[j];
            s(j + 1, 0) += w * t.sigma_xt[j];
        }
    }
    for (std::size_t a = 0; a < p; ++a)
        for (std::size_t b = 0; b < p; ++b) s(a + 1, b + 1) = dm.sigma_xx(a, b);
    return s;
}

/// Asymptotic variances of sqrt(n)(tau_hat - tau) under SR, SRRoM with
/// threshold a and SRRsM with thresholds a_k (empty: SRRsM terms skipped).
inline TheoreticalVariances theoretical_variances(const StratifiedPopulation& pop,
                                                  const DesignMatrices& dm, double a,
                                                  std::span<const double> stratum_thresholds = {}) {
    if (!pop.potential_outcomes()) throw MissingPotentialOutcomes();
    const std::size_t K = pop.strata_count();
    const std::size_t p = pop.dim();
    const int ip = static_cast<int>(p);
    TheoreticalVariances tv;
    tv.sigma_xt.assign(p, 0.0);
    tv.u_tx.assign(p, 0.0);
    const double p1 = dm.p1, p0 = 1.0 - dm.p1;
    for (std::size_t k = 0; k < K; ++k) {
        auto t = stratum_truth(pop, dm, k);
        const double w = pop.weight(k);
        const double pk = pop.propensity(k);
        tv.sigma_tt += w * t.sigma_tt;
        for (std::size_t j = 0; j < p; ++j) {
            tv.sigma_xt[j] += w * t.sigma_xt[j];
            tv.u_tx[j] += w * ((1.0 - pk) * t.cov_xy1[j] + pk * t.cov_xy0[j]) / (p1 * p0);
        }
        tv.strata.push_back(std::move(t));
    }
    if (tv.sigma_tt > 0.0) tv.r2 = dm.sigma_chol->inverse_quad_form(tv.sigma_xt) / tv.sigma_tt;
    tv.v_overall = v_pa(ip, a);
    tv.var_sr = tv.sigma_tt;
    tv.reduction_srrom = (1.0 - tv.v_overall) * tv.r2;
    tv.var_srrom = tv.sigma_tt * (1.0 - tv.reduction_srrom);
    if (!stratum_thresholds.empty()) {
        if (stratum_thresholds.size() != K) throw DomainError("one threshold per stratum required");
        double reduced = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            const double v = v_pa(ip, stratum_thresholds[k]);
            tv.v_strata.push_back(v);
            const double w = pop.weight(k) * tv.strata[k].sigma_tt;
            tv.var_srrsm += w * (1.0 - (1.0 - v) * tv.strata[k].r2);
            reduced += w * (1.0 - v) * tv.strata[k].r2;
        }
        tv.reduction_srrsm = tv.sigma_tt > 0.0 ? reduced / tv.sigma_tt : 0.0;
    }
    return tv;
}

struct SrrdmBias {
    double bias = 0.0;             // asymptotic mean of sqrt(n)(tau_hat - tau)
    double mc_se = 0.0;
    double acceptance = 0.0;       // p'_a
    double acceptance_se = 0.0;
    double noncentrality = 0.0;    // omega' U_xx^{-1} omega
    std::uint64_t total_draws = 0;
    Vector u_tx;
};

/// Asymptotic bias of sqrt(n)(tau_hat - tau) under the pooled criterion
/// M_{tilde tau_X} < a. With U_xx = L L', B ~ N(omega, U_xx) and D = L^{-1} B,
/// the conditional mean of the outcome component is
/// U_taux L^{-T} { E(D | D'D < a) - L^{-1} omega }, estimated by rejection
/// sampling until `accepted_draws` draws land in the ball.
inline SrrdmBias srrdm_bias(const StratifiedPopulation& pop, const DesignMatrices& dm, double a,
                            std::size_t accepted_draws, Rng& rng,
                            std::uint64_t max_total_draws = 2'000'000'000ULL) {
    if (!pop.potential_outcomes()) throw MissingPotentialOutcomes();
    if (!dm.u_chol) throw SingularCovariance("U_xx is singular", std::nullopt, 0);
    if (accepted_draws < 2) throw DomainError("srrdm_bias: need at least 2 accepted draws");
    const auto tv = theoretical_variances(pop, dm, a);
    const Cholesky& l = *dm.u_chol;
    const std::size_t p = pop.dim();

    SrrdmBias out;
    out.u_tx = tv.u_tx;
    const Vector mu = l.forward(dm.omega);
    const Vector h = l.forward(tv.u_tx);  // U_taux L^{-T} as a vector
    for (double m : mu) out.noncentrality += m * m;

    double shift = 0.0;
    for (std::size_t j = 0; j < p; ++j) shift += h[j] * mu[j];

    CompensatedSum sum, sum_sq;
    std::size_t accepted = 0;
    std::uint64_t total = 0;
    Vector d(p);
    while (accepted < accepted_draws) {
        if (total >= max_total_draws) throw AccuracyError("srrdm_bias: acceptance region too small");
        ++total;
        double ss = 0.0;
        for (std::size_t j = 0; j < p; ++j) {
            d[j] = mu[j] + rng.normal();
            ss += d[j] * d[j];
        }
        if (!(ss < a)) continue;
        ++accepted;
        const double v = dot(h, d) - shift;
        sum.add(v);
        sum_sq.add(v * v);
    }
    const double m = static_cast<double>(accepted);
    out.bias = sum.value() / m;
    const double var = std::max(0.0, (sum_sq.value() - m * out.bias * out.bias) / (m - 1.0));
    out.mc_se = std::sqrt(var / m);
    out.total_draws = total;
    out.acceptance = m / static_cast<double>(total);
    out.acceptance_se = std::sqrt(out.acceptance * (1.0 - out.acceptance) / static_cast<double>(total));
    return out;
}

}  // namespace stratrr
