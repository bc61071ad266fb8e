#pragma once

// Design-stage covariance matrices, Mahalanobis balance statistics and the
// rejection-sampling rerandomizer (overall, stratum-specific and pooled
// difference-in-means criteria).

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stratrr/design.hpp"
#include "stratrr/numeric.hpp"
#include "stratrr/random.hpp"

namespace stratrr {

class SingularCovariance : public std::runtime_error {
   public:
    SingularCovariance(std::string what, std::optional<std::size_t> stratum, std::size_t direction)
        : std::runtime_error(std::move(what)), stratum_(stratum), direction_(direction) {}

    /// Stratum whose covariance failed, if the failure is stratum-specific.
    std::optional<std::size_t> stratum() const noexcept { return stratum_; }
    /// Covariate index at which the Cholesky pivot vanished.
    std::size_t direction() const noexcept { return direction_; }

   private:
    std::optional<std::size_t> stratum_;
    std::size_t direction_;
};

class AttemptsExhausted : public std::runtime_error {
   public:
    explicit AttemptsExhausted(std::uint64_t attempts)
        : std::runtime_error("no acceptable assignment after " + std::to_string(attempts) +
                             " attempts"),
          attempts_(attempts) {}
    std::uint64_t attempts() const noexcept { return attempts_; }

   private:
    std::uint64_t attempts_;
};

struct DesignOptions {
    /// Opt-in ridge: adds ridge * mean(diag) * I before factorizing each
    /// covariance that gets inverted. Zero disables it.
    double ridge = 0.0;
};

/// Everything computable before treatment is assigned.
struct DesignMatrices {
    double p1 = 0.0;                       // n1 / n
    std::vector<Vector> stratum_means;     // Xbar_[k]
    std::vector<Vector> stratum_totals;    // sum_{i in [k]} X_i
    std::vector<Matrix> stratum_cov;       // S_[k]XX, divisor n_[k] - 1
    Matrix sigma_xx;                       // sum_k pi_k S_[k]XX / (p_k (1 - p_k))
    std::vector<Matrix> stratum_sigma_xx;  // S_[k]XX / (p_k (1 - p_k))
    Matrix u_xx;                           // sum_k pi_k p_k (1 - p_k) / (p1 p0)^2 S_[k]XX
    Vector omega;                          // sqrt(n) / (p1 p0) sum_k pi_k (p_k - p1) Xbar_[k]
    double ridge = 0.0;

    std::optional<Cholesky> sigma_chol;
    std::optional<Cholesky> u_chol;
    std::vector<std::optional<Cholesky>> stratum_chol;

    std::size_t dim() const noexcept { return sigma_xx.rows(); }
};

namespace detail {

inline Matrix with_ridge(Matrix m, double ridge) {
    if (ridge <= 0.0) return m;
    double mean_diag = 0.0;
    for (std::size_t i = 0; i < m.rows(); ++i) mean_diag += m(i, i);
    mean_diag /= static_cast<double>(m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i) m(i, i) += ridge * mean_diag;
    return m;
}

inline Matrix symmetrized(Matrix m) {
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = i + 1; j < m.cols(); ++j) {
            const double v = 0.5 * (m(i, j) + m(j, i));
            m(i, j) = v;
            m(j, i) = v;
        }
    return m;
}

inline std::optional<Cholesky> try_factor(const Matrix& m, double ridge, std::size_t* failed) {
    try {
        return Cholesky(SpdMatrix(with_ridge(m, ridge)));
    } catch (const SingularMatrix& e) {
        if (failed) *failed = e.pivot();
        return std::nullopt;
    }
}

}  // namespace detail

inline DesignMatrices build_design_matrices(const StratifiedPopulation& pop,
                                            const DesignOptions& options = {}) {
    require_valid(pop);
    const std::size_t K = pop.strata_count();
    const std::size_t p = pop.dim();
    if (p == 0) throw DomainError("build_design_matrices: no covariates");
    const double n = static_cast<double>(pop.size());

    DesignMatrices dm;
    dm.ridge = options.ridge;
    dm.p1 = static_cast<double>(pop.total_treated()) / n;
    const double p1 = dm.p1;
    const double p0 = 1.0 - p1;

    dm.sigma_xx = Matrix(p, p);
    dm.u_xx = Matrix(p, p);
    dm.omega.assign(p, 0.0);

    for (std::size_t k = 0; k < K; ++k) {
        const auto idx = pop.stratum(k);
        const double nk = static_cast<double>(idx.size());
        Vector total(p, 0.0);
        for (std::size_t i : idx) {
            const auto xi = pop.x(i);
            for (std::size_t j = 0; j < p; ++j) total[j] += xi[j];
        }
        Vector mean(p);
        for (std::size_t j = 0; j < p; ++j) mean[j] = total[j] / nk;

        Matrix s(p, p);
        for (std::size_t i : idx) {
            const auto xi = pop.x(i);
            for (std::size_t a = 0; a < p; ++a) {
                const double da = xi[a] - mean[a];
                for (std::size_t b = a; b < p; ++b) s(a, b) += da * (xi[b] - mean[b]);
            }
        }
        for (std::size_t a = 0; a < p; ++a)
            for (std::size_t b = a; b < p; ++b) {
                s(a, b) /= (nk - 1.0);
                s(b, a) = s(a, b);
            }

        const double pk = pop.propensity(k);
        const double pik = pop.weight(k);
        Matrix sk = (1.0 / (pk * (1.0 - pk))) * s;
        dm.sigma_xx += pik * sk;
        dm.u_xx += (pik * pk * (1.0 - pk) / (p1 * p1 * p0 * p0)) * s;
        for (std::size_t j = 0; j < p; ++j)
            dm.omega[j] += std::sqrt(n) / (p1 * p0) * pik * (pk - p1) * mean[j];

        dm.stratum_totals.push_back(std::move(total));
        dm.stratum_means.push_back(std::move(mean));
        dm.stratum_cov.push_back(std::move(s));
        dm.stratum_sigma_xx.push_back(std::move(sk));
    }
    dm.sigma_xx = detail::symmetrized(std::move(dm.sigma_xx));
    dm.u_xx = detail::symmetrized(std::move(dm.u_xx));

    std::size_t failed = 0;
    dm.sigma_chol = detail::try_factor(dm.sigma_xx, options.ridge, &failed);
    if (!dm.sigma_chol)
        throw SingularCovariance("Sigma_xx is singular along covariate " + std::to_string(failed),
                                 std::nullopt, failed);
    dm.u_chol = detail::try_factor(dm.u_xx, options.ridge, nullptr);
    for (std::size_t k = 0; k < K; ++k)
        dm.stratum_chol.push_back(detail::try_factor(dm.stratum_sigma_xx[k], options.ridge, nullptr));
    return dm;
}

namespace detail {

/// tau_hat_[k]X for stratum k given the treated covariate sum in that stratum.
inline void stratum_contrast(const StratifiedPopulation& pop, const DesignMatrices& dm,
                             std::size_t k, std::span<const double> treated_sum,
                             std::span<double> out) {
    const double n1 = static_cast<double>(pop.treated_count(k));
    const double n0 = static_cast<double>(pop.control_count(k));
    const double c = 1.0 / n1 + 1.0 / n0;
    const auto& total = dm.stratum_totals[k];
    for (std::size_t j = 0; j < out.size(); ++j) out[j] = c * treated_sum[j] - total[j] / n0;
}

inline void treated_sum(const StratifiedPopulation& pop, std::span<const std::size_t> units,
                        std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t i : units) {
        const auto xi = pop.x(i);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += xi[j];
    }
}

inline void treated_sum(const StratifiedPopulation& pop, std::span<const std::size_t> units,
                        const ZVector& z, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t i : units) {
        if (!z[i]) continue;
        const auto xi = pop.x(i);
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += xi[j];
    }
}

inline double squared_norm_whitened(const Cholesky& c, std::span<double> v) {
    c.forward_in_place(v);
    double s = 0.0;
    for (double e : v) s += e * e;
    return s;
}

}  // namespace detail

/// Difference-in-means of covariates within stratum k.
inline Vector stratum_tau_x(const StratifiedPopulation& pop, const DesignMatrices& dm,
                            const ZVector& z, std::size_t k) {
    Vector sum(pop.dim()), out(pop.dim());
    detail::treated_sum(pop, pop.stratum(k), z, sum);
    detail::stratum_contrast(pop, dm, k, sum, out);
    return out;
}

/// Stratified difference-in-means of the covariates.
inline Vector tau_x_hat(const StratifiedPopulation& pop, const DesignMatrices& dm, const ZVector& z) {
    Vector tx(pop.dim(), 0.0);
    for (std::size_t k = 0; k < pop.strata_count(); ++k) {
        const Vector tk = stratum_tau_x(pop, dm, z, k);
        for (std::size_t j = 0; j < tx.size(); ++j) tx[j] += pop.weight(k) * tk[j];
    }
    return tx;
}

/// Pooled difference-in-means of the covariates, ignoring strata.
inline Vector pooled_tau_x(const StratifiedPopulation& pop, const ZVector& z) {
    const std::size_t p = pop.dim();
    Vector t(p, 0.0), c(p, 0.0);
    std::size_t n1 = 0;
    for (std::size_t i = 0; i < pop.size(); ++i) {
        auto& acc = z[i] ? t : c;
        n1 += z[i] ? 1 : 0;
        const auto xi = pop.x(i);
        for (std::size_t j = 0; j < p; ++j) acc[j] += xi[j];
    }
    const double n0 = static_cast<double>(pop.size() - n1);
    Vector out(p);
    for (std::size_t j = 0; j < p; ++j) out[j] = t[j] / static_cast<double>(n1) - c[j] / n0;
    return out;
}

inline double mahalanobis_overall(const DesignMatrices& dm, std::span<const double> tx, std::size_t n) {
    return static_cast<double>(n) * dm.sigma_chol->inverse_quad_form(tx);
}

inline const Cholesky& stratum_factor(const DesignMatrices& dm, std::size_t k) {
    if (!dm.stratum_chol.at(k))
        throw SingularCovariance("Sigma_[k]xx is singular in stratum " + std::to_string(k), k, 0);
    return *dm.stratum_chol[k];
}

inline double mahalanobis_stratum(const StratifiedPopulation& pop, const DesignMatrices& dm,
                                  const ZVector& z, std::size_t k) {
    const Cholesky& c = stratum_factor(dm, k);
    const Vector tk = stratum_tau_x(pop, dm, z, k);
    return static_cast<double>(pop.stratum_size(k)) * c.inverse_quad_form(tk);
}

inline double mahalanobis_dm(const StratifiedPopulation& pop, const DesignMatrices& dm, const ZVector& z) {
    if (!dm.u_chol) throw SingularCovariance("U_xx is singular", std::nullopt, 0);
    const Vector t = pooled_tau_x(pop, z);
    return static_cast<double>(pop.size()) * dm.u_chol->inverse_quad_form(t);
}

/// Threshold realizing asymptotic acceptance probability `target`; a target
/// of 1 yields +infinity (accept everything).
inline double threshold_for(int p, double target) {
    if (!(target > 0.0 && target <= 1.0))
        throw DomainError("threshold_for: target acceptance must lie in (0, 1]");
    if (target == 1.0) return std::numeric_limits<double>::infinity();
    return chi2_quantile(p, target);
}

enum class Method { SR, SRRoM, SRRsM, SRRdM };
enum class Fallback { ErrorOut, FallBackToSR };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::SR: return "sr";
        case Method::SRRoM: return "srrom";
        case Method::SRRsM: return "srrsm";
        case Method::SRRdM: return "srrdm";
    }
    return "?";
}

inline std::optional<Method> parse_method(std::string_view s) {
    if (s == "sr") return Method::SR;
    if (s == "srrom") return Method::SRRoM;
    if (s == "srrsm") return Method::SRRsM;
    if (s == "srrdm") return Method::SRRdM;
    return std::nullopt;
}

inline constexpr std::uint64_t kDefaultMaxAttempts = 1'000'000;

struct BalanceCriterion {
    Method method = Method::SR;
    int dim = 0;
    double target = 1.0;  // p_a (SRRoM / SRRdM)
    double threshold = std::numeric_limits<double>::infinity();
    Vector stratum_targets;  // p_{a_k} (SRRsM)
    Vector stratum_thresholds;
    std::uint64_t max_attempts = kDefaultMaxAttempts;
    Fallback fallback = Fallback::ErrorOut;

    static BalanceCriterion sr() { return {}; }

    static BalanceCriterion overall(int p, double pa) {
        BalanceCriterion c;
        c.method = Method::SRRoM;
        c.dim = p;
        c.target = pa;
        c.threshold = threshold_for(p, pa);
        return c;
    }

    static BalanceCriterion difference_in_means(int p, double pa) {
        BalanceCriterion c = overall(p, pa);
        c.method = Method::SRRdM;
        return c;
    }

    static BalanceCriterion stratum_specific(int p, Vector targets) {
        BalanceCriterion c;
        c.method = Method::SRRsM;
        c.dim = p;
        c.fallback = Fallback::FallBackToSR;
        for (double t : targets) c.stratum_thresholds.push_back(threshold_for(p, t));
        c.stratum_targets = std::move(targets);
        return c;
    }

    /// p_{a_k} = p_a^{1/K}: same joint acceptance probability as SRRoM.
    static BalanceCriterion fair(int p, double pa, std::size_t K) {
        return stratum_specific(p, Vector(K, std::pow(pa, 1.0 / static_cast<double>(K))));
    }

    /// p_{a_k} = p_a in every stratum.
    static BalanceCriterion unfair(int p, double pa, std::size_t K) {
        return stratum_specific(p, Vector(K, pa));
    }
};

struct RerandomizeResult {
    Assignment assignment;
    std::uint64_t attempts = 0;                // total draws (summed over strata for SRRsM)
    std::vector<std::uint64_t> stratum_attempts;
    bool fell_back = false;
    double statistic = std::numeric_limits<double>::quiet_NaN();  // M of the returned draw
    Vector stratum_statistics;                                    // M_[k] (SRRsM)
};

struct RerandomizerOptions {
    /// For SRRsM: strata with at most this many assignments are enumerated
    /// once up front; a stratum with no acceptable assignment then falls
    /// back (or errors) immediately instead of exhausting max_attempts.
    std::uint64_t enumerate_cap = 0;
};

/// Reusable rerandomization engine for one (population, design, criterion).
/// Not thread-safe; give each thread its own instance and RNG stream.
class Rerandomizer {
   public:
    Rerandomizer(const StratifiedPopulation& pop, const DesignMatrices& dm,
                 BalanceCriterion criterion, RerandomizerOptions options = {})
        : pop_(&pop), dm_(&dm), crit_(std::move(criterion)), sampler_(pop),
          sum_(pop.dim()), work_(pop.dim()), acc_(pop.dim()) {
        if (crit_.max_attempts < 1) throw DomainError("max_attempts must be >= 1");
        const std::size_t K = pop.strata_count();
        if (crit_.method == Method::SRRsM) {
            if (crit_.stratum_thresholds.size() != K)
                throw DomainError("SRRsM needs one threshold per stratum");
            for (std::size_t k = 0; k < K; ++k) stratum_factor(dm, k);
            acceptable_.assign(K, std::nullopt);
            if (options.enumerate_cap > 0) precheck(options.enumerate_cap);
        }
        if (crit_.method == Method::SRRdM && !dm.u_chol)
            throw SingularCovariance("U_xx is singular", std::nullopt, 0);
    }

    const BalanceCriterion& criterion() const noexcept { return crit_; }

    /// Number of acceptable assignments of stratum k, when it was enumerated.
    std::optional<std::uint64_t> acceptable_count(std::size_t k) const {
        return acceptable_.empty() ? std::nullopt : acceptable_[k];
    }

    RerandomizeResult run(Rng& rng) {
        RerandomizeResult r;
        r.assignment.stream = rng.key();
        const auto before = rng.draws();
        ZVector& z = r.assignment.z;
        z.assign(pop_->size(), 0);
        sampler_.reset();

        switch (crit_.method) {
            case Method::SR:
                sampler_.draw(rng, z);
                r.attempts = 1;
                break;
            case Method::SRRoM:
            case Method::SRRdM:
                run_whole(rng, r);
                break;
            case Method::SRRsM:
                run_stratified(rng, r);
                break;
        }
        r.assignment.draws = rng.draws() - before;
        return r;
    }

    /// Balance statistic of the current sampler state under SRRoM / SRRdM.
    double overall_statistic() {
        const std::size_t K = pop_->strata_count();
        const std::size_t p = pop_->dim();
        std::fill(acc_.begin(), acc_.end(), 0.0);
        if (crit_.method == Method::SRRdM) {
            std::size_t n1 = 0;
            for (std::size_t k = 0; k < K; ++k) {
                detail::treated_sum(*pop_, sampler_.treated(k), sum_);
                for (std::size_t j = 0; j < p; ++j) acc_[j] += sum_[j];
                n1 += pop_->treated_count(k);
            }
            const double n = static_cast<double>(pop_->size());
            const double dn1 = static_cast<double>(n1);
            const double dn0 = n - dn1;
            for (std::size_t j = 0; j < p; ++j) {
                double total = 0.0;
                for (std::size_t k = 0; k < K; ++k) total += dm_->stratum_totals[k][j];
                acc_[j] = acc_[j] * (1.0 / dn1 + 1.0 / dn0) - total / dn0;
            }
            return n * detail::squared_norm_whitened(*dm_->u_chol, acc_);
        }
        for (std::size_t k = 0; k < K; ++k) {
            detail::treated_sum(*pop_, sampler_.treated(k), sum_);
            detail::stratum_contrast(*pop_, *dm_, k, sum_, work_);
            const double w = pop_->weight(k);
            for (std::size_t j = 0; j < p; ++j) acc_[j] += w * work_[j];
        }
        return static_cast<double>(pop_->size()) *
               detail::squared_norm_whitened(*dm_->sigma_chol, acc_);
    }

   private:
    void run_whole(Rng& rng, RerandomizeResult& r) {
        ZVector& z = r.assignment.z;
        for (std::uint64_t attempt = 1; attempt <= crit_.max_attempts; ++attempt) {
            for (std::size_t k = 0; k < pop_->strata_count(); ++k) sampler_.draw_stratum(rng, k, z);
            const double m = overall_statistic();
            if (m < crit_.threshold) {
                r.attempts = attempt;
                r.statistic = m;
                return;
            }
        }
        r.attempts = crit_.max_attempts;
        exhausted(rng, r);
    }

    double stratum_statistic(std::size_t k) {
        detail::treated_sum(*pop_, sampler_.treated(k), sum_);
        detail::stratum_contrast(*pop_, *dm_, k, sum_, work_);
        return static_cast<double>(pop_->stratum_size(k)) *
               detail::squared_norm_whitened(*dm_->stratum_chol[k], work_);
    }

    void run_stratified(Rng& rng, RerandomizeResult& r) {
        const std::size_t K = pop_->strata_count();
        ZVector& z = r.assignment.z;
        r.stratum_attempts.assign(K, 0);
        r.stratum_statistics.assign(K, 0.0);
        for (std::size_t k = 0; k < K; ++k) {
            if (acceptable_[k] && *acceptable_[k] == 0) {
                r.attempts += crit_.max_attempts;
                exhausted(rng, r);
                return;
            }
            bool accepted = false;
            for (std::uint64_t attempt = 1; attempt <= crit_.max_attempts; ++attempt) {
                sampler_.draw_stratum(rng, k, z);
                const double m = stratum_statistic(k);
                if (m < crit_.stratum_thresholds[k]) {
                    r.stratum_attempts[k] = attempt;
                    r.stratum_statistics[k] = m;
                    r.attempts += attempt;
                    accepted = true;
                    break;
                }
            }
            if (!accepted) {
                r.attempts += crit_.max_attempts;
                exhausted(rng, r);
                return;
            }
        }
    }

    void exhausted(Rng& rng, RerandomizeResult& r) {
        if (crit_.fallback == Fallback::ErrorOut) throw AttemptsExhausted(r.attempts);
        sampler_.draw(rng, r.assignment.z);
        r.fell_back = true;
        r.statistic = std::numeric_limits<double>::quiet_NaN();
        r.stratum_statistics.clear();
        r.stratum_attempts.clear();
    }

    void precheck(std::uint64_t cap) {
        for (std::size_t k = 0; k < pop_->strata_count(); ++k) {
            const std::size_t nk = pop_->stratum_size(k);
            const std::size_t n1 = pop_->treated_count(k);
            if (binomial_saturating(nk, n1) > cap) continue;
            const auto idx = pop_->stratum(k);
            std::vector<std::size_t> combo(n1), units(n1);
            std::iota(combo.begin(), combo.end(), std::size_t{0});
            std::uint64_t ok = 0;
            while (true) {
                for (std::size_t j = 0; j < n1; ++j) units[j] = idx[combo[j]];
                detail::treated_sum(*pop_, units, sum_);
                detail::stratum_contrast(*pop_, *dm_, k, sum_, work_);
                const double m = static_cast<double>(nk) *
                                 detail::squared_norm_whitened(*dm_->stratum_chol[k], work_);
                if (m < crit_.stratum_thresholds[k]) ++ok;
                std::size_t i = n1;
                bool more = false;
                while (i > 0) {
                    --i;
                    if (combo[i] < nk - n1 + i) {
                        more = true;
                        break;
                    }
                }
                if (!more) break;
                ++combo[i];
                for (std::size_t j = i + 1; j < n1; ++j) combo[j] = combo[j - 1] + 1;
            }
            acceptable_[k] = ok;
        }
    }

    const StratifiedPopulation* pop_;
    const DesignMatrices* dm_;
    BalanceCriterion crit_;
    StratifiedSampler sampler_;
    Vector sum_, work_, acc_;
    std::vector<std::optional<std::uint64_t>> acceptable_;
};

inline RerandomizeResult rerandomize(const StratifiedPopulation& pop, const DesignMatrices& dm,
                                     const BalanceCriterion& criterion, Rng& rng) {
    Rerandomizer r(pop, dm, criterion);
    return r.run(rng);
}

/// Whether assignment z satisfies the criterion (SR accepts everything).
inline bool accepts(const StratifiedPopulation& pop, const DesignMatrices& dm,
                    const BalanceCriterion& c, const ZVector& z) {
    switch (c.method) {
        case Method::SR: return true;
        case Method::SRRoM: return mahalanobis_overall(dm, tau_x_hat(pop, dm, z), pop.size()) < c.threshold;
        case Method::SRRdM: return mahalanobis_dm(pop, dm, z) < c.threshold;
        case Method::SRRsM:
            for (std::size_t k = 0; k < pop.strata_count(); ++k)
                if (!(mahalanobis_stratum(pop, dm, z, k) < c.stratum_thresholds[k])) return false;
            return true;
    }
    return false;
}

}  // namespace stratrr
