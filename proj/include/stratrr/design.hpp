#pragma once

// Finite stratified population and stratified complete randomization.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "stratrr/numeric.hpp"
#include "stratrr/random.hpp"

namespace stratrr {

class ValidationError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class CountExceedsCap : public std::runtime_error {
   public:
    CountExceedsCap(std::uint64_t count, std::uint64_t cap)
        : std::runtime_error("assignment count " + std::to_string(count) +
                             " exceeds cap " + std::to_string(cap)),
          count_(count) {}
    /// Saturates at UINT64_MAX for astronomically large designs.
    std::uint64_t count() const noexcept { return count_; }

   private:
    std::uint64_t count_;
};

struct PotentialOutcomes {
    Vector treated;  // Y_i(1)
    Vector control;  // Y_i(0)
};

/// Fixed finite population: units, strata, covariates and propensity scores.
/// Strata are index lists over a single unit table, so input row order is
/// preserved everywhere downstream.
class StratifiedPopulation {
   public:
    StratifiedPopulation() = default;

    /// `stratum_of[i]` in [0, K); `propensity[k]` is the treated fraction in
    /// stratum k; `covariates` is n x p.
    StratifiedPopulation(std::vector<std::size_t> stratum_of, Vector propensity,
                         Matrix covariates, std::vector<std::string> labels = {})
        : stratum_of_(std::move(stratum_of)),
          propensity_(std::move(propensity)),
          covariates_(std::move(covariates)),
          labels_(std::move(labels)) {
        const std::size_t K = propensity_.size();
        if (K == 0) throw DomainError("population needs at least one stratum");
        if (covariates_.rows() != stratum_of_.size())
            throw DomainError("covariate rows do not match the number of units");
        strata_.resize(K);
        for (std::size_t i = 0; i < stratum_of_.size(); ++i) {
            if (stratum_of_[i] >= K) throw DomainError("unit stratum index out of range");
            strata_[stratum_of_[i]].push_back(i);
        }
        for (std::size_t k = 0; k < K; ++k)
            if (strata_[k].empty())
                throw DomainError("stratum " + std::to_string(k) + " has no units");
        if (labels_.empty())
            for (std::size_t k = 0; k < K; ++k) labels_.push_back(std::to_string(k));
        if (labels_.size() != K) throw DomainError("one label per stratum required");
    }

    std::size_t size() const noexcept { return stratum_of_.size(); }
    std::size_t strata_count() const noexcept { return strata_.size(); }
    std::size_t dim() const noexcept { return covariates_.cols(); }

    std::span<const std::size_t> stratum(std::size_t k) const { return strata_[k]; }
    std::size_t stratum_size(std::size_t k) const { return strata_[k].size(); }
    std::size_t stratum_of(std::size_t unit) const { return stratum_of_[unit]; }
    const std::string& label(std::size_t k) const { return labels_[k]; }

    double propensity(std::size_t k) const { return propensity_[k]; }
    const Vector& propensities() const noexcept { return propensity_; }
    double weight(std::size_t k) const {
        return static_cast<double>(stratum_size(k)) / static_cast<double>(size());
    }

    /// n_[k] p_[k] rounded; validate_population checks it is integral.
    std::size_t treated_count(std::size_t k) const {
        return static_cast<std::size_t>(std::llround(propensity_[k] * stratum_size(k)));
    }
    std::size_t control_count(std::size_t k) const { return stratum_size(k) - treated_count(k); }
    bool treated_count_integral(std::size_t k) const {
        const double v = propensity_[k] * stratum_size(k);
        return std::abs(v - std::round(v)) <= 1e-9 * std::max(1.0, v);
    }

    std::size_t total_treated() const {
        std::size_t s = 0;
        for (std::size_t k = 0; k < strata_count(); ++k) s += treated_count(k);
        return s;
    }

    const Matrix& covariates() const noexcept { return covariates_; }
    std::span<const double> x(std::size_t unit) const { return covariates_.row(unit); }

    void set_potential_outcomes(PotentialOutcomes po) {
        if (po.treated.size() != size() || po.control.size() != size())
            throw DomainError("potential outcome vectors must have one entry per unit");
        outcomes_ = std::move(po);
    }
    const std::optional<PotentialOutcomes>& potential_outcomes() const noexcept { return outcomes_; }

    void set_observed_outcome(Vector y) {
        if (y.size() != size()) throw DomainError("observed outcome must have one entry per unit");
        observed_ = std::move(y);
    }
    const std::optional<Vector>& observed_outcome() const noexcept { return observed_; }

    /// Average treatment effect; requires potential outcomes.
    double average_treatment_effect() const {
        if (!outcomes_) throw DomainError("average_treatment_effect: no potential outcomes");
        CompensatedSum s;
        for (std::size_t i = 0; i < size(); ++i) s.add(outcomes_->treated[i] - outcomes_->control[i]);
        return s.value() / static_cast<double>(size());
    }

   private:
    std::vector<std::size_t> stratum_of_;
    Vector propensity_;
    Matrix covariates_;
    std::vector<std::string> labels_;
    std::vector<std::vector<std::size_t>> strata_;
    std::optional<PotentialOutcomes> outcomes_;
    std::optional<Vector> observed_;
};

using ZVector = std::vector<std::uint8_t>;

struct Assignment {
    ZVector z;
    StreamKey stream;          // generator that produced it
    std::uint64_t draws = 0;   // raw 64-bit draws consumed from that stream
};

enum class Severity { Warning, Error };

struct ValidationIssue {
    Severity severity;
    std::optional<std::size_t> stratum;
    std::string message;
};

struct ValidationReport {
    std::vector<ValidationIssue> issues;

    bool ok() const {
        for (const auto& i : issues)
            if (i.severity == Severity::Error) return false;
        return true;
    }
    bool has_warnings() const {
        for (const auto& i : issues)
            if (i.severity == Severity::Warning) return true;
        return false;
    }
    /// First error message, or empty.
    std::string first_error() const {
        for (const auto& i : issues)
            if (i.severity == Severity::Error) return i.message;
        return {};
    }
};

inline ValidationReport validate_population(const StratifiedPopulation& pop) {
    ValidationReport report;
    const std::size_t K = pop.strata_count();
    for (std::size_t k = 0; k < K; ++k) {
        const std::string name = "stratum '" + pop.label(k) + "'";
        const double pk = pop.propensity(k);
        const std::size_t nk = pop.stratum_size(k);
        if (!(pk > 0.0 && pk < 1.0)) {
            report.issues.push_back({Severity::Error, k, name + ": propensity must lie in (0, 1)"});
            continue;
        }
        if (nk < 2) {
            report.issues.push_back({Severity::Error, k, name + ": needs at least 2 units"});
            continue;
        }
        if (!pop.treated_count_integral(k)) {
            report.issues.push_back(
                {Severity::Error, k,
                 name + ": n*p = " + std::to_string(nk * pk) + " is not an integer"});
            continue;
        }
        const std::size_t n1 = pop.treated_count(k);
        const std::size_t n0 = nk - n1;
        if (n1 == 0 || n0 == 0) {
            report.issues.push_back({Severity::Error, k, name + ": both arms must be non-empty"});
            continue;
        }
        if (n1 < 2 || n0 < 2)
            report.issues.push_back(
                {Severity::Warning, k,
                 name + ": an arm has fewer than 2 units; stratum-level variance estimation disabled"});
    }

    // A covariate that never varies within any stratum makes Sigma_xx singular.
    for (std::size_t j = 0; j < pop.dim(); ++j) {
        bool varies = false;
        for (std::size_t k = 0; k < K && !varies; ++k) {
            const auto idx = pop.stratum(k);
            const double first = pop.x(idx[0])[j];
            for (std::size_t i : idx)
                if (pop.x(i)[j] != first) {
                    varies = true;
                    break;
                }
        }
        if (!varies)
            report.issues.push_back(
                {Severity::Warning, std::nullopt,
                 "covariate " + std::to_string(j) + " is constant within every stratum; Sigma_xx is singular"});
    }
    return report;
}

inline void require_valid(const StratifiedPopulation& pop) {
    const auto report = validate_population(pop);
    if (!report.ok()) throw ValidationError(report.first_error());
}

/// Complete randomization within each stratum by partial Fisher-Yates
/// shuffles. Buffers persist between draws (any starting permutation yields
/// a uniformly random treated subset); reset() restores the stratum order so
/// the output depends on the RNG stream alone.
class StratifiedSampler {
   public:
    explicit StratifiedSampler(const StratifiedPopulation& pop) : pop_(&pop) {
        require_valid(pop);
        buffers_.resize(pop.strata_count());
        reset();
    }

    void reset() {
        for (std::size_t k = 0; k < buffers_.size(); ++k) {
            auto s = pop_->stratum(k);
            buffers_[k].assign(s.begin(), s.end());
        }
    }

    /// Redraw stratum k in place; `z` must have length n.
    void draw_stratum(Rng& rng, std::size_t k, ZVector& z) {
        auto& buf = buffers_[k];
        const std::size_t nk = buf.size();
        const std::size_t n1 = pop_->treated_count(k);
        for (std::size_t j = 0; j < n1; ++j) {
            const std::size_t r = j + static_cast<std::size_t>(rng.below(nk - j));
            std::swap(buf[j], buf[r]);
        }
        for (std::size_t j = 0; j < n1; ++j) z[buf[j]] = 1;
        for (std::size_t j = n1; j < nk; ++j) z[buf[j]] = 0;
    }

    void draw(Rng& rng, ZVector& z) {
        z.resize(pop_->size());
        for (std::size_t k = 0; k < buffers_.size(); ++k) draw_stratum(rng, k, z);
    }

    /// Treated units of stratum k after the last draw.
    std::span<const std::size_t> treated(std::size_t k) const {
        return {buffers_[k].data(), pop_->treated_count(k)};
    }

   private:
    const StratifiedPopulation* pop_;
    std::vector<std::vector<std::size_t>> buffers_;
};

inline Assignment stratified_randomize(const StratifiedPopulation& pop, Rng& rng) {
    StratifiedSampler sampler(pop);
    Assignment a;
    a.stream = rng.key();
    const auto before = rng.draws();
    sampler.draw(rng, a.z);
    a.draws = rng.draws() - before;
    return a;
}

inline std::uint64_t binomial_saturating(std::uint64_t n, std::uint64_t k) {
    if (k > n) return 0;
    k = std::min(k, n - k);
    __uint128_t r = 1;
    for (std::uint64_t i = 1; i <= k; ++i) {
        r = r * (n - k + i) / i;
        if (r > std::numeric_limits<std::uint64_t>::max())
            return std::numeric_limits<std::uint64_t>::max();
    }
    return static_cast<std::uint64_t>(r);
}

/// Number of distinct stratified assignments, saturating at UINT64_MAX.
inline std::uint64_t count_assignments(const StratifiedPopulation& pop) {
    __uint128_t total = 1;
    for (std::size_t k = 0; k < pop.strata_count(); ++k) {
        total *= binomial_saturating(pop.stratum_size(k), pop.treated_count(k));
        if (total > std::numeric_limits<std::uint64_t>::max())
            return std::numeric_limits<std::uint64_t>::max();
    }
    return static_cast<std::uint64_t>(total);
}

/// Visits every valid stratified assignment exactly once: the cartesian
/// product of per-stratum combinations, each in lexicographic order, with the
/// last stratum varying fastest.
class AssignmentEnumerator {
   public:
    AssignmentEnumerator(const StratifiedPopulation& pop, std::uint64_t cap) : pop_(&pop) {
        require_valid(pop);
        count_ = count_assignments(pop);
        if (count_ > cap) throw CountExceedsCap(count_, cap);
        combos_.resize(pop.strata_count());
        for (std::size_t k = 0; k < combos_.size(); ++k) {
            combos_[k].resize(pop.treated_count(k));
            std::iota(combos_[k].begin(), combos_[k].end(), std::size_t{0});
        }
        z_.assign(pop.size(), 0);
        for (std::size_t k = 0; k < combos_.size(); ++k) write_stratum(k);
    }

    std::uint64_t count() const noexcept { return count_; }

    /// Current assignment; valid until the next call to advance().
    const ZVector& current() const noexcept { return z_; }

    /// Moves to the next assignment; returns false after the last one.
    bool advance() {
        for (std::size_t kk = combos_.size(); kk-- > 0;) {
            if (next_combination(combos_[kk], pop_->stratum_size(kk))) {
                write_stratum(kk);
                return true;
            }
            std::iota(combos_[kk].begin(), combos_[kk].end(), std::size_t{0});
            write_stratum(kk);
        }
        return false;
    }

    template <class Fn>
    void for_each(Fn&& fn) {
        do fn(static_cast<const ZVector&>(z_));
        while (advance());
    }

   private:
    static bool next_combination(std::vector<std::size_t>& c, std::size_t n) {
        const std::size_t m = c.size();
        for (std::size_t i = m; i-- > 0;) {
            if (c[i] < n - m + i) {
                ++c[i];
                for (std::size_t j = i + 1; j < m; ++j) c[j] = c[j - 1] + 1;
                return true;
            }
        }
        return false;
    }

    void write_stratum(std::size_t k) {
        const auto idx = pop_->stratum(k);
        for (std::size_t i : idx) z_[i] = 0;
        for (std::size_t pos : combos_[k]) z_[idx[pos]] = 1;
    }

    const StratifiedPopulation* pop_;
    std::uint64_t count_ = 0;
    std::vector<std::vector<std::size_t>> combos_;
    ZVector z_;
};

}  // namespace stratrr
