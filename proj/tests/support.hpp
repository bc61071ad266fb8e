#pragma once

// Independent helpers shared by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <vector>

#include "stratrr/design.hpp"
#include "stratrr/numeric.hpp"
#include "stratrr/random.hpp"

namespace testsupport {

using stratrr::Matrix;
using stratrr::Vector;

/// Gauss-Jordan inverse with partial pivoting.
inline Matrix dense_inverse(Matrix a) {
    const std::size_t n = a.rows();
    Matrix inv = Matrix::identity(n);
    for (std::size_t c = 0; c < n; ++c) {
        std::size_t piv = c;
        for (std::size_t r = c + 1; r < n; ++r)
            if (std::abs(a(r, c)) > std::abs(a(piv, c))) piv = r;
        for (std::size_t j = 0; j < n; ++j) {
            std::swap(a(c, j), a(piv, j));
            std::swap(inv(c, j), inv(piv, j));
        }
        const double d = a(c, c);
        for (std::size_t j = 0; j < n; ++j) {
            a(c, j) /= d;
            inv(c, j) /= d;
        }
        for (std::size_t r = 0; r < n; ++r) {
            if (r == c) continue;
            const double f = a(r, c);
            for (std::size_t j = 0; j < n; ++j) {
                a(r, j) -= f * a(c, j);
                inv(r, j) -= f * inv(c, j);
            }
        }
    }
    return inv;
}

inline double quad_form(const Matrix& m, const Vector& u, const Vector& v) {
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i)
        for (std::size_t j = 0; j < v.size(); ++j) s += u[i] * m(i, j) * v[j];
    return s;
}

struct KsResult {
    double statistic = 0.0;
    double p_value = 1.0;
};

/// Asymptotic Kolmogorov tail probability Q(lambda) = 2 sum (-1)^{j-1} e^{-2 j^2 lambda^2}.
inline double kolmogorov_q(double lambda) {
    if (lambda < 0.2) return 1.0;
    double s = 0.0;
    for (int j = 1; j <= 200; ++j) {
        const double term = std::exp(-2.0 * j * j * lambda * lambda);
        s += (j % 2 ? 1.0 : -1.0) * term;
        if (term < 1e-18) break;
    }
    return std::clamp(2.0 * s, 0.0, 1.0);
}

/// Two-sample Kolmogorov-Smirnov test (Stephens' small-sample correction).
inline KsResult ks_two_sample(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < a.size() && j < b.size()) {
        const double x = std::min(a[i], b[j]);
        while (i < a.size() && a[i] == x) ++i;
        while (j < b.size() && b[j] == x) ++j;
        d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
    }
    const double ne = std::sqrt(na * nb / (na + nb));
    return {d, kolmogorov_q((ne + 0.12 + 0.11 / ne) * d)};
}

/// Population with Gaussian covariates (stratum-shifted) and no outcomes.
inline stratrr::StratifiedPopulation gaussian_population(const std::vector<std::size_t>& sizes,
                                                         const Vector& props, std::size_t p,
                                                         std::uint64_t seed) {
    stratrr::Rng rng(seed, 77);
    std::vector<std::size_t> of;
    for (std::size_t k = 0; k < sizes.size(); ++k) of.insert(of.end(), sizes[k], k);
    Matrix x(of.size(), p);
    for (std::size_t i = 0; i < of.size(); ++i)
        for (std::size_t j = 0; j < p; ++j) x(i, j) = rng.normal() + 0.5 * static_cast<double>(of[i] * (j + 1));
    return stratrr::StratifiedPopulation(std::move(of), props, std::move(x));
}

/// Adds Y(z) = X'beta_z + c_z + sd * e outcomes, with per-stratum slopes when
/// `betas1`/`betas0` hold one vector per stratum (or a single shared one).
inline void add_linear_outcomes(stratrr::StratifiedPopulation& pop, const std::vector<Vector>& betas1,
                                const std::vector<Vector>& betas0, double sd, std::uint64_t seed,
                                double effect = 1.0) {
    stratrr::Rng rng(seed, 78);
    Vector y1(pop.size()), y0(pop.size());
    for (std::size_t i = 0; i < pop.size(); ++i) {
        const std::size_t k = pop.stratum_of(i);
        const Vector& b1 = betas1.size() == 1 ? betas1[0] : betas1[k];
        const Vector& b0 = betas0.size() == 1 ? betas0[0] : betas0[k];
        const auto xi = pop.x(i);
        y1[i] = stratrr::dot(xi, b1) + effect + sd * rng.normal();
        y0[i] = stratrr::dot(xi, b0) + sd * rng.normal();
    }
    pop.set_potential_outcomes({std::move(y1), std::move(y0)});
}

inline double binomial_se(double p, std::size_t n) { return std::sqrt(p * (1.0 - p) / static_cast<double>(n)); }

}  // namespace testsupport
