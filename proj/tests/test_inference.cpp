#include <gtest/gtest.h>

#include <cmath>

#include "stratrr/balance.hpp"
#include "stratrr/inference.hpp"
#include "support.hpp"

using namespace stratrr;
using testsupport::add_linear_outcomes;
using testsupport::gaussian_population;

namespace {

StratifiedPopulation small_population(std::uint64_t seed, Vector props = {0.5, 0.5}) {
    auto pop = gaussian_population({4, 6}, props, 2, seed);
    add_linear_outcomes(pop, {{1.0, -0.5}}, {{0.3, 0.8}}, 1.0, seed + 1);
    return pop;
}

}  // namespace

TEST(PointEstimate, HandComputedArithmetic) {
    StratifiedPopulation pop({0, 0, 0, 0, 1, 1}, {0.5, 0.5}, Matrix::from_rows({{1}, {2}, {3}, {4}, {5}, {6}}));
    const ZVector z = {1, 0, 1, 0, 1, 0};
    const Vector y = {6, 2, 4, 3, 7, 5};
    // stratum 0: (6+4)/2 - (2+3)/2 = 2.5; stratum 1: 7 - 5 = 2; weights 2/3, 1/3.
    EXPECT_DOUBLE_EQ(stratified_diff_in_means(pop, z, y), 2.5 * 2.0 / 3.0 + 2.0 / 3.0);
}

TEST(PointEstimate, UnbiasedOverAllAssignments) {
    const auto pop = small_population(3, {0.5, 0.5});
    AssignmentEnumerator e(pop, 1000);
    CompensatedSum s;
    double count = 0;
    e.for_each([&](const ZVector& z) {
        s.add(stratified_diff_in_means(pop, z));
        count += 1;
    });
    EXPECT_NEAR(s.value() / count, pop.average_treatment_effect(), 1e-12);
}

// Joint covariance of sqrt(n)(tau_hat - tau, tau_hat_X) by enumeration.
TEST(JointCovariance, MatchesEnumeration) {
    for (Vector props : {Vector{0.5, 0.5}, Vector{0.25, 0.5}}) {
        const auto pop = small_population(5, props);
        const auto dm = build_design_matrices(pop);
        const Matrix v = joint_covariance(pop, dm);
        const double tau = pop.average_treatment_effect();
        const double n = static_cast<double>(pop.size());
        Matrix acc(3, 3);
        double count = 0;
        AssignmentEnumerator e(pop, 1000);
        e.for_each([&](const ZVector& z) {
            const Vector tx = tau_x_hat(pop, dm, z);
            const double w[3] = {stratified_diff_in_means(pop, z) - tau, tx[0], tx[1]};
            for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b) acc(a, b) += n * w[a] * w[b];
            count += 1;
        });
        for (std::size_t a = 0; a < 3; ++a)
            for (std::size_t b = 0; b < 3; ++b) EXPECT_NEAR(acc(a, b) / count, v(a, b), 1e-12) << a << b;
    }
}

// E over assignments of s^2_Y(z) is S^2_Y(z), so E Sigma_hat_tautau equals
// sum_k pi_k (S^2_Y(1)/p_k + S^2_Y(0)/(1-p_k)) and exceeds Sigma_tautau.
TEST(VarianceEstimators, SigmaTauTauExpectationByEnumeration) {
    auto pop = gaussian_population({6, 8}, {0.5, 0.5}, 2, 8);
    add_linear_outcomes(pop, {{1.0, 0.2}}, {{0.1, 0.7}}, 1.0, 9);
    const auto dm = build_design_matrices(pop);
    const auto tv = theoretical_variances(pop, dm, std::numeric_limits<double>::infinity());
    double expected = 0.0;
    for (std::size_t k = 0; k < 2; ++k)
        expected += pop.weight(k) * (tv.strata[k].var_y1 / 0.5 + tv.strata[k].var_y0 / 0.5);
    CompensatedSum s;
    double count = 0;
    AssignmentEnumerator e(pop, 100000);
    e.for_each([&](const ZVector& z) {
        s.add(overall_variance_estimators(pop, dm, z, observed_outcomes(pop, z)).sigma_tt);
        count += 1;
    });
    EXPECT_NEAR(s.value() / count, expected, 1e-10);
    EXPECT_GE(expected, tv.sigma_tt);
}

TEST(VarianceEstimators, SmallArmDropsCovariateTerms) {
    // Arms of 5 with p = 4 cannot support a within-arm regression on X.
    auto pop = gaussian_population({10, 40}, {0.5, 0.5}, 4, 21);
    add_linear_outcomes(pop, {{1.0, 0.5, -0.5, 0.2}}, {{0.5, 0.5, 0.0, 0.1}}, 0.5, 22);
    const auto dm = build_design_matrices(pop);
    Rng rng(23);
    const auto z = stratified_randomize(pop, rng).z;
    const auto y = observed_outcomes(pop, z);
    const auto small = stratum_variance_estimators(pop, dm, z, y, 0);
    EXPECT_FALSE(small.adjusted);
    EXPECT_EQ(small.r2, 0.0);
    EXPECT_EQ(small.s2_tau_given_x, 0.0);
    double s1 = 0, s0 = 0, m1 = 0, m0 = 0;
    for (std::size_t i : pop.stratum(0)) (z[i] ? m1 : m0) += y[i] / 5.0;
    for (std::size_t i : pop.stratum(0)) (z[i] ? s1 : s0) += std::pow(y[i] - (z[i] ? m1 : m0), 2) / 4.0;
    EXPECT_NEAR(small.sigma_tt, s1 / 0.5 + s0 / 0.5, 1e-10);
    EXPECT_TRUE(stratum_variance_estimators(pop, dm, z, y, 1).adjusted);

    LawEngine engine;
    const std::vector<StratumEstimates> est = {small, stratum_variance_estimators(pop, dm, z, y, 1)};
    const Vector a = {threshold_for(4, 0.1), threshold_for(4, 0.1)};
    const auto r = ci_srrsm(0.0, est, pop, 4, a, {0.05, 20000, 1}, engine);
    EXPECT_EQ(r.unadjusted_strata, std::vector<std::size_t>{0});
}

TEST(VarianceEstimators, RSquaredAgainstDenseInverse) {
    auto pop = gaussian_population({30, 40}, {0.5, 0.25}, 3, 10);
    add_linear_outcomes(pop, {{1.0, 0.2, -0.4}}, {{0.1, 0.7, 0.0}}, 0.5, 11);
    const auto dm = build_design_matrices(pop);
    Rng rng(12);
    const auto z = stratified_randomize(pop, rng).z;
    const auto y = observed_outcomes(pop, z);
    const auto est = overall_variance_estimators(pop, dm, z, y);
    const Matrix inv = testsupport::dense_inverse(dm.sigma_xx);
    EXPECT_NEAR(est.r2_raw, testsupport::quad_form(inv, est.sigma_tx, est.sigma_tx) / est.sigma_tt, 1e-10);
    EXPECT_GE(est.r2, 0.0);
    EXPECT_LE(est.r2, 1.0);

    for (std::size_t k = 0; k < 2; ++k) {
        const auto se = stratum_variance_estimators(pop, dm, z, y, k);
        const Matrix s_inv = testsupport::dense_inverse(dm.stratum_cov[k]);
        // Recompute arm covariances directly.
        Vector c1(3, 0.0), c0(3, 0.0);
        double n1 = 0, n0 = 0, my1 = 0, my0 = 0;
        Vector mx1(3, 0.0), mx0(3, 0.0);
        for (std::size_t i : pop.stratum(k)) {
            (z[i] ? n1 : n0) += 1;
            (z[i] ? my1 : my0) += y[i];
            for (std::size_t j = 0; j < 3; ++j) (z[i] ? mx1 : mx0)[j] += pop.x(i)[j];
        }
        my1 /= n1;
        my0 /= n0;
        for (std::size_t j = 0; j < 3; ++j) {
            mx1[j] /= n1;
            mx0[j] /= n0;
        }
        for (std::size_t i : pop.stratum(k))
            for (std::size_t j = 0; j < 3; ++j) {
                if (z[i]) c1[j] += (pop.x(i)[j] - mx1[j]) * (y[i] - my1) / (n1 - 1);
                else c0[j] += (pop.x(i)[j] - mx0[j]) * (y[i] - my0) / (n0 - 1);
            }
        Vector d(3);
        for (std::size_t j = 0; j < 3; ++j) d[j] = c1[j] - c0[j];
        EXPECT_NEAR(se.s2_tau_given_x, testsupport::quad_form(s_inv, d, d), 1e-10);
        const double pk = pop.propensity(k);
        const double explained = testsupport::quad_form(s_inv, c1, c1) / pk +
                                  testsupport::quad_form(s_inv, c0, c0) / (1 - pk) - se.s2_tau_given_x;
        if (!se.floored) {
            EXPECT_NEAR(se.r2_raw, explained / se.sigma_tt, 1e-9);
        }
        EXPECT_GE(se.sigma_tt, 0.0);
        EXPECT_GE(se.r2, 0.0);
        EXPECT_LE(se.r2, 1.0);
    }
}

TEST(VarianceEstimators, SingleUnitArmThrows) {
    auto pop = gaussian_population({4, 6}, {0.25, 0.5}, 1, 13);
    add_linear_outcomes(pop, {{1.0}}, {{0.0}}, 1.0, 14);
    const auto dm = build_design_matrices(pop);
    Rng rng(15);
    const auto z = stratified_randomize(pop, rng).z;
    EXPECT_THROW(overall_variance_estimators(pop, dm, z, observed_outcomes(pop, z)), InsufficientArm);
}

TEST(Vpa, LimitsAndClosedForm) {
    EXPECT_DOUBLE_EQ(v_pa(3, std::numeric_limits<double>::infinity()), 1.0);
    // p = 2: F_4(a) / F_2(a) = 1 - (a/2) e^{-a/2} / (1 - e^{-a/2}).
    for (double a : {0.01, 0.5, 2.0, 10.0}) {
        const double e = std::exp(-a / 2);
        EXPECT_NEAR(v_pa(2, a), 1.0 - (a / 2) * e / (1 - e), 1e-12);
    }
    EXPECT_NEAR(v_pa(4, 1e-6), 1e-6 / 6.0, 1e-12);
    EXPECT_THROW(v_pa(0, 1.0), DomainError);
}

TEST(Vpa, MatchesSampledVariance) {
    Rng rng(16);
    for (auto [p, a] : {std::pair{1, 1.0}, std::pair{3, 2.0}, std::pair{8, chi2_quantile(8, 0.001)}}) {
        const LpaSampler s(p, a);
        const int n = 200000;
        double m2 = 0.0;
        for (int i = 0; i < n; ++i) {
            const double l = s(rng);
            m2 += l * l;
        }
        const double v = v_pa(p, a);
        EXPECT_NEAR(m2 / n, v, 5 * v * std::sqrt(2.0 / n)) << p;
    }
}

TEST(LpaSampler, RejectionAndRadialAgreeKs) {
    for (auto [p, a] : {std::pair{2, 1.0}, std::pair{4, chi2_quantile(4, 0.05)}}) {
        Rng r1(17, 1), r2(17, 2);
        const LpaSampler rej(p, a, LSampler::Rejection), rad(p, a, LSampler::Radial);
        Vector x(40000), y(40000);
        for (auto& v : x) v = rej(r1);
        for (auto& v : y) v = rad(r2);
        EXPECT_GT(testsupport::ks_two_sample(x, y).p_value, 0.001) << p;
    }
}

TEST(LpaSampler, AutoPicksRadialForSmallAcceptance) {
    EXPECT_EQ(LpaSampler(8, chi2_quantile(8, 0.001)).method(), LSampler::Radial);
    EXPECT_EQ(LpaSampler(2, chi2_quantile(2, 0.5)).method(), LSampler::Rejection);
}

// With R^2 = 1 and p = 1 the law is N(0,1) truncated to (-sqrt a, sqrt a),
// whose quantiles are Phi^{-1}(Phi(-sqrt a) + xi (Phi(sqrt a) - Phi(-sqrt a))).
TEST(Quantiles, TruncatedNormalAnalyticOracle) {
    LawEngine engine;
    for (double a : {0.5, 2.0, chi2_quantile(1, 0.01)}) {
        const double r = std::sqrt(a);
        const auto law = TruncatedGaussianLaw::overall(1.0, 1, a, 200000, 3);
        for (double xi : {0.025, 0.25, 0.5, 0.9, 0.975}) {
            const double exact = normal_quantile(normal_cdf(-r) + xi * (normal_cdf(r) - normal_cdf(-r)));
            const auto q = engine.quantile(law, xi);
            EXPECT_NEAR(q.value, exact, 4 * q.mc_se + 1e-12) << a << " " << xi;
        }
    }
}

TEST(Quantiles, ZeroRSquaredIsStandardNormal) {
    LawEngine engine;
    const auto law = TruncatedGaussianLaw::overall(0.0, 4, 1.0, 200000, 4);
    const auto q = engine.quantile(law, 0.975);
    EXPECT_NEAR(q.value, 1.959963984540054, 4 * q.mc_se);
    EXPECT_NEAR(engine.quantile(law, 0.5).value, 0.0, 4 * engine.quantile(law, 0.5).mc_se);
}

TEST(Quantiles, DeterministicAndCached) {
    LawEngine engine;
    const auto law = TruncatedGaussianLaw::overall(0.6, 3, 1.2, 10000, 9);
    const auto a = engine.quantile(law, 0.9);
    const auto b = engine.quantile(law, 0.9);
    EXPECT_EQ(a.value, b.value);
    LawEngine other;
    EXPECT_EQ(other.quantile(law, 0.9).value, a.value);
}

TEST(Quantiles, StratifiedSingleTermEqualsOverall) {
    LawEngine engine;
    const double w[] = {2.0}, r2[] = {0.5}, a[] = {1.5};
    const auto mix = TruncatedGaussianLaw::stratified(w, r2, 3, a, 20000, 5);
    const auto single = TruncatedGaussianLaw::overall(0.5, 3, 1.5, 20000, 5);
    EXPECT_NEAR(engine.quantile(mix, 0.95).value, std::sqrt(2.0) * engine.quantile(single, 0.95).value, 1e-12);
}

TEST(Intervals, SrromWithZeroRSquaredMatchesSr) {
    LawEngine engine;
    OverallEstimates est;
    est.sigma_tt = 4.0;
    est.r2 = 0.0;
    CiOptions opt;
    opt.draws = 200000;
    const auto r = ci_srrom(1.0, est, 100, 3, 1.0, opt, engine);
    const auto s = ci_sr(1.0, 4.0, 100, 0.05);
    EXPECT_NEAR(r.ci_upper, s.ci_upper, 4 * 0.2 * r.q_upper.mc_se);
    EXPECT_NEAR(r.ci_lower, s.ci_lower, 4 * 0.2 * r.q_lower.mc_se);
    EXPECT_THROW(ci_sr(0.0, 1.0, 10, 1.0), DomainError);
}

TEST(Intervals, SrromShorterThanSrWithHighRSquared) {
    LawEngine engine;
    OverallEstimates est;
    est.sigma_tt = 4.0;
    est.r2 = 0.8;
    CiOptions opt;
    opt.draws = 50000;
    const auto r = ci_srrom(0.0, est, 100, 4, chi2_quantile(4, 0.001), opt, engine);
    const auto s = ci_sr(0.0, 4.0, 100, 0.05);
    EXPECT_LT(r.ci_upper - r.ci_lower, s.ci_upper - s.ci_lower);
    EXPECT_LT(r.variance_estimate, 4.0);
}

TEST(Theory, StratumSpecificNeverWorseThanOverall) {
    Rng rng(20);
    for (int rep = 0; rep < 10; ++rep) {
        auto pop = gaussian_population({50, 70}, {0.5, 0.4}, 3, 100 + rep);
        std::vector<Vector> b1, b0;
        for (int k = 0; k < 2; ++k) {
            b1.push_back({rng.normal(), rng.normal(), rng.normal()});
            b0.push_back({rng.normal(), rng.normal(), rng.normal()});
        }
        add_linear_outcomes(pop, b1, b0, 0.5, 200 + rep);
        const auto dm = build_design_matrices(pop);
        const double a = chi2_quantile(3, 0.01);
        const Vector th = {a, a};
        const auto tv = theoretical_variances(pop, dm, a, th);
        EXPECT_LE(tv.var_srrsm, tv.var_srrom * (1 + 1e-12));
        EXPECT_LE(tv.var_srrom, tv.var_sr * (1 + 1e-12));
    }
}

TEST(SrrdmBias, VanishesUnderEqualPropensity) {
    auto pop = gaussian_population({100, 100}, {0.5, 0.5}, 2, 30);
    add_linear_outcomes(pop, {{1.0, 0.5}}, {{0.5, 1.0}}, 0.5, 31);
    const auto dm = build_design_matrices(pop);
    Rng rng(32);
    const auto b = srrdm_bias(pop, dm, chi2_quantile(2, 0.1), 20000, rng);
    EXPECT_NEAR(b.noncentrality, 0.0, 1e-20);
    EXPECT_LT(std::abs(b.bias), 4 * b.mc_se + 1e-12);
    EXPECT_NEAR(b.acceptance, 0.1, 4 * b.acceptance_se);
}

TEST(SrrdmBias, VanishesAsThresholdGrows) {
    auto pop = gaussian_population({100, 100}, {0.3, 0.7}, 2, 33);
    add_linear_outcomes(pop, {{1.0, 0.5}}, {{0.5, 1.0}}, 0.5, 34);
    const auto dm = build_design_matrices(pop);
    Rng rng(35);
    const auto b = srrdm_bias(pop, dm, 1e6, 20000, rng);
    EXPECT_LT(std::abs(b.bias), 4 * b.mc_se);
    EXPECT_GT(b.noncentrality, 1.0);
}
