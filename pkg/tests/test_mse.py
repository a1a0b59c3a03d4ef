"""MSE machinery: Poisson-Binomial, d and e terms, derivatives, bias terms."""

import itertools

import numpy as np
import pytest
from scipy.special import expit
from scipy.stats import binom

from spsae.em import EmConfig, fit
from spsae.exceptions import DataError
from spsae.model import AreaSample, MixtureParams, PopulationCrossTab, SurveyData
from spsae.mse import (
    bias_correction,
    bp_derivatives,
    conditional_bp,
    d_term,
    e_term,
    marginal_count_pmf,
    mse_report,
    mse_star,
    poisson_binomial,
)
from spsae.predict import sp_ebp

from conftest import make_crosstab, make_instance


def exhaustive_count_pmf(p_vec):
    n = len(p_vec)
    pmf = np.zeros(n + 1)
    for outcome in itertools.product((0, 1), repeat=n):
        prob = np.prod([p if o else 1 - p for o, p in zip(outcome, p_vec)])
        pmf[sum(outcome)] += prob
    return pmf


class TestPoissonBinomial:
    def test_two_fair_trials(self):
        np.testing.assert_allclose(poisson_binomial([0.5, 0.5]).probs, [0.25, 0.5, 0.25])

    def test_equal_probabilities_collapse_to_binomial(self):
        q, n = 0.3, 9
        np.testing.assert_allclose(
            poisson_binomial([q] * n).probs, binom.pmf(np.arange(n + 1), n, q), atol=1e-14
        )

    def test_matches_exhaustive_enumeration(self, rng):
        for _ in range(30):
            n = rng.integers(1, 12)
            p_vec = rng.random(n)
            np.testing.assert_allclose(
                poisson_binomial(p_vec).probs, exhaustive_count_pmf(p_vec), atol=1e-12
            )

    def test_rejects_out_of_range(self):
        with pytest.raises(DataError):
            poisson_binomial([0.5, 1.2])

    def test_normalization_invariant(self, rng):
        pmf = poisson_binomial(rng.random(25)).probs
        assert pmf.sum() == pytest.approx(1.0, abs=1e-12)
        assert pmf.min() >= 0


class TestMarginalCountPmf:
    def test_single_component_is_poisson_binomial(self, rng):
        data, _ = make_instance(m=2, n_i=6, seed=36)
        params = MixtureParams(rng.normal(size=2), [0.4], [1.0])
        area = data.area(0)
        expected = poisson_binomial(expit(area.X @ params.beta + params.xi[0])).probs
        np.testing.assert_allclose(marginal_count_pmf(params, area), expected, atol=1e-14)

    def test_sums_to_one(self, small_instance):
        data, params = small_instance
        for area in data.areas:
            assert marginal_count_pmf(params, area).sum() == pytest.approx(1.0, abs=1e-10)

    def test_empty_area_degenerate_at_zero(self, small_instance):
        _, params = small_instance
        np.testing.assert_array_equal(marginal_count_pmf(params, None), [1.0])

    def test_matches_two_component_enumeration(self, rng):
        params = MixtureParams([0.3], [-0.6, 0.8], [0.45, 0.55])
        X = rng.normal(size=(3, 1))
        area = AreaSample("a", np.zeros(3), X)
        expected = np.zeros(4)
        for g in range(2):
            expected += params.pi[g] * exhaustive_count_pmf(expit(X[:, 0] * 0.3 + params.xi[g]))
        np.testing.assert_allclose(marginal_count_pmf(params, area), expected, atol=1e-12)


class TestConditionalBp:
    def test_observed_count_consistent_with_predictor(self):
        data, params = make_instance(m=5, n_i=7, seed=37)
        for i in range(5):
            area = data.area(i)
            tab = make_crosstab(i, seed=80 + i)
            assert conditional_bp(params, area, tab, int(area.y.sum())) == pytest.approx(
                sp_ebp(params, area, tab).p_hat, abs=1e-12
            )

    def test_single_component_independent_of_count(self, rng):
        params = MixtureParams(rng.normal(size=2), [0.1], [1.0])
        data, _ = make_instance(m=2, n_i=6, seed=38)
        tab = make_crosstab(0, seed=14)
        values = {conditional_bp(params, data.area(0), tab, h) for h in range(7)}
        assert max(values) - min(values) < 1e-14

    def test_monotone_in_count_for_sorted_locations(self, rng):
        for trial in range(10):
            params = MixtureParams(
                rng.normal(size=1) * 0.3, np.sort(rng.normal(size=3) * 1.5), np.full(3, 1 / 3)
            )
            X = rng.normal(size=(6, 1))
            area = AreaSample("a", np.zeros(6), X)
            tab = make_crosstab("a", p=1, seed=200 + trial)
            values = [conditional_bp(params, area, tab, h) for h in range(7)]
            assert np.all(np.diff(values) >= -1e-12)

    def test_count_out_of_range_rejected(self, small_instance):
        data, params = small_instance
        with pytest.raises(DataError):
            conditional_bp(params, data.area(0), make_crosstab(0), 99)


class TestDTerm:
    def test_single_component_exactly_zero(self, rng):
        params = MixtureParams(rng.normal(size=2), [0.5], [1.0])
        data, _ = make_instance(m=2, n_i=5, seed=39)
        assert d_term(params, data.area(0), make_crosstab(0, seed=15)) == 0.0

    def test_out_of_sample_prior_variance(self):
        params = MixtureParams(np.zeros(1), [-1.0, 1.0], [0.4, 0.6])
        tab = make_crosstab("a", p=1, seed=16)
        from spsae.predict import component_population_means

        P = component_population_means(params, tab)
        expected = P**2 @ params.pi - (P @ params.pi) ** 2
        assert d_term(params, None, tab) == pytest.approx(expected, abs=1e-14)

    def test_nonnegative_on_random_instances(self, rng):
        for trial in range(20):
            data, params = make_instance(m=3, n_i=6, seed=300 + trial)
            tab = make_crosstab(0, seed=400 + trial)
            assert d_term(params, data.area(0), tab) >= -1e-10

    def test_matches_monte_carlo(self, rng):
        params = MixtureParams([0.4], [-1.0, 0.8], [0.55, 0.45])
        X = rng.normal(size=(6, 1))
        area = AreaSample("a", np.zeros(6), X)
        tab = make_crosstab("a", p=1, n_profiles=5, seed=17)
        from spsae.predict import component_population_means

        P = component_population_means(params, tab)
        draws = 200_000
        g = rng.choice(2, size=draws, p=params.pi)
        probs = expit(X[:, 0] * 0.4 + params.xi[g][:, None])
        counts = (rng.random((draws, 6)) < probs).sum(axis=1)
        cond = np.array([conditional_bp(params, area, tab, h) for h in range(7)])
        sample_terms = P[g] ** 2 - cond[counts] ** 2
        estimate = sample_terms.mean()
        se = sample_terms.std() / np.sqrt(draws)
        assert abs(d_term(params, area, tab) - estimate) <= 3 * se


class TestBpDerivatives:
    def test_matches_finite_differences(self, rng):
        data, _ = make_instance(m=5, n_i=6, seed=41)
        tab = make_crosstab(0, seed=18)
        area = data.area(0)
        for _ in range(10):
            raw = rng.uniform(0.3, 1.0, size=2)
            params = MixtureParams(
                rng.normal(0, 0.5, size=2), np.sort(rng.normal(0, 1, size=2)), raw / raw.sum()
            )
            phi = params.to_free()
            h = rng.integers(0, area.n_i + 1)
            analytic = bp_derivatives(params, area, tab, h)
            numeric = np.empty_like(phi)
            for k in range(phi.size):
                e = np.zeros_like(phi)
                e[k] = 1e-6 * (1 + abs(phi[k]))
                plus = MixtureParams.from_free(phi + e, 2, 2)
                minus = MixtureParams.from_free(phi - e, 2, 2)
                numeric[k] = (
                    conditional_bp(plus, area, tab, h) - conditional_bp(minus, area, tab, h)
                ) / (2 * e[k])
            denom = max(np.abs(numeric).max(), 1e-10)
            assert np.abs(analytic - numeric).max() / denom < 1e-5

    def test_single_component_collapse(self, rng):
        params = MixtureParams(np.zeros(1), [0.3], [1.0])
        X = rng.normal(size=(4, 1))
        area = AreaSample("a", np.zeros(4), X)
        tab = make_crosstab("a", p=1, seed=19)
        grad = bp_derivatives(params, area, tab, 2)
        probs = expit(tab.X[:, 0] * 0.0 + 0.3)
        v = float(tab.counts @ (probs * (1 - probs)) / tab.N_i)
        assert grad[1] == pytest.approx(v, abs=1e-12)  # location derivative
        assert grad.size == 2  # slope + location, no free masses

    def test_symmetric_components_equal_location_derivatives(self):
        params = MixtureParams(np.zeros(1), [0.4, 0.4], [0.5, 0.5])
        X = np.array([[0.5], [-0.5]])
        area = AreaSample("a", np.array([1.0, 0.0]), X)
        tab = PopulationCrossTab("a", np.array([[0.0]]), [10.0])
        grad = bp_derivatives(params, area, tab, 1)
        assert grad[1] == pytest.approx(grad[2], abs=1e-12)


class TestETerm:
    def test_zero_covariance_gives_zero(self, small_instance):
        data, params = small_instance
        result = fit(data, 2, EmConfig(rng_seed=0, n_random_starts=1), compute_covariance=False)
        K = result.params.n_free
        tab = make_crosstab(0, seed=20)
        assert e_term(result, data.area(0), tab, np.zeros((K, K))) == 0.0

    def test_linear_in_covariance_scale(self, small_instance):
        data, _ = small_instance
        result = fit(data, 2, EmConfig(rng_seed=0, n_random_starts=1))
        tab = make_crosstab(0, seed=21)
        V = result.covariance
        e1 = e_term(result, data.area(0), tab, V)
        e2 = e_term(result, data.area(0), tab, 3.0 * V)
        assert e2 == pytest.approx(3.0 * e1, rel=1e-12)
        assert e1 >= 0

    def test_intercept_only_delta_method(self):
        # G = 1, no covariates: e/m must equal the delta-method variance of
        # the population mean probability.
        rng = np.random.default_rng(6)
        y = (rng.random(160) < 0.35).astype(float)
        areas = [AreaSample(i, y[8 * i : 8 * (i + 1)], np.zeros((8, 0))) for i in range(20)]
        data = SurveyData(areas)
        result = fit(data, 1, EmConfig(tol_rel_loglik=1e-13))
        tab = PopulationCrossTab(0, np.zeros((1, 0)), [50.0])
        prob = expit(result.params.xi[0])
        var_xi = result.covariance[0, 0]
        expected = (prob * (1 - prob)) ** 2 * var_xi
        e = e_term(result, data.area(0), tab, result.covariance)
        assert e / data.m == pytest.approx(expected, rel=1e-9)


class TestBiasCorrection:
    def test_zero_covariance_and_flat_d(self):
        # Single component: d vanishes identically, so both terms vanish.
        data, _ = make_instance(m=10, n_i=6, seed=42)
        result = fit(data, 1, EmConfig(rng_seed=0))
        tabs = [make_crosstab(i, seed=500 + i) for i in range(3)]
        b1, b2 = bias_correction(result, data, tabs, V=np.zeros((3, 3)))
        np.testing.assert_allclose(b1, 0.0, atol=1e-8)
        np.testing.assert_allclose(b2, 0.0, atol=1e-12)

    def test_correction_is_bounded_in_m(self):
        # b1 + b2 should stay O(1) as the number of areas grows, so the
        # correction to the MSE (b/m) vanishes.
        magnitudes = {}
        for m in (60, 120, 240):
            data, _ = make_instance(m=m, n_i=12, seed=43, xi=[-1.2, 1.2], pi=[0.6, 0.4])
            result = fit(data, 2, EmConfig(rng_seed=1, n_random_starts=1))
            tabs = [make_crosstab(i, seed=600 + i) for i in range(8)]
            b1, b2 = bias_correction(result, data, tabs)
            magnitudes[m] = np.abs(b1 + b2).mean()
        assert magnitudes[240] < 6 * magnitudes[60] + 0.5

    def test_empirical_information_variant_runs(self):
        data, _ = make_instance(m=40, n_i=12, seed=44, xi=[-1.5, 1.5], pi=[0.5, 0.5])
        result = fit(data, 2, EmConfig(rng_seed=1, n_random_starts=1))
        tabs = [make_crosstab(i, seed=700 + i) for i in range(3)]
        b1, b2 = bias_correction(result, data, tabs, information="empirical")
        assert b1 is None or np.all(np.isfinite(b1))


class TestMseStarAndReport:
    def test_zero_bias_reduces_to_plain(self, small_instance):
        data, _ = small_instance
        result = fit(data, 2, EmConfig(rng_seed=0, n_random_starts=1))
        tab = make_crosstab(0, seed=22)
        area = data.area(0)
        plain = d_term(result, area, tab) + e_term(result, area, tab) / result.m
        assert mse_star(result, area, tab, bias=(0.0, 0.0)) == pytest.approx(plain, rel=1e-12)

    def test_single_component_star_has_no_d(self, rng):
        data, _ = make_instance(m=8, n_i=6, seed=45)
        result = fit(data, 1, EmConfig(rng_seed=0))
        tab = make_crosstab(0, seed=23)
        area = data.area(0)
        assert d_term(result, area, tab) == 0.0
        star = mse_star(result, area, tab)
        assert star == pytest.approx(e_term(result, area, tab) / result.m, rel=1e-12)

    def test_negative_star_floored_and_flagged(self, small_instance):
        data, _ = small_instance
        result = fit(data, 2, EmConfig(rng_seed=0, n_random_starts=1))
        tab = make_crosstab(0, seed=24)
        area = data.area(0)
        plain = d_term(result, area, tab) + e_term(result, area, tab) / result.m
        huge_bias = (plain * result.m * 10, 0.0)
        star = mse_star(result, area, tab, bias=huge_bias)
        assert star == pytest.approx(0.25 * plain, rel=1e-12)

    def test_report_consistency_and_relabeling_invariance(self):
        data, _ = make_instance(m=12, n_i=8, seed=46, xi=[-1.0, 1.0], pi=[0.55, 0.45])
        result = fit(data, 2, EmConfig(rng_seed=2, n_random_starts=1))
        tabs = [make_crosstab(i, seed=800 + i) for i in range(12)]
        report = mse_report(result, data, tabs)
        np.testing.assert_allclose(report.mse_plain, report.d + report.e / result.m, atol=1e-15)
        finite = np.isfinite(report.cv_percent)
        np.testing.assert_allclose(
            report.cv_percent[finite],
            100 * np.sqrt(report.mse_star[finite]) / report.p_hat[finite],
        )
        # Relabeled components give an identical report once the covariance
        # is mapped into the relabeled chart: (beta, xi1, xi2, pi1) ->
        # (beta, xi2, xi1, 1 - pi1) has Jacobian diag-block [swap, -1].
        params = result.params
        swapped = MixtureParams(params.beta, params.xi[::-1], params.pi[::-1])
        from dataclasses import replace

        p = params.p
        L = np.eye(result.n_free)
        L[p, p] = L[p + 1, p + 1] = 0.0
        L[p, p + 1] = L[p + 1, p] = 1.0
        L[p + 2, p + 2] = -1.0
        relabeled = replace(
            result,
            params=swapped,
            tau=np.ascontiguousarray(result.tau[:, ::-1]),
            covariance=L @ result.covariance @ L.T,
        )
        report2 = mse_report(relabeled, data, tabs)
        np.testing.assert_allclose(report2.d, report.d, atol=1e-10)
        np.testing.assert_allclose(report2.e, report.e, rtol=1e-6, atol=1e-12)
        np.testing.assert_allclose(report2.mse_star, report.mse_star, rtol=1e-3, atol=1e-8)

    def test_report_without_bias_correction(self, small_instance):
        data, _ = small_instance
        result = fit(data, 2, EmConfig(rng_seed=0, n_random_starts=1))
        tabs = [make_crosstab(i, seed=900 + i) for i in range(5)]
        report = mse_report(result, data, tabs, bias_correct=False)
        assert not report.bias_corrected
        np.testing.assert_array_equal(report.mse_star, report.mse_plain)
        assert np.all(np.isnan(report.b1))
