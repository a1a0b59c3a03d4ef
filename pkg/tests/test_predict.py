"""Area-level predictions: component means, posterior weighting, intercepts."""

import numpy as np
import pytest
from scipy.special import expit, logit

from spsae.em import EmConfig, fit
from spsae.exceptions import DataError
from spsae.model import AreaSample, MixtureParams, PopulationCrossTab
from spsae.predict import (
    component_population_means,
    posterior_mean_intercept,
    predict_areas,
    sp_ebp,
)

from conftest import make_crosstab, make_instance


class TestComponentPopulationMeans:
    def test_single_profile_even_odds(self):
        tab = PopulationCrossTab("a", np.zeros((1, 2)), [10.0])
        params = MixtureParams(np.zeros(2), [0.0, 0.0], [0.5, 0.5])
        np.testing.assert_allclose(component_population_means(params, tab), 0.5)

    def test_two_equal_profiles_average(self):
        params = MixtureParams([1.0], [0.0], [1.0])
        x1 = logit(0.2)
        x2 = logit(0.4)
        tab = PopulationCrossTab("a", np.array([[x1], [x2]]), [5.0, 5.0])
        assert component_population_means(params, tab)[0] == pytest.approx(0.3, abs=1e-12)

    def test_matches_unit_level_enumeration(self, rng):
        params = MixtureParams(rng.normal(size=2), [-0.5, 0.7], [0.4, 0.6])
        tab = make_crosstab("a", n_profiles=6, seed=8)
        expanded = np.repeat(tab.X, tab.counts.astype(int), axis=0)
        for g in range(2):
            direct = expit(expanded @ params.beta + params.xi[g]).mean()
            assert component_population_means(params, tab)[g] == pytest.approx(direct, abs=1e-12)

    def test_empty_population_rejected(self):
        tab = PopulationCrossTab("a", np.zeros((0, 2)), np.zeros(0))
        params = MixtureParams(np.zeros(2), [0.0], [1.0])
        with pytest.raises(DataError):
            component_population_means(params, tab)


class TestSpEbp:
    def test_single_component_is_plugin(self, rng):
        data, _ = make_instance(m=3, n_i=5, seed=30)
        params = MixtureParams(rng.normal(size=2), [0.3], [1.0])
        tab = make_crosstab(0, seed=9)
        pred = sp_ebp(params, data.area(0), tab)
        assert pred.p_hat == pytest.approx(component_population_means(params, tab)[0], abs=1e-14)

    def test_out_of_sample_uses_prior_masses(self, rng):
        params = MixtureParams(rng.normal(size=2), [-1.0, 1.0], [0.3, 0.7])
        tab = make_crosstab("new", seed=10)
        pred = sp_ebp(params, None, tab)
        assert pred.out_of_sample
        expected = component_population_means(params, tab) @ params.pi
        assert pred.p_hat == pytest.approx(expected, abs=1e-14)
        assert pred.alpha_hat == pytest.approx(0.0, abs=1e-12)

    def test_matches_direct_bernoulli_product_evaluation(self):
        # Hand instance: 2 components, 3 sampled units; weights via literal
        # products of Bernoulli probabilities, no log-space shortcuts.
        beta = np.array([0.5])
        xi = np.array([-0.8, 0.9])
        pi = np.array([0.35, 0.65])
        params = MixtureParams(beta, xi, pi)
        X = np.array([[0.2], [-1.0], [0.7]])
        y = np.array([1.0, 0.0, 1.0])
        area = AreaSample("a", y, X)
        tab = PopulationCrossTab("a", np.array([[0.0], [1.0]]), [6.0, 4.0])
        weights = []
        for g in range(2):
            probs = expit(X[:, 0] * beta[0] + xi[g])
            lik = np.prod(np.where(y == 1, probs, 1 - probs))
            weights.append(pi[g] * lik)
        tau = np.array(weights) / sum(weights)
        p_components = component_population_means(params, tab)
        expected = float(tau @ p_components)
        pred = sp_ebp(params, area, tab)
        assert pred.p_hat == pytest.approx(expected, abs=1e-12)
        np.testing.assert_allclose(pred.tau_i, tau, atol=1e-12)

    def test_prediction_is_convex_combination(self, rng):
        data, params = make_instance(m=6, n_i=8, seed=31)
        for i in range(6):
            tab = make_crosstab(i, seed=40 + i)
            pred = sp_ebp(params, data.area(i), tab)
            assert pred.component_means.min() - 1e-12 <= pred.p_hat <= pred.component_means.max() + 1e-12

    def test_adding_successes_shifts_weight_to_upper_component(self, rng):
        params = MixtureParams([0.4], [-1.0, 1.5], [0.5, 0.5])
        tab = make_crosstab("a", p=1, seed=11)
        X = rng.normal(size=(4, 1))
        y = np.array([0.0, 1.0, 0.0, 1.0])
        base = sp_ebp(params, AreaSample("a", y, X), tab)
        grown = sp_ebp(
            params,
            AreaSample("a", np.append(y, 1.0), np.vstack([X, [[0.1]]])),
            tab,
        )
        assert grown.tau_i[1] >= base.tau_i[1] - 1e-12

    def test_depends_on_sample_only_through_totals(self, rng):
        # Permuting responses among units with identical covariates leaves
        # the prediction unchanged.
        params = MixtureParams([0.4], [-1.0, 1.0], [0.5, 0.5])
        tab = make_crosstab("a", p=1, seed=12)
        X = np.tile([[0.3]], (5, 1))
        y1 = np.array([1.0, 1.0, 0.0, 0.0, 0.0])
        y2 = np.array([0.0, 0.0, 1.0, 0.0, 1.0])
        p1 = sp_ebp(params, AreaSample("a", y1, X), tab).p_hat
        p2 = sp_ebp(params, AreaSample("a", y2, X), tab).p_hat
        assert p1 == pytest.approx(p2, abs=1e-14)


class TestPosteriorMeanIntercept:
    def test_prior_weights_center_to_zero(self):
        params = MixtureParams(np.zeros(1), [-1.0, 2.0], [0.7, 0.3])
        assert posterior_mean_intercept(params, None) == pytest.approx(0.0, abs=1e-12)

    def test_degenerate_weights_pick_component_offset(self):
        params = MixtureParams([5.0], [-1.0, 2.0], [0.7, 0.3])
        # overwhelming evidence for the upper component
        X = np.zeros((30, 1))
        y = np.ones(30)
        area = AreaSample("a", y, X)
        alpha = posterior_mean_intercept(params, area)
        assert alpha == pytest.approx(2.0 - params.mean_intercept(), abs=1e-3)

    def test_matches_explicit_sum(self, rng):
        data, params = make_instance(m=4, n_i=6, seed=32)
        from spsae.predict import posterior_weights

        for i in range(4):
            area = data.area(i)
            tau = posterior_weights(params, area)
            expected = float((params.xi - params.pi @ params.xi) @ tau)
            assert posterior_mean_intercept(params, area) == pytest.approx(expected, abs=1e-14)


class TestPredictAreas:
    def test_out_of_sample_flagging_and_full_coverage(self):
        data, params = make_instance(m=4, n_i=5, seed=33)
        result = fit(data, 2, EmConfig(rng_seed=0, n_random_starts=1), compute_covariance=False)
        tabs = [make_crosstab(i, seed=50 + i) for i in range(4)] + [make_crosstab("extra", seed=60)]
        preds = predict_areas(result, tabs, data=data)
        assert len(preds) == 5
        assert [p.out_of_sample for p in preds] == [False] * 4 + [True]

    def test_stored_tau_path_matches_recomputation(self):
        data, params = make_instance(m=4, n_i=5, seed=34)
        result = fit(data, 2, EmConfig(rng_seed=0, n_random_starts=1), compute_covariance=False)
        tabs = [make_crosstab(i, seed=70 + i) for i in range(4)]
        from_tau = predict_areas(result, tabs)
        recomputed = predict_areas(result, tabs, data=data)
        for a, b in zip(from_tau, recomputed):
            assert a.p_hat == pytest.approx(b.p_hat, abs=1e-12)

    def test_relabeled_components_same_predictions(self):
        data, _ = make_instance(m=5, n_i=6, seed=35)
        params = MixtureParams([0.4, -0.2], [-1.0, 1.0], [0.6, 0.4])
        swapped = MixtureParams([0.4, -0.2], [1.0, -1.0], [0.4, 0.6])
        tab = make_crosstab(0, seed=13)
        p1 = sp_ebp(params, data.area(0), tab).p_hat
        p2 = sp_ebp(swapped, data.area(0), tab).p_hat
        assert p1 == pytest.approx(p2, abs=1e-14)
