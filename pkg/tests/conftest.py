"""Shared fixtures: small deterministic instances used across test modules."""

import numpy as np
import pytest

from spsae.model import AreaSample, MixtureParams, PopulationCrossTab, SurveyData


def make_instance(m=5, n_i=6, p=2, G=2, seed=0, beta=None, xi=None, pi=None):
    """A small random dataset drawn from a known mixture model."""
    rng = np.random.default_rng(seed)
    beta = np.array([0.8, -0.5][:p]) if beta is None else np.asarray(beta, dtype=float)
    xi = np.array([-1.0, 0.8][:G]) if xi is None else np.asarray(xi, dtype=float)
    pi = (np.full(G, 1.0 / G) if pi is None else np.asarray(pi, dtype=float))
    params = MixtureParams(beta, xi, pi)
    areas = []
    for i in range(m):
        g = rng.choice(G, p=params.pi)
        X = rng.normal(0.0, 1.0, size=(n_i, p))
        eta = X @ beta + xi[g]
        y = (rng.random(n_i) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
        areas.append(AreaSample(i, y, X))
    return SurveyData(areas), params


def make_crosstab(area_id, n_profiles=8, p=2, seed=0, max_count=40):
    rng = np.random.default_rng(seed)
    X = rng.normal(0.0, 1.0, size=(n_profiles, p))
    counts = rng.integers(1, max_count, size=n_profiles).astype(float)
    return PopulationCrossTab(area_id, X, counts)


@pytest.fixture
def small_instance():
    return make_instance(m=5, n_i=6, p=2, G=2, seed=42)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
