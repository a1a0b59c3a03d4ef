"""Domain types and likelihood primitives for the finite-mixture mixed logistic model.

Binary responses are grouped by area. Conditional on an area-level random
intercept, responses are independent Bernoulli with logit(p) = x'beta + alpha.
The random-intercept distribution is discrete: it puts masses pi_1..pi_G on
locations xi_1..xi_G, so the marginal likelihood of an area is a finite
mixture of conditional Bernoulli products.

There is no separate fixed intercept in beta: the locations absorb it, and
``MixtureParams.mean_intercept()`` reports the implied overall intercept.

All types are immutable after construction and all operations are pure
functions, so they are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .exceptions import DataError

__all__ = [
    "UnitRecord",
    "AreaSample",
    "SurveyData",
    "PopulationCrossTab",
    "MixtureParams",
    "FitResult",
    "linear_predictor",
    "area_component_loglik",
    "observed_loglik",
    "aic_bic",
    "n_free_parameters",
    "log1pexp",
]


def log1pexp(eta):
    """Numerically stable log(1 + exp(eta)): max(eta, 0) + log1p(exp(-|eta|))."""
    eta = np.asarray(eta, dtype=float)
    return np.maximum(eta, 0.0) + np.log1p(np.exp(-np.abs(eta)))


def _readonly(a, dtype=float, ndim=None):
    out = np.array(a, dtype=dtype)
    if ndim is not None and out.ndim != ndim:
        raise DataError(f"expected a {ndim}-dimensional array, got shape {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class UnitRecord:
    """One sampled unit: binary response, covariate vector, and its area."""

    y: int
    x: np.ndarray
    area_id: Any

    def __post_init__(self):
        if self.y not in (0, 1):
            raise DataError(f"response must be 0 or 1, got {self.y!r}")
        object.__setattr__(self, "x", _readonly(self.x, ndim=1))


@dataclass(frozen=True)
class AreaSample:
    """All sampled units for one area, stored as stacked arrays.

    ``n_i == 0`` marks an out-of-sample area. ``X`` has one row per unit and
    the same number of columns as every other area in a dataset.
    """

    area_id: Any
    y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        y = _readonly(self.y, ndim=1)
        X = _readonly(self.X, ndim=2)
        if X.shape[0] != y.size:
            raise DataError(
                f"area {self.area_id!r}: {y.size} responses but {X.shape[0]} covariate rows"
            )
        if y.size and not np.isin(y, (0.0, 1.0)).all():
            raise DataError(f"area {self.area_id!r}: responses must be 0 or 1")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)

    @classmethod
    def from_records(cls, area_id, records: Sequence[UnitRecord]) -> "AreaSample":
        records = list(records)
        if any(r.area_id != area_id for r in records):
            raise DataError("record area_id does not match the sample's area_id")
        p = records[0].x.size if records else 0
        y = np.array([r.y for r in records], dtype=float)
        X = np.array([r.x for r in records], dtype=float).reshape(len(records), p)
        return cls(area_id, y, X)

    @property
    def n_i(self) -> int:
        return self.y.size

    @property
    def records(self) -> tuple[UnitRecord, ...]:
        return tuple(
            UnitRecord(int(yi), xi, self.area_id) for yi, xi in zip(self.y, self.X)
        )


class SurveyData:
    """A sample of areas, stacked into flat arrays for vectorized likelihoods.

    Units are stored contiguously per area in the order the areas are given.
    Areas with no units are allowed and contribute nothing to likelihoods.
    """

    def __init__(self, areas: Sequence[AreaSample]):
        areas = tuple(areas)
        if not areas:
            raise DataError("dataset must contain at least one area")
        widths = {a.X.shape[1] for a in areas}
        if len(widths) > 1:
            raise DataError(f"covariate width differs across areas: {sorted(widths)}")
        ids = [a.area_id for a in areas]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate area_id in dataset")
        self.areas = areas
        self.area_ids = tuple(ids)
        self.p = widths.pop()
        sizes = np.array([a.n_i for a in areas], dtype=int)
        self.n_i = sizes
        self.n_units = int(sizes.sum())
        self.m = len(areas)
        if self.n_units:
            self.y = np.concatenate([a.y for a in areas])
            self.X = np.concatenate([a.X for a in areas], axis=0)
        else:
            self.y = np.zeros(0)
            self.X = np.zeros((0, self.p))
        self.y.setflags(write=False)
        self.X.setflags(write=False)
        self.area_index = np.repeat(np.arange(self.m), sizes)
        self.area_index.setflags(write=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        self._nonempty = np.flatnonzero(sizes > 0)
        self._nonempty_starts = offsets[self._nonempty]
        self._index = {aid: k for k, aid in enumerate(self.area_ids)}

    @classmethod
    def from_arrays(cls, area_ids, y, X) -> "SurveyData":
        """Build from flat arrays; units are grouped by ``area_ids`` values
        in order of first appearance."""
        area_ids = np.asarray(area_ids)
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or y.ndim != 1 or y.size != X.shape[0] or y.size != area_ids.size:
            raise DataError("area_ids, y and X must have matching first dimensions")
        order = {}
        for aid in area_ids:
            order.setdefault(aid.item() if hasattr(aid, "item") else aid, None)
        areas = []
        for aid in order:
            mask = area_ids == aid
            areas.append(AreaSample(aid, y[mask], X[mask]))
        return cls(areas)

    def area(self, area_id) -> AreaSample:
        return self.areas[self._index[area_id]]

    def __contains__(self, area_id) -> bool:
        return area_id in self._index

    def segment_sum(self, values: np.ndarray) -> np.ndarray:
        """Sum unit-level rows within each area; empty areas get zero rows."""
        out = np.zeros((self.m,) + values.shape[1:])
        if self._nonempty.size:
            out[self._nonempty] = np.add.reduceat(values, self._nonempty_starts, axis=0)
        return out


@dataclass(frozen=True)
class PopulationCrossTab:
    """Population counts of an area's units by covariate profile."""

    area_id: Any
    X: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        X = _readonly(self.X, ndim=2)
        counts = _readonly(self.counts, ndim=1)
        if counts.size != X.shape[0]:
            raise DataError(f"area {self.area_id!r}: counts do not match profiles")
        if counts.size and counts.min() < 0:
            raise DataError(f"area {self.area_id!r}: negative population count")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "counts", counts)

    @property
    def N_i(self) -> float:
        return float(self.counts.sum())

    @property
    def profiles(self) -> tuple[tuple[np.ndarray, float], ...]:
        return tuple((x, float(c)) for x, c in zip(self.X, self.counts))


@dataclass(frozen=True)
class MixtureParams:
    """Model parameters: slopes ``beta``, locations ``xi``, masses ``pi``.

    Masses must be strictly positive and are renormalized to sum to one
    exactly. Construction does not reorder components; ``canonical()``
    returns the relabeling with locations sorted ascending.
    """

    beta: np.ndarray
    xi: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        beta = _readonly(self.beta, ndim=1)
        xi = _readonly(self.xi, ndim=1)
        pi = np.array(self.pi, dtype=float)
        if pi.ndim != 1 or pi.size != xi.size:
            raise DataError("pi and xi must be vectors of equal length G")
        if xi.size < 1:
            raise DataError("at least one mixture component is required")
        if np.any(pi <= 0):
            raise DataError("mixture masses must be strictly positive")
        total = pi.sum()
        if abs(total - 1.0) > 1e-6:
            raise DataError(f"mixture masses must sum to 1, got {total!r}")
        pi /= total
        pi.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "pi", pi)

    @property
    def G(self) -> int:
        return self.xi.size

    @property
    def p(self) -> int:
        return self.beta.size

    @property
    def n_free(self) -> int:
        return n_free_parameters(self.p, self.G)

    def canonical(self) -> "MixtureParams":
        """Relabel components so that locations are sorted ascending."""
        order = np.argsort(self.xi, kind="stable")
        return MixtureParams(self.beta, self.xi[order], self.pi[order])

    def mean_intercept(self) -> float:
        """Mass-weighted mean location: the implied overall intercept."""
        return float(self.pi @ self.xi)

    def mixing_variance(self) -> float:
        """Variance of the discrete random-intercept distribution."""
        return float(self.pi @ (self.xi - self.mean_intercept()) ** 2)

    def to_free(self) -> np.ndarray:
        """Free-parameter vector (beta, xi, pi_1..pi_{G-1}); pi_G is implied."""
        return np.concatenate([self.beta, self.xi, self.pi[:-1]])

    @classmethod
    def from_free(cls, vec, p: int, G: int) -> "MixtureParams":
        vec = np.asarray(vec, dtype=float)
        if vec.size != n_free_parameters(p, G):
            raise DataError("free-parameter vector has the wrong length")
        beta = vec[:p]
        xi = vec[p : p + G]
        pi_head = vec[p + G :]
        pi = np.concatenate([pi_head, [1.0 - pi_head.sum()]])
        return cls(beta, xi, pi)


def n_free_parameters(p: int, G: int) -> int:
    """Number of free parameters: p slopes, G locations, G-1 masses."""
    return p + G + (G - 1)


def linear_predictor(beta, xi_g: float, x) -> float:
    """Linear predictor x'beta + xi_g; the success probability is expit of it."""
    beta = np.asarray(beta, dtype=float)
    x = np.asarray(x, dtype=float)
    if beta.shape != x.shape:
        raise DataError(f"covariate length {x.shape} does not match beta {beta.shape}")
    return float(x @ beta + xi_g)


def area_component_loglik(area: AreaSample, beta, xi_g: float) -> float:
    """Log density of one area's responses conditional on one component.

    Sum over the area's units of y*eta - log(1 + exp(eta)), with the log term
    evaluated in its stable form. An empty area returns 0.
    """
    beta = np.asarray(beta, dtype=float)
    if area.X.shape[1] != beta.size:
        raise DataError("covariate width does not match beta")
    eta = area.X @ beta + xi_g
    return float(area.y @ eta - log1pexp(eta).sum())


def component_loglik_matrix(params: MixtureParams, data: SurveyData) -> np.ndarray:
    """m x G matrix of per-area conditional log densities."""
    return _component_logliks(params.beta, params.xi, data)


def _component_logliks(beta, xi, data: SurveyData) -> np.ndarray:
    if data.p != np.asarray(beta).size:
        raise DataError("covariate width does not match beta")
    eta = (data.X @ beta)[:, None] + np.asarray(xi)[None, :]
    unit_terms = data.y[:, None] * eta - log1pexp(eta)
    return data.segment_sum(unit_terms)


def _posterior(beta, xi, pi, data: SurveyData):
    """Posterior component weights per area and the observed log-likelihood.

    Areas without sampled units get their prior weights ``pi``.
    """
    logf = _component_logliks(beta, xi, data)
    with np.errstate(divide="ignore"):
        logw = logf + np.log(pi)[None, :]
    norm = logsumexp(logw, axis=1)
    tau = np.exp(logw - norm[:, None])
    return tau, float(norm.sum())


def observed_loglik(params: MixtureParams, data: SurveyData) -> float:
    """Observed-data log-likelihood: sum over areas of log sum_g pi_g f_ig."""
    return _posterior(params.beta, params.xi, params.pi, data)[1]


def aic_bic(loglik: float, p: int, G: int, m: int) -> tuple[float, float]:
    """AIC and BIC with K = p + G + (G-1) free parameters and m areas."""
    K = n_free_parameters(p, G)
    return -2.0 * loglik + 2.0 * K, -2.0 * loglik + K * np.log(m)


@dataclass(frozen=True)
class FitResult:
    """A converged (or best-effort) maximum-likelihood fit.

    ``tau`` holds the posterior component weights of each area, aligned with
    ``area_ids``. ``covariance`` is the K x K covariance of the free
    parameters (beta, xi, pi_1..pi_{G-1}); it is None when the information
    matrix could not be inverted (see ``covariance_error``).
    """

    params: MixtureParams
    area_ids: tuple
    tau: np.ndarray
    loglik: float
    aic: float
    bic: float
    converged: bool
    n_iter: int
    final_rel_change: float
    start_index: int
    covariance: np.ndarray | None = None
    covariance_method: str = "sandwich"
    covariance_error: str | None = None
    em_trace: tuple = field(default=(), repr=False)

    def __post_init__(self):
        tau = _readonly(self.tau, ndim=2)
        if tau.shape != (len(self.area_ids), self.params.G):
            raise DataError("tau shape does not match areas and components")
        object.__setattr__(self, "tau", tau)
        if self.covariance is not None:
            cov = _readonly(self.covariance, ndim=2)
            K = self.params.n_free
            if cov.shape != (K, K):
                raise DataError("covariance has the wrong shape")
            object.__setattr__(self, "covariance", cov)

    @property
    def m(self) -> int:
        return len(self.area_ids)

    @property
    def n_free(self) -> int:
        return self.params.n_free

    def tau_for(self, area_id) -> np.ndarray:
        try:
            k = self.area_ids.index(area_id)
        except ValueError:
            raise KeyError(f"area {area_id!r} was not in the fitted sample") from None
        return self.tau[k]
