"""EM estimation of the mixture model, with multi-start and selection over G.

Each EM iteration performs the exact closed-form mass update and a single
damped Newton pass on the expected complete-data log-likelihood for the
stacked (beta, xi) block (a generalized EM step). Step-halving guarantees the
surrogate never decreases, so the observed log-likelihood is monotone.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from . import inference
from .exceptions import DataError, EstimationError
from .model import (
    FitResult,
    MixtureParams,
    SurveyData,
    _component_logliks,
    _posterior,
    aic_bic,
)

__all__ = ["EmConfig", "e_step", "m_step_masses", "m_step_regression", "fit", "select_G"]

_MONOTONE_SLACK = 1e-10


@dataclass(frozen=True)
class EmConfig:
    """Tuning knobs for the EM fit."""

    max_iter: int = 500
    tol_rel_loglik: float = 1e-8
    n_random_starts: int = 10
    perturb_scale: float = 0.5
    min_mass: float = 1e-6
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_iter < 1:
            raise DataError("max_iter must be at least 1")
        if self.tol_rel_loglik <= 0:
            raise DataError("tol_rel_loglik must be positive")
        if self.n_random_starts < 0:
            raise DataError("n_random_starts must be nonnegative")
        if self.min_mass <= 0:
            raise DataError("min_mass must be positive")


def e_step(params: MixtureParams, data: SurveyData) -> np.ndarray:
    """Posterior component weights per area (rows sum to one).

    Areas with no sampled units get the prior masses.
    """
    return _posterior(params.beta, params.xi, params.pi, data)[0]


def m_step_masses(tau: np.ndarray) -> np.ndarray:
    """Closed-form mass update: column means of the posterior weights."""
    return np.asarray(tau, dtype=float).mean(axis=0)


def m_step_regression(
    tau: np.ndarray,
    data: SurveyData,
    params: MixtureParams,
    max_halvings: int = 30,
) -> tuple[np.ndarray, np.ndarray]:
    """One damped Newton pass for (beta, xi) on the EM surrogate.

    Returns updated (beta, xi). The step is halved (up to ``max_halvings``
    times) until the surrogate does not decrease; if no improving step is
    found the parameters are returned unchanged.
    """
    tau = np.asarray(tau, dtype=float)
    beta, xi = _newton_pass(params.beta.copy(), params.xi.copy(), tau, data, max_halvings)
    return beta, xi


def _q_regression(beta, xi, tau_units, data):
    eta = (data.X @ beta)[:, None] + xi[None, :]
    unit_terms = data.y[:, None] * eta - (np.maximum(eta, 0.0) + np.log1p(np.exp(-np.abs(eta))))
    return float((tau_units * unit_terms).sum())


def _newton_pass(beta, xi, tau, data, max_halvings):
    p, G = beta.size, xi.size
    tau_units = tau[data.area_index]
    eta = (data.X @ beta)[:, None] + xi[None, :]
    prob = expit(eta)
    resid = tau_units * (data.y[:, None] - prob)
    score = np.concatenate([data.X.T @ resid.sum(axis=1), resid.sum(axis=0)])
    w = tau_units * prob * (1.0 - prob)
    J = np.empty((p + G, p + G))
    J[:p, :p] = data.X.T @ (data.X * w.sum(axis=1)[:, None])
    J[:p, p:] = data.X.T @ w
    J[p:, :p] = J[:p, p:].T
    J[p:, p:] = np.diag(w.sum(axis=0))
    direction = _solve_newton(J, score)

    q0 = _q_regression(beta, xi, tau_units, data)
    step = 1.0
    for _ in range(max_halvings + 1):
        cand = np.concatenate([beta, xi]) + step * direction
        q1 = _q_regression(cand[:p], cand[p:], tau_units, data)
        if np.isfinite(q1) and q1 >= q0:
            return cand[:p], cand[p:]
        step *= 0.5
    return beta, xi


def _solve_newton(J, score):
    try:
        direction = np.linalg.solve(J, score)
        if np.all(np.isfinite(direction)):
            return direction
    except np.linalg.LinAlgError:
        pass
    ridge = J + 1e-8 * np.eye(J.shape[0])
    try:
        direction = np.linalg.solve(ridge, score)
    except np.linalg.LinAlgError:
        direction = None
    if direction is None or not np.all(np.isfinite(direction)):
        raise EstimationError("separation/degenerate design: Newton system is singular")
    return direction


@dataclass
class _EmRun:
    beta: np.ndarray
    xi: np.ndarray
    pi: np.ndarray
    loglik: float
    tau: np.ndarray
    converged: bool
    n_iter: int
    final_rel_change: float
    trace: tuple


def _run_em(beta, xi, pi, data, config) -> _EmRun:
    beta, xi, pi = beta.copy(), xi.copy(), pi.copy()
    tau, ll = _posterior(beta, xi, pi, data)
    trace = [ll]
    converged = False
    rel = np.inf
    iterations = 0
    for iterations in range(1, config.max_iter + 1):
        pi = m_step_masses(tau)
        beta, xi = _newton_pass(beta, xi, tau, data, max_halvings=30)
        tau_new, ll_new = _posterior(beta, xi, pi, data)
        if ll_new < ll - _MONOTONE_SLACK:
            raise EstimationError(
                f"EM log-likelihood decreased by {ll - ll_new:.3e} at iteration {iterations}"
            )
        trace.append(ll_new)
        rel = abs(ll_new - ll) / (1.0 + abs(ll))
        tau, ll = tau_new, ll_new
        if rel < config.tol_rel_loglik:
            converged = True
            break
    return _EmRun(beta, xi, pi, ll, tau, converged, iterations, rel, tuple(trace))


def _converge_with_dropping(beta, xi, pi, data, config) -> _EmRun:
    """Run EM; drop components whose mass collapses and re-converge."""
    run = _run_em(beta, xi, pi, data, config)
    while run.xi.size > 1 and run.pi.min() < config.min_mass:
        keep = run.pi >= config.min_mass
        if not keep.any():
            keep = run.pi == run.pi.max()
        pi_kept = run.pi[keep]
        run = _run_em(run.beta, run.xi[keep], pi_kept / pi_kept.sum(), data, config)
    return run


def homogeneous_logistic(data: SurveyData, tol=1e-12, max_iter=200):
    """ML fit of a plain logistic regression with an intercept.

    Returns (beta, intercept, loglik). Used for the deterministic EM start
    and as the G = 1 special case.
    """
    tau = np.ones((data.m, 1))
    beta = np.zeros(data.p)
    xi = np.array([0.0])
    q_prev = -np.inf
    for _ in range(max_iter):
        beta, xi = _newton_pass(beta, xi, tau, data, max_halvings=30)
        q = _q_regression(beta, xi, tau[data.area_index], data)
        if abs(q - q_prev) < tol * (1.0 + abs(q)):
            break
        q_prev = q
    return beta, float(xi[0]), _q_regression(beta, xi, tau[data.area_index], data)


def _gauss_hermite_start(G: int, scale: float):
    nodes, weights = np.polynomial.hermite.hermgauss(G)
    return nodes * np.sqrt(2.0) * scale, weights / weights.sum()


def _starting_points(data, G, config):
    beta0, intercept, _ = homogeneous_logistic(data)
    nodes, masses = _gauss_hermite_start(G, config.perturb_scale)
    xi0 = intercept + nodes
    starts = [(beta0, xi0, masses)]
    if G > 1:
        rng = np.random.default_rng(config.rng_seed)
        for _ in range(config.n_random_starts):
            xi_r = xi0 + rng.normal(0.0, config.perturb_scale, size=G)
            pi_r = rng.dirichlet(np.ones(G))
            starts.append((beta0, xi_r, pi_r))
    return starts


def fit(
    data: SurveyData,
    G: int,
    config: EmConfig | None = None,
    compute_covariance: bool = True,
) -> FitResult:
    """Fit the G-component mixture by multi-start EM.

    One deterministic start (homogeneous logistic slopes; locations at
    scaled Gauss-Hermite nodes shifted by the homogeneous intercept; masses
    at renormalized Gauss-Hermite weights) plus ``n_random_starts`` perturbed
    starts. The converged run with the highest log-likelihood wins; ties go
    to the earlier start. Components whose mass falls below ``min_mass`` at
    convergence are dropped and the run is re-converged with fewer
    components, so the returned fit may have fewer than G components.
    """
    if config is None:
        config = EmConfig()
    if G < 1:
        raise DataError("G must be at least 1")
    if config.min_mass >= 1.0 / G:
        raise DataError("min_mass must be below 1/G")
    if not np.any(data.n_i > 0):
        raise DataError("at least one area must contain sampled units")

    best: _EmRun | None = None
    best_index = 0
    for index, (beta0, xi0, pi0) in enumerate(_starting_points(data, G, config)):
        run = _converge_with_dropping(np.asarray(beta0), np.asarray(xi0), np.asarray(pi0), data, config)
        if best is None or (run.converged and not best.converged) or (
            run.converged == best.converged and run.loglik > best.loglik
        ):
            best, best_index = run, index

    if not best.converged:
        warnings.warn(
            f"EM did not converge within {config.max_iter} iterations "
            f"(best relative change {best.final_rel_change:.3e})",
            RuntimeWarning,
            stacklevel=2,
        )

    params = MixtureParams(best.beta, best.xi, best.pi).canonical()
    tau, loglik = _posterior(params.beta, params.xi, params.pi, data)
    aic, bic = aic_bic(loglik, params.p, params.G, data.m)
    result = FitResult(
        params=params,
        area_ids=data.area_ids,
        tau=tau,
        loglik=loglik,
        aic=aic,
        bic=bic,
        converged=best.converged,
        n_iter=best.n_iter,
        final_rel_change=best.final_rel_change,
        start_index=best_index,
        em_trace=best.trace,
    )
    if compute_covariance:
        result = attach_covariance(result, data)
    return result


def attach_covariance(result: FitResult, data: SurveyData, method: str = "sandwich") -> FitResult:
    """Return a copy of ``result`` carrying the covariance of the estimates."""
    try:
        V = inference.covariance(result.params, data, method=method)
        return replace(result, covariance=V, covariance_method=method, covariance_error=None)
    except EstimationError as exc:
        warnings.warn(f"covariance unavailable: {exc}", RuntimeWarning, stacklevel=2)
        return replace(result, covariance=None, covariance_method=method, covariance_error=str(exc))


def select_G(
    data: SurveyData,
    g_min: int,
    g_max: int,
    config: EmConfig | None = None,
    criterion: str = "aic",
    compute_covariance: bool = True,
) -> FitResult:
    """Fit every G in [g_min, g_max] and return the best fit by AIC or BIC.

    Ties favor the smaller G. The covariance matrix is computed only for the
    winning fit.
    """
    if not 1 <= g_min <= g_max:
        raise DataError("need 1 <= g_min <= g_max")
    if criterion not in ("aic", "bic"):
        raise DataError(f"unknown criterion {criterion!r}")
    best = None
    best_value = np.inf
    for G in range(g_min, g_max + 1):
        candidate = fit(data, G, config, compute_covariance=False)
        value = candidate.aic if criterion == "aic" else candidate.bic
        if value < best_value:
            best, best_value = candidate, value
    if compute_covariance:
        best = attach_covariance(best, data)
    return best
