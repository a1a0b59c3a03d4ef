"""Analytic mean squared error of the area predictions.

The MSE of an area prediction decomposes into a posterior-uncertainty part
(the d term, exact through the Poisson-Binomial law of the area's sampled
success count) and a parameter-uncertainty part (the e term, a quadratic
form of analytic prediction derivatives in the parameter covariance). A
second-order bias correction b = b1 + b2 makes the plug-in estimator
second-order unbiased; the corrected estimate is d + (e - b)/m.

All count sums run exactly over h = 0..n_i; nothing is truncated.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import inference
from .exceptions import DataError, EstimationError, SingularMatrixError
from .model import (
    AreaSample,
    FitResult,
    MixtureParams,
    PopulationCrossTab,
    SurveyData,
    log1pexp,
)

__all__ = [
    "PoissonBinomialPmf",
    "MseReport",
    "poisson_binomial",
    "marginal_count_pmf",
    "conditional_bp",
    "d_term",
    "bp_derivatives",
    "e_term",
    "bias_correction",
    "mse_star",
    "mse_report",
]

# Finite-difference steps: first derivatives of analytic quantities vs
# second-difference stencils (truncation/roundoff balance in float64).
_FD1 = 1e-5
_FD2 = 1e-4


@dataclass(frozen=True)
class PoissonBinomialPmf:
    """Distribution of the number of successes in independent, non-identical
    Bernoulli trials."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.min() < 0 or abs(probs.sum() - 1.0) > 1e-12:
            raise DataError("probability mass function must be nonnegative and sum to 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def n(self) -> int:
        return self.probs.size - 1


def poisson_binomial(p_vec) -> PoissonBinomialPmf:
    """Exact pmf of a sum of independent Bernoulli(p_j) variables.

    Dynamic-programming convolution, one trial at a time, O(n^2).
    """
    p_vec = np.asarray(p_vec, dtype=float)
    if p_vec.size and (p_vec.min() < 0 or p_vec.max() > 1):
        raise DataError("success probabilities must lie in [0, 1]")
    return PoissonBinomialPmf(_pb_columns(p_vec[:, None])[:, 0])


def _pb_columns(P: np.ndarray) -> np.ndarray:
    """Column-wise Poisson-Binomial pmfs: P is (n, G), result is (n+1, G)."""
    n, G = P.shape
    pmf = np.zeros((n + 1, G))
    pmf[0] = 1.0
    for j in range(n):
        pj = P[j]
        pmf[1:] = pmf[1:] * (1.0 - pj) + pmf[:-1] * pj
        pmf[0] *= 1.0 - pj
    return pmf


class _AreaWorkspace:
    """Per-area quantities entering the prediction and its MSE, evaluated at
    arbitrary parameter values (needed by the finite-difference loops)."""

    def __init__(self, area: AreaSample | None, crosstab: PopulationCrossTab):
        if crosstab.N_i == 0:
            raise DataError(f"area {crosstab.area_id!r}: population size is zero")
        self.area_id = crosstab.area_id
        self.Xs = area.X if area is not None else np.zeros((0, crosstab.X.shape[1]))
        self.y_count = float(area.y.sum()) if area is not None else 0.0
        self.n_i = self.Xs.shape[0]
        self.h_grid = np.arange(self.n_i + 1, dtype=float)
        self.Xp = crosstab.X
        self.counts = crosstab.counts
        self.N = crosstab.N_i

    def evaluate(self, params: MixtureParams):
        beta, xi, pi = params.beta, params.xi, params.pi
        eta_s = self.Xs @ beta[:, None] + xi[None, :] if self.n_i else np.zeros((0, xi.size))
        psamp = expit(eta_s)
        c = log1pexp(eta_s).sum(axis=0)
        eta_p = self.Xp @ beta[:, None] + xi[None, :]
        ppop = expit(eta_p)
        var_p = ppop * (1.0 - ppop)
        P = self.counts @ ppop / self.N
        logw = np.log(pi)[None, :] + xi[None, :] * self.h_grid[:, None] - c[None, :]
        logw -= logw.max(axis=1, keepdims=True)
        tau_h = np.exp(logw)
        tau_h /= tau_h.sum(axis=1, keepdims=True)
        return _Evaluated(
            psamp=psamp,
            P=P,
            v=self.counts @ var_p / self.N,
            u=self.Xp.T @ (self.counts[:, None] * var_p) / self.N,
            tau_h=tau_h,
            ptilde=tau_h @ P,
            pr=_pb_columns(psamp) @ pi,
        )


@dataclass
class _Evaluated:
    psamp: np.ndarray   # (n_i, G) sampled-unit success probabilities
    P: np.ndarray       # (G,) population mean probability per component
    v: np.ndarray       # (G,) population mean of p(1-p) per component
    u: np.ndarray       # (p, G) population mean of p(1-p) x per component
    tau_h: np.ndarray   # (n_i+1, G) posterior weights conditional on each count
    ptilde: np.ndarray  # (n_i+1,) prediction conditional on each count
    pr: np.ndarray      # (n_i+1,) marginal pmf of the sampled success count


def _params_of(fit_or_params) -> MixtureParams:
    if isinstance(fit_or_params, MixtureParams):
        return fit_or_params
    return fit_or_params.params


def marginal_count_pmf(fit, area: AreaSample | None) -> np.ndarray:
    """Marginal pmf of the area's sampled success count, mixing component-wise
    Poisson-Binomial laws with the prior masses. Degenerate at 0 when the
    area has no sampled units."""
    params = _params_of(fit)
    if area is None or area.n_i == 0:
        return np.ones(1)
    eta = area.X @ params.beta[:, None] + params.xi[None, :]
    return _pb_columns(expit(eta)) @ params.pi


def conditional_bp(fit, area: AreaSample | None, crosstab: PopulationCrossTab, h: int) -> float:
    """Best prediction of the area proportion conditional on observing ``h``
    sampled successes."""
    params = _params_of(fit)
    ws = _AreaWorkspace(area, crosstab)
    if not 0 <= h <= ws.n_i:
        raise DataError(f"h must lie in 0..{ws.n_i}")
    return float(ws.evaluate(params).ptilde[int(h)])


def d_term(fit, area: AreaSample | None, crosstab: PopulationCrossTab) -> float:
    """Posterior-uncertainty MSE component.

    Prior second moment of the component means minus the expected square of
    the count-conditional prediction. Evaluated through the law of total
    variance (expected posterior variance over the count distribution),
    which is the same quantity but stays nonnegative and is exactly zero for
    a single component.
    """
    params = _params_of(fit)
    ev = _AreaWorkspace(area, crosstab).evaluate(params)
    return _d_value(params, ev)


def _d_value(params: MixtureParams, ev: "_Evaluated") -> float:
    posterior_var = ev.tau_h @ ev.P**2 - ev.ptilde**2
    return float(posterior_var @ ev.pr)


def bp_derivatives(fit, area: AreaSample | None, crosstab: PopulationCrossTab, h: int) -> np.ndarray:
    """Analytic gradient of the count-conditional prediction at ``h`` with
    respect to the free parameters."""
    params = _params_of(fit)
    ws = _AreaWorkspace(area, crosstab)
    if not 0 <= h <= ws.n_i:
        raise DataError(f"h must lie in 0..{ws.n_i}")
    return _bp_gradients(params, ws)[int(h)]


def _bp_gradients(params: MixtureParams, ws: _AreaWorkspace) -> np.ndarray:
    """(n_i+1, K) analytic gradients of the count-conditional predictions."""
    ev = ws.evaluate(params)
    G = params.G
    tau_h, P, ptilde = ev.tau_h, ev.P, ev.ptilde
    S_xi = ws.h_grid[:, None] - ev.psamp.sum(axis=0)[None, :]          # (n+1, G)
    S_beta = -ws.Xs.T @ ev.psamp                                        # (p, G)

    d_xi = tau_h * (ev.v[None, :] + (P[None, :] - ptilde[:, None]) * S_xi)
    d_beta = (
        tau_h @ ev.u.T
        + (tau_h * P[None, :]) @ S_beta.T
        - ptilde[:, None] * (tau_h @ S_beta.T)
    )
    d_pi_full = tau_h / params.pi[None, :] * (P[None, :] - ptilde[:, None])
    d_pi = d_pi_full[:, : G - 1] - d_pi_full[:, G - 1 :]
    return np.concatenate([d_beta, d_xi, d_pi], axis=1)


def e_term(fit, area: AreaSample | None, crosstab: PopulationCrossTab, V: np.ndarray | None = None) -> float:
    """Parameter-uncertainty MSE component (already scaled by m).

    Expected quadratic form of the prediction gradient in m V, under the
    marginal count law. The per-area MSE contribution is this value / m.
    """
    params, V, m = _params_V_m(fit, V)
    ws = _AreaWorkspace(area, crosstab)
    grads = _bp_gradients(params, ws)
    ev = ws.evaluate(params)
    return float(m * np.einsum("hi,ij,hj,h->", grads, V, grads, ev.pr))


def _params_V_m(fit, V):
    if isinstance(fit, MixtureParams):
        raise DataError("a FitResult is required to scale the e term by the number of areas")
    if V is None:
        V = fit.covariance
    if V is None:
        raise EstimationError(
            "no parameter covariance available" + (f": {fit.covariance_error}" if fit.covariance_error else "")
        )
    return fit.params, np.asarray(V, dtype=float), fit.m


def _clipped_params(vec: np.ndarray, p: int, G: int) -> MixtureParams:
    beta = vec[:p]
    xi = vec[p : p + G]
    pi = np.concatenate([vec[p + G :], [1.0 - vec[p + G :].sum()]])
    return MixtureParams(beta, xi, np.clip(pi, 1e-12, None))


def _fd_gradient(func, phi0, steps):
    K = phi0.size
    grad = np.empty(K)
    for k in range(K):
        shift = np.zeros(K)
        shift[k] = steps[k]
        grad[k] = (func(phi0 + shift) - func(phi0 - shift)) / (2.0 * steps[k])
    return grad


def _fd_hessian(func, phi0, steps):
    K = phi0.size
    f0 = func(phi0)
    hess = np.empty((K, K))
    for a in range(K):
        ea = np.zeros(K)
        ea[a] = steps[a]
        hess[a, a] = (func(phi0 + ea) - 2.0 * f0 + func(phi0 - ea)) / steps[a] ** 2
        for b in range(a + 1, K):
            eb = np.zeros(K)
            eb[b] = steps[b]
            cross = (
                func(phi0 + ea + eb)
                - func(phi0 + ea - eb)
                - func(phi0 - ea + eb)
                + func(phi0 - ea - eb)
            ) / (4.0 * steps[a] * steps[b])
            hess[a, b] = hess[b, a] = cross
    return hess


def bias_correction(
    fit: FitResult,
    data: SurveyData,
    crosstabs,
    V: np.ndarray | None = None,
    information: str = "observed",
) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Second-order bias terms (b1_i, b2_i) for every area in ``crosstabs``.

    b2 is the half-trace of the Hessian of the d term against m V. b1 couples
    the d-term gradient with curvature of the score: an estimate of the
    expected information, the second derivatives of each score coordinate
    (nested differences of the analytic score), and the first derivatives of
    the information estimate. The expected information is estimated by the
    observed information by default; ``information="empirical"`` uses the sum
    of per-area score outer products instead, which is markedly noisier in
    weakly separated fits. Returns (None, None) with a warning when the
    information estimate is singular.
    """
    params, V, m = _params_V_m(fit, V)
    p, G, K = params.p, params.G, params.n_free
    phi0 = params.to_free()
    step1 = _FD1 * (1.0 + np.abs(phi0))
    step2 = _FD2 * (1.0 + np.abs(phi0))

    def score_at(vec):
        return inference.score(_clipped_params(vec, p, G), data)

    if information == "observed":
        def info_at(vec):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                return inference.oakes_information(_clipped_params(vec, p, G), data)
    elif information == "empirical":
        def info_at(vec):
            S = inference.per_area_scores(_clipped_params(vec, p, G), data)
            return S.T @ S
    else:
        raise DataError(f"unknown information estimate {information!r}")

    I_e = info_at(phi0)
    try:
        A = inference._solve_spd(I_e, f"{information} information")
    except SingularMatrixError as exc:
        warnings.warn(f"bias correction skipped: {exc}", RuntimeWarning, stacklevel=2)
        return None, None

    def score_jacobian(vec):
        jac = np.empty((K, K))
        for b in range(K):
            shift = np.zeros(K)
            shift[b] = step1[b]
            jac[:, b] = (score_at(vec + shift) - score_at(vec - shift)) / (2.0 * step1[b])
        return jac

    T = np.empty((K, K, K))  # T[k, a, b] = d2 S^k / d phi_a d phi_b
    for b in range(K):
        shift = np.zeros(K)
        shift[b] = step2[b]
        T[:, :, b] = (score_jacobian(phi0 + shift) - score_jacobian(phi0 - shift)) / (2.0 * step2[b])
    T = 0.5 * (T + np.swapaxes(T, 1, 2))

    D = np.empty((K, K, K))  # D[k, a, b] = d I_e[k, a] / d phi_b
    for b in range(K):
        shift = np.zeros(K)
        shift[b] = step1[b]
        D[:, :, b] = (info_at(phi0 + shift) - info_at(phi0 - shift)) / (2.0 * step1[b])

    u = np.einsum("ab,kba->k", A, T)
    v = np.einsum("ab,kba->k", A, D)
    w_global = 0.5 * m * (A @ (u - v))

    b1 = np.empty(len(crosstabs))
    b2 = np.empty(len(crosstabs))
    for idx, tab in enumerate(crosstabs):
        area = data.area(tab.area_id) if tab.area_id in data else None
        ws = _AreaWorkspace(area, tab)

        def d_at(vec):
            prm = _clipped_params(vec, p, G)
            ev = ws.evaluate(prm)
            return _d_value(prm, ev)

        grad_d = _fd_gradient(d_at, phi0, step1)
        hess_d = _fd_hessian(d_at, phi0, step2)
        b1[idx] = grad_d @ w_global
        b2[idx] = 0.5 * m * float(np.sum(hess_d * V))
    return b1, b2


def mse_star(
    fit: FitResult,
    area: AreaSample | None,
    crosstab: PopulationCrossTab,
    V: np.ndarray | None = None,
    bias: tuple[float, float] = (0.0, 0.0),
) -> float:
    """Bias-corrected MSE for one area: d + (e - b1 - b2)/m, floored when the
    estimated correction drives it negative."""
    params, V, m = _params_V_m(fit, V)
    d = d_term(fit, area, crosstab)
    e = e_term(fit, area, crosstab, V)
    star = d + (e - bias[0] - bias[1]) / m
    return _floor_star(star, d + e / m)[0]


def _floor_star(star: float, plain: float) -> tuple[float, bool]:
    if star < 0.0:
        return max(star, 0.25 * plain), True
    return star, False


@dataclass(frozen=True)
class MseReport:
    """Per-area MSE decomposition for a set of predicted areas.

    ``mse_plain`` is d + e/m; ``mse_star`` subtracts the estimated bias and
    is floored at a quarter of the plain value when negative (flagged in
    ``star_floored``). ``cv_percent`` is 100 sqrt(mse_star) / p_hat.
    """

    area_ids: tuple
    p_hat: np.ndarray
    d: np.ndarray
    e: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    mse_plain: np.ndarray
    mse_star: np.ndarray
    star_floored: np.ndarray
    cv_percent: np.ndarray
    bias_corrected: bool


def mse_report(
    fit: FitResult,
    data: SurveyData,
    crosstabs,
    V: np.ndarray | None = None,
    bias_correct: bool = True,
    information: str = "observed",
) -> MseReport:
    """Full MSE decomposition for every area in ``crosstabs``."""
    params, V, m = _params_V_m(fit, V)
    crosstabs = list(crosstabs)
    n_areas = len(crosstabs)
    d = np.empty(n_areas)
    e = np.empty(n_areas)
    p_hat = np.empty(n_areas)
    for idx, tab in enumerate(crosstabs):
        area = data.area(tab.area_id) if tab.area_id in data else None
        ws = _AreaWorkspace(area, tab)
        ev = ws.evaluate(params)
        grads = _bp_gradients(params, ws)
        d[idx] = _d_value(params, ev)
        e[idx] = float(m * np.einsum("hi,ij,hj,h->", grads, V, grads, ev.pr))
        p_hat[idx] = float(ev.ptilde[int(ws.y_count)])

    mse_plain = d + e / m
    if bias_correct:
        b1, b2 = bias_correction(fit, data, crosstabs, V, information=information)
        corrected = b1 is not None
    else:
        b1 = b2 = None
        corrected = False
    if corrected:
        raw = d + (e - b1 - b2) / m
        star = np.where(raw < 0.0, np.maximum(raw, 0.25 * mse_plain), raw)
        floored = raw < 0.0
    else:
        b1 = np.full(n_areas, np.nan)
        b2 = np.full(n_areas, np.nan)
        star = mse_plain.copy()
        floored = np.zeros(n_areas, dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        cv = 100.0 * np.sqrt(star) / p_hat
    return MseReport(
        area_ids=tuple(tab.area_id for tab in crosstabs),
        p_hat=p_hat,
        d=d,
        e=e,
        b1=b1,
        b2=b2,
        mse_plain=mse_plain,
        mse_star=star,
        star_floored=floored,
        cv_percent=cv,
        bias_corrected=corrected,
    )
