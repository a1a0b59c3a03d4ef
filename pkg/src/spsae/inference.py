"""Score, information, and covariance of the fitted mixture parameters.

The free-parameter chart stacks (beta, xi_1..xi_G, pi_1..pi_{G-1}) with
pi_G = 1 - sum of the free masses. The observed information comes from
Oakes' identity: the analytic expected complete-data Hessian plus the
derivative of the surrogate score with respect to the conditioning
estimate, the latter obtained numerically. The default covariance is the
sandwich J^{-1} (sum_i S_i S_i') J^{-1}; the plain inverse information is
available via ``method="observed"``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .exceptions import EstimationError, SingularMatrixError
from .model import MixtureParams, SurveyData, _posterior

__all__ = [
    "score",
    "per_area_scores",
    "oakes_information",
    "sandwich_covariance",
    "covariance",
    "InformationMatrices",
]

MAX_CONDITION_NUMBER = 1e12


@dataclass(frozen=True)
class InformationMatrices:
    """Observed information, outer-product-of-scores, and the sandwich."""

    J_oakes: np.ndarray
    V_star: np.ndarray
    V_sandwich: np.ndarray


def _check_interior(params: MixtureParams):
    if np.any(params.pi <= 0):
        raise EstimationError("score is undefined on the boundary pi_g = 0")


def per_area_scores(params: MixtureParams, data: SurveyData) -> np.ndarray:
    """m x K matrix of per-area contributions to the observed-data score."""
    _check_interior(params)
    tau, _ = _posterior(params.beta, params.xi, params.pi, data)
    return _per_area_scores_given_tau(params, data, tau)


def _per_area_scores_given_tau(params, data, tau):
    p, G = params.p, params.G
    pi = params.pi
    eta = (data.X @ params.beta)[:, None] + params.xi[None, :]
    resid = tau[data.area_index] * (data.y[:, None] - expit(eta))
    s_xi = data.segment_sum(resid)
    s_beta = data.segment_sum(resid.sum(axis=1)[:, None] * data.X)
    s_pi = tau[:, : G - 1] / pi[: G - 1] - (tau[:, G - 1] / pi[G - 1])[:, None]
    return np.concatenate([s_beta, s_xi, s_pi], axis=1)


def score(params: MixtureParams, data: SurveyData) -> np.ndarray:
    """Exact gradient of the observed log-likelihood at ``params``.

    By Fisher's identity this equals the gradient of the EM surrogate
    evaluated at its own conditioning point.
    """
    return per_area_scores(params, data).sum(axis=0)


def _q_score(params: MixtureParams, tau: np.ndarray, data: SurveyData) -> np.ndarray:
    """Gradient of the EM surrogate at ``params`` with posterior weights fixed."""
    return _per_area_scores_given_tau(params, data, tau).sum(axis=0)


def expected_complete_hessian(params: MixtureParams, data: SurveyData, tau: np.ndarray) -> np.ndarray:
    """Analytic Hessian of the EM surrogate in the free-parameter chart.

    Blocks coupling the masses with (beta, xi), and distinct locations with
    each other, are identically zero.
    """
    p, G = params.p, params.G
    K = params.n_free
    pi = params.pi
    tau_units = tau[data.area_index]
    eta = (data.X @ params.beta)[:, None] + params.xi[None, :]
    prob = expit(eta)
    w = tau_units * prob * (1.0 - prob)
    H = np.zeros((K, K))
    H[:p, :p] = -data.X.T @ (data.X * w.sum(axis=1)[:, None])
    H[:p, p : p + G] = -data.X.T @ w
    H[p : p + G, :p] = H[:p, p : p + G].T
    H[p : p + G, p : p + G] = -np.diag(w.sum(axis=0))
    if G > 1:
        col = tau.sum(axis=0)
        block = np.full((G - 1, G - 1), -col[G - 1] / pi[G - 1] ** 2)
        block -= np.diag(col[: G - 1] / pi[: G - 1] ** 2)
        H[p + G :, p + G :] = block
    return H


def oakes_information(params: MixtureParams, data: SurveyData) -> np.ndarray:
    """Observed information via Oakes' identity, symmetrized.

    The cross term (derivative of the surrogate score in the conditioning
    estimate) is computed by central differences with per-coordinate step
    max(1e-5, 1e-5 |theta_k|).
    """
    _check_interior(params)
    p, G = params.p, params.G
    K = params.n_free
    tau_hat, _ = _posterior(params.beta, params.xi, params.pi, data)
    term1 = expected_complete_hessian(params, data, tau_hat)

    phi = params.to_free()
    term2 = np.empty((K, K))
    pi_G = params.pi[-1]
    for b in range(K):
        h = max(1e-5, 1e-5 * abs(phi[b]))
        if b >= p + G:
            # keep the perturbed masses strictly inside the simplex
            h = min(h, 0.5 * min(phi[b], pi_G))
        shift = np.zeros(K)
        shift[b] = h
        tau_plus, _ = _posterior(*_unpack(phi + shift, p, G), data)
        tau_minus, _ = _posterior(*_unpack(phi - shift, p, G), data)
        q_plus = _q_score(params, tau_plus, data)
        q_minus = _q_score(params, tau_minus, data)
        term2[:, b] = (q_plus - q_minus) / (2.0 * h)

    J = -(term1 + term2)
    J = 0.5 * (J + J.T)
    if np.linalg.eigvalsh(J).min() <= 0:
        warnings.warn(
            "observed information is not positive definite; the parameters may be "
            "on the boundary or not converged",
            RuntimeWarning,
            stacklevel=2,
        )
    return J


def _unpack(vec, p, G):
    beta = vec[:p]
    xi = vec[p : p + G]
    pi_head = vec[p + G :]
    pi = np.concatenate([pi_head, [1.0 - pi_head.sum()]])
    return beta, xi, pi


def _solve_spd(matrix: np.ndarray, what: str) -> np.ndarray:
    eigvals, eigvecs = np.linalg.eigh(matrix)
    magnitude = np.abs(eigvals)
    if magnitude.min() == 0 or magnitude.max() / magnitude.min() > MAX_CONDITION_NUMBER:
        cond = np.inf if magnitude.min() == 0 else magnitude.max() / magnitude.min()
        raise SingularMatrixError(f"{what} is singular or ill-conditioned", cond)
    return (eigvecs / eigvals) @ eigvecs.T


def sandwich_covariance(J: np.ndarray, area_scores: np.ndarray) -> np.ndarray:
    """Sandwich covariance J^{-1} (sum_i S_i S_i') J^{-1}."""
    J_inv = _solve_spd(np.asarray(J, dtype=float), "observed information")
    V_star = area_scores.T @ area_scores
    V = J_inv @ V_star @ J_inv
    return 0.5 * (V + V.T)


def information_matrices(params: MixtureParams, data: SurveyData) -> InformationMatrices:
    J = oakes_information(params, data)
    S = per_area_scores(params, data)
    return InformationMatrices(J_oakes=J, V_star=S.T @ S, V_sandwich=sandwich_covariance(J, S))


def covariance(params: MixtureParams, data: SurveyData, method: str = "sandwich") -> np.ndarray:
    """K x K covariance of the free parameter estimates."""
    if method == "sandwich":
        J = oakes_information(params, data)
        return sandwich_covariance(J, per_area_scores(params, data))
    if method == "observed":
        J = oakes_information(params, data)
        return _solve_spd(J, "observed information")
    raise EstimationError(f"unknown covariance method {method!r}")
