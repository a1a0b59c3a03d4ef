"""Comparator predictors: Gaussian random-effects EBP and the naive plug-in.

The Gaussian model keeps the same fixed slopes but assumes the area
intercepts are N(mu, sigma^2); its likelihood is evaluated by fixed-node
Gauss-Hermite quadrature and maximized by a quasi-Newton optimizer with
numerical gradients. Its predictor averages plug-in proportions over
posterior-weighted Monte Carlo draws with antithetic pairing. The naive
predictor plugs a point estimate of each area intercept straight into the
population-averaged probability.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logsumexp

from .exceptions import DataError
from .model import (
    AreaSample,
    FitResult,
    MixtureParams,
    PopulationCrossTab,
    SurveyData,
    log1pexp,
    _posterior,
)
from .predict import posterior_mean_intercept

__all__ = ["GaussianFit", "fit_gaussian", "gaussian_ebp", "naive_plugin"]

_SIGMA_BOUNDARY = 1e-3


@dataclass(frozen=True)
class GaussianFit:
    """ML fit of the mixed logistic model with Gaussian random intercepts."""

    beta: np.ndarray
    mu: float
    sigma: float
    loglik: float
    aic: float
    n_quad: int
    boundary: bool = False

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        if self.sigma <= 0:
            raise DataError("sigma must be positive")


def _gauss_hermite(n_quad: int):
    nodes, weights = np.polynomial.hermite.hermgauss(n_quad)
    return nodes * np.sqrt(2.0), weights / weights.sum()


def _gaussian_loglik(theta, data: SurveyData, nodes, weights):
    p = data.p
    beta = theta[:p]
    mu = theta[p]
    sigma = np.exp(theta[p + 1])
    _, ll = _posterior(beta, mu + sigma * nodes, weights, data)
    return ll


def fit_gaussian(data: SurveyData, n_quad: int = 15, start_sigma: float = 0.5) -> GaussianFit:
    """Maximum likelihood for (beta, mu, sigma) by Gauss-Hermite quadrature.

    The quadrature nodes are fixed (not adaptive). sigma is optimized on the
    log scale; a fit that collapses to the boundary is returned as the
    homogeneous logistic fit with the boundary flag set.
    """
    if n_quad < 5:
        raise DataError("n_quad must be at least 5")
    from .em import homogeneous_logistic

    nodes, weights = _gauss_hermite(n_quad)
    beta0, intercept0, _ = homogeneous_logistic(data)
    theta0 = np.concatenate([beta0, [intercept0, np.log(start_sigma)]])
    result = minimize(
        lambda t: -_gaussian_loglik(t, data, nodes, weights),
        theta0,
        method="L-BFGS-B",
        options={"maxiter": 500},
    )
    theta = result.x
    p = data.p
    beta, mu, sigma = theta[:p], float(theta[p]), float(np.exp(theta[p + 1]))
    loglik = -float(result.fun)
    boundary = sigma < _SIGMA_BOUNDARY
    if boundary:
        beta, mu, homog_ll = homogeneous_logistic(data)
        loglik = homog_ll
    K = p + 2
    return GaussianFit(
        beta=beta,
        mu=float(mu),
        sigma=sigma,
        loglik=loglik,
        aic=-2.0 * loglik + 2.0 * K,
        n_quad=n_quad,
        boundary=boundary,
    )


def _area_rng(seed: int, area_id) -> np.random.Generator:
    key = zlib.crc32(repr(area_id).encode())
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, key]))


def gaussian_ebp(
    gfit: GaussianFit,
    area: AreaSample | None,
    crosstab: PopulationCrossTab,
    B: int = 2500,
    seed: int = 0,
    antithetic: bool = True,
) -> float:
    """Monte Carlo EBP of an area proportion under the Gaussian fit.

    Draws B random intercepts (plus their antithetic mirror images),
    weights each by the likelihood of the area's sample, computed in log
    space, and returns the self-normalized weighted mean of the plug-in
    proportions. Per-area substreams keyed by (seed, area_id) make the result
    reproducible regardless of evaluation order.
    """
    if B < 1:
        raise DataError("B must be at least 1")
    rng = _area_rng(seed, crosstab.area_id)
    if antithetic:
        z = rng.standard_normal(B)
        alphas = gfit.sigma * np.concatenate([z, -z])
    else:
        alphas = gfit.sigma * rng.standard_normal(2 * B)

    base_pop = gfit.mu + crosstab.X @ gfit.beta
    p_draw = expit(alphas[:, None] + base_pop[None, :]) @ crosstab.counts / crosstab.N_i

    if area is None or area.n_i == 0:
        return float(p_draw.mean())
    eta = alphas[:, None] + (gfit.mu + area.X @ gfit.beta)[None, :]
    logw = eta @ area.y - log1pexp(eta).sum(axis=1)
    logw -= logsumexp(logw)
    return float(np.exp(logw) @ p_draw)


def _gaussian_posterior_mode(gfit: GaussianFit, area: AreaSample) -> float:
    """Mode of the random-intercept posterior for one area (1-D Newton)."""
    base = gfit.mu + area.X @ gfit.beta
    inv_var = 1.0 / gfit.sigma**2
    alpha = 0.0
    for _ in range(100):
        prob = expit(base + alpha)
        grad = float((area.y - prob).sum()) - alpha * inv_var
        hess = -float((prob * (1.0 - prob)).sum()) - inv_var
        step = grad / hess
        alpha -= step
        if abs(step) < 1e-12:
            break
    return alpha


def naive_plugin(fit, area: AreaSample | None, crosstab: PopulationCrossTab) -> float:
    """Plug-in predictor: population mean of expit at a point estimate of the
    area intercept.

    Under a mixture fit the intercept estimate is the mean location plus the
    centered posterior-mean intercept; under a Gaussian fit it is mu plus the
    posterior mode. Out-of-sample areas use a zero random effect.
    """
    if isinstance(fit, GaussianFit):
        alpha = 0.0 if area is None or area.n_i == 0 else _gaussian_posterior_mode(fit, area)
        eta = alpha + gfit_base(fit, crosstab)
        return float(expit(eta) @ crosstab.counts / crosstab.N_i)
    params = fit.params if isinstance(fit, FitResult) else fit
    if not isinstance(params, MixtureParams):
        raise DataError("naive_plugin expects a mixture fit or a Gaussian fit")
    alpha = 0.0 if area is None or area.n_i == 0 else posterior_mean_intercept(params, area)
    eta = params.mean_intercept() + alpha + crosstab.X @ params.beta
    return float(expit(eta) @ crosstab.counts / crosstab.N_i)


def gfit_base(gfit: GaussianFit, crosstab: PopulationCrossTab) -> np.ndarray:
    return gfit.mu + crosstab.X @ gfit.beta
