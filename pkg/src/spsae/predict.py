"""Area-level predictions of proportions from a fitted mixture model.

The predictor of an area's proportion is the posterior expectation, over
mixture components, of the population-averaged success probability: the
component population means weighted by the area's posterior weights. For
areas without sampled units the posterior weights fall back to the prior
masses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.special import expit, logsumexp

from .exceptions import DataError
from .model import AreaSample, FitResult, MixtureParams, PopulationCrossTab, log1pexp

__all__ = [
    "AreaPrediction",
    "component_population_means",
    "sp_ebp",
    "posterior_mean_intercept",
    "predict_areas",
]


@dataclass(frozen=True)
class AreaPrediction:
    """Prediction for one area.

    ``p_hat`` is the convex combination of the per-component population means
    ``component_means`` with weights ``tau_i``; ``alpha_hat`` is the centered
    posterior-mean random intercept.
    """

    area_id: Any
    p_hat: float
    component_means: np.ndarray
    tau_i: np.ndarray
    alpha_hat: float
    out_of_sample: bool = False


def component_population_means(params_or_fit, crosstab: PopulationCrossTab) -> np.ndarray:
    """Population-averaged success probability per component (length G)."""
    params = _params_of(params_or_fit)
    if crosstab.N_i == 0:
        raise DataError(f"area {crosstab.area_id!r}: population size is zero")
    if crosstab.X.shape[1] != params.p:
        raise DataError(f"area {crosstab.area_id!r}: crosstab covariate width mismatch")
    eta = (crosstab.X @ params.beta)[:, None] + params.xi[None, :]
    return crosstab.counts @ expit(eta) / crosstab.N_i


def posterior_weights(params: MixtureParams, area: AreaSample | None) -> np.ndarray:
    """Posterior component weights from one area's sample (prior if empty)."""
    if area is None or area.n_i == 0:
        return params.pi.copy()
    eta = (area.X @ params.beta)[:, None] + params.xi[None, :]
    logw = np.log(params.pi) + area.y @ eta - log1pexp(eta).sum(axis=0)
    return np.exp(logw - logsumexp(logw))


def sp_ebp(
    fit: FitResult | MixtureParams,
    area_sample: AreaSample | None,
    crosstab: PopulationCrossTab,
) -> AreaPrediction:
    """Predict one area's proportion from its sample and population cross-tab.

    With no sampled units the prediction is the prior expectation of the
    component means and the area is flagged out-of-sample.
    """
    params = _params_of(fit)
    p_components = component_population_means(params, crosstab)
    tau_i = posterior_weights(params, area_sample)
    out = area_sample is None or area_sample.n_i == 0
    return AreaPrediction(
        area_id=crosstab.area_id,
        p_hat=float(p_components @ tau_i),
        component_means=p_components,
        tau_i=tau_i,
        alpha_hat=float((params.xi - params.mean_intercept()) @ tau_i),
        out_of_sample=out,
    )


def posterior_mean_intercept(fit: FitResult | MixtureParams, area: AreaSample | None) -> float:
    """Centered posterior mean of the area's random intercept.

    Equals sum_g (xi_g - mean intercept) tau_ig, so it is zero when the
    posterior weights coincide with the prior masses.
    """
    params = _params_of(fit)
    tau_i = posterior_weights(params, area)
    return float((params.xi - params.mean_intercept()) @ tau_i)


def predict_areas(
    fit: FitResult,
    crosstabs: Sequence[PopulationCrossTab] | Mapping[Any, PopulationCrossTab],
    data=None,
) -> list[AreaPrediction]:
    """Predict every area present in ``crosstabs``.

    Sampled areas are matched by area_id against ``data`` (a SurveyData) when
    given, else against the fitted sample via the stored posterior weights.
    """
    if isinstance(crosstabs, Mapping):
        crosstabs = list(crosstabs.values())
    predictions = []
    for tab in crosstabs:
        if data is not None and tab.area_id in data:
            predictions.append(sp_ebp(fit, data.area(tab.area_id), tab))
        elif data is None and tab.area_id in fit.area_ids:
            params = fit.params
            p_components = component_population_means(params, tab)
            tau_i = fit.tau_for(tab.area_id)
            predictions.append(
                AreaPrediction(
                    area_id=tab.area_id,
                    p_hat=float(p_components @ tau_i),
                    component_means=p_components,
                    tau_i=tau_i,
                    alpha_hat=float((params.xi - params.mean_intercept()) @ tau_i),
                    out_of_sample=False,
                )
            )
        else:
            predictions.append(sp_ebp(fit, None, tab))
    return predictions


def _params_of(fit_or_params) -> MixtureParams:
    if isinstance(fit_or_params, MixtureParams):
        return fit_or_params
    return fit_or_params.params
