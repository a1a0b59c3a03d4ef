"""Model-based simulation study: population generation, SRSWOR sampling,
replication loop, and evaluation metrics.

Each replication generates a binary population from a mixed logistic model
under one of two random-effect scenarios (Gaussian, or a two-point Gaussian
mixture), draws a without-replacement sample within every area, fits the
mixture model with the number of components selected by AIC, and evaluates
the competing predictors and MSE estimators against the realized area
proportions.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import baselines, mse as mse_mod
from .em import EmConfig, select_G
from .exceptions import DataError
from .model import AreaSample, PopulationCrossTab, SurveyData
from .predict import sp_ebp

__all__ = [
    "ScenarioConfig",
    "Population",
    "MetricsReport",
    "generate_population",
    "draw_srswor",
    "population_crosstabs",
    "run_study",
    "aggregate_metrics",
]

PREDICTORS = ("sp-ebp", "naive", "gaussian-ebp")
MSE_ESTIMATORS = ("plain", "star")


@dataclass(frozen=True)
class ScenarioConfig:
    """Design of one simulation study."""

    scenario: int = 1
    m: int = 100
    N_i: int = 100
    n_i: int = 10
    T: int = 200
    beta: float = 1.0
    sigma1: float = 0.5
    nu_prob: float = 0.7
    mu1: float = 0.0
    mu2: float = 3.0
    sigma2: float = 0.05
    rng_seed: int = 0

    def __post_init__(self):
        if self.scenario not in (1, 2):
            raise DataError("scenario must be 1 or 2")
        if self.n_i > self.N_i:
            raise DataError("n_i cannot exceed N_i")
        if self.T < 1:
            raise DataError("T must be at least 1")


def covariate_upper_bounds(m: int) -> np.ndarray:
    """Per-area upper bounds of the Unif(-1, b_i) covariate: b_i = i/8, i/16,
    i/48 for m = 100, 200, 500; the divisor scales with m otherwise."""
    divisors = {100: 8.0, 200: 16.0, 500: 48.0}
    divisor = divisors.get(m, 8.0 * m / 100.0)
    return np.arange(1, m + 1) / divisor


@dataclass(frozen=True)
class Population:
    """One generated finite population of m areas with N_i units each."""

    x: np.ndarray
    alpha: np.ndarray
    p: np.ndarray
    y: np.ndarray
    b: np.ndarray

    @property
    def m(self) -> int:
        return self.alpha.size

    @property
    def N_i(self) -> int:
        return self.x.shape[1]

    @property
    def true_p(self) -> np.ndarray:
        """Realized area-level mean success probability (the target)."""
        return self.p.mean(axis=1)


def generate_population(config: ScenarioConfig, rep_seed) -> Population:
    """Generate one population; bit-reproducible for a fixed seed.

    Scenario 1 draws the area intercepts from N(0, sigma1^2); scenario 2
    draws, independently per area, from N(mu1, sigma2^2) with probability
    nu_prob and from N(mu2, sigma2^2) otherwise (sigma2 is a standard
    deviation).
    """
    rng = np.random.default_rng(rep_seed)
    m, N = config.m, config.N_i
    if config.scenario == 1:
        alpha = rng.normal(0.0, config.sigma1, size=m)
    else:
        nu = rng.random(m) < config.nu_prob
        alpha = np.where(nu, config.mu1, config.mu2) + rng.normal(0.0, config.sigma2, size=m)
    b = covariate_upper_bounds(m)
    x = rng.uniform(-1.0, b[:, None], size=(m, N))
    p = expit(alpha[:, None] + x * config.beta)
    y = (rng.random((m, N)) < p).astype(float)
    return Population(x=x, alpha=alpha, p=p, y=y, b=b)


def draw_srswor(population: Population, n_i: int, seed: int) -> SurveyData:
    """Simple random sample without replacement of n_i units per area.

    Each area has its own seeded substream, so reordering areas does not
    change which units any area contributes.
    """
    if n_i > population.N_i:
        raise DataError("n_i cannot exceed N_i")
    areas = []
    for i in range(population.m):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, i]))
        idx = rng.choice(population.N_i, size=n_i, replace=False)
        areas.append(AreaSample(i, population.y[i, idx], population.x[i, idx, None]))
    return SurveyData(areas)


def population_crosstabs(population: Population) -> list[PopulationCrossTab]:
    """Unit-level cross-tabulations (every unit its own profile, count 1)."""
    ones = np.ones(population.N_i)
    return [
        PopulationCrossTab(i, population.x[i, :, None], ones)
        for i in range(population.m)
    ]


@dataclass(frozen=True)
class StudyOptions:
    """Estimation settings shared by every replication.

    The EM budget is deliberately generous: fits that stop at the iteration
    cap sit off the optimum, where the information matrix (and with it every
    covariance-based MSE quantity) is unreliable.
    """

    g_min: int = 2
    g_max: int = 5
    criterion: str = "aic"
    em: EmConfig = field(default_factory=lambda: EmConfig(n_random_starts=2, max_iter=10000))
    gauss_B: int = 2500
    n_quad: int = 15


@dataclass
class _RepOutcome:
    rep_index: int
    seconds: float
    error: str | None = None
    true_p: np.ndarray | None = None
    predictions: dict | None = None
    rmse_hat: dict | None = None
    g_selected: int = -1


def _rep_seeds(config: ScenarioConfig, rep_index: int):
    state = np.random.SeedSequence([config.rng_seed, rep_index]).generate_state(4)
    return tuple(int(s) for s in state)


def _run_replication(config, rep_index, predictors, estimators, opts) -> _RepOutcome:
    start = time.perf_counter()
    pop_seed, samp_seed, em_seed, mc_seed = _rep_seeds(config, rep_index)
    try:
        population = generate_population(config, pop_seed)
        sample = draw_srswor(population, config.n_i, samp_seed)
        tabs = population_crosstabs(population)
        need_mse = bool(estimators)
        em_cfg = replace(opts.em, rng_seed=em_seed)
        fit = select_G(
            sample,
            opts.g_min,
            opts.g_max,
            em_cfg,
            criterion=opts.criterion,
            compute_covariance=need_mse,
        )

        predictions = {}
        if "sp-ebp" in predictors:
            predictions["sp-ebp"] = np.array(
                [sp_ebp(fit, sample.area(t.area_id), t).p_hat for t in tabs]
            )
        if "naive" in predictors or "gaussian-ebp" in predictors:
            gfit = baselines.fit_gaussian(sample, n_quad=opts.n_quad)
            if "naive" in predictors:
                predictions["naive"] = np.array(
                    [baselines.naive_plugin(gfit, sample.area(t.area_id), t) for t in tabs]
                )
            if "gaussian-ebp" in predictors:
                predictions["gaussian-ebp"] = np.array(
                    [
                        baselines.gaussian_ebp(
                            gfit, sample.area(t.area_id), t, B=opts.gauss_B, seed=mc_seed
                        )
                        for t in tabs
                    ]
                )

        rmse_hat = {}
        if need_mse:
            report = mse_mod.mse_report(
                fit, sample, tabs, bias_correct="star" in estimators
            )
            if "plain" in estimators:
                rmse_hat["sp-ebp:plain"] = np.sqrt(report.mse_plain)
            if "star" in estimators:
                rmse_hat["sp-ebp:star"] = np.sqrt(report.mse_star)

        return _RepOutcome(
            rep_index=rep_index,
            seconds=time.perf_counter() - start,
            true_p=population.true_p,
            predictions=predictions,
            rmse_hat=rmse_hat,
            g_selected=fit.params.G,
        )
    except Exception as exc:  # a failed replication is recorded, not fatal
        return _RepOutcome(
            rep_index=rep_index,
            seconds=time.perf_counter() - start,
            error=f"{type(exc).__name__}: {exc}",
        )


def aggregate_metrics(true_p, predictions, rmse_hat, success):
    """Per-area metrics from stored per-replication results.

    ``true_p`` is (T, m); ``predictions`` maps predictor name to (T, m);
    ``rmse_hat`` maps "predictor:estimator" to (T, m); ``success`` is a (T,)
    boolean mask of usable replications.
    """
    success = np.asarray(success, dtype=bool)
    if not success.any():
        raise DataError("no successful replications to aggregate")
    bias, rmse, mae, r_ratio, coverage = {}, {}, {}, {}, {}
    for name, pred in predictions.items():
        err = pred[success] - true_p[success]
        bias[name] = err.mean(axis=0)
        rmse[name] = np.sqrt((err**2).mean(axis=0))
        mae[name] = np.abs(err).mean(axis=0)
    for key, est in rmse_hat.items():
        parent = key.split(":")[0]
        err = np.abs(predictions[parent][success] - true_p[success])
        with np.errstate(divide="ignore", invalid="ignore"):
            r_ratio[key] = est[success].mean(axis=0) / rmse[parent]
        coverage[key] = (err <= 1.96 * est[success]).mean(axis=0)
    return bias, rmse, mae, r_ratio, coverage


@dataclass(frozen=True)
class MetricsReport:
    """Aggregated study results with the raw per-replication arrays."""

    config: ScenarioConfig
    predictors: tuple
    mse_estimators: tuple
    bias: dict
    rmse: dict
    mae: dict
    r_ratio: dict
    coverage: dict
    g_selected: np.ndarray
    rep_seconds: np.ndarray
    failed_reps: tuple
    true_p: np.ndarray
    predictions: dict
    rmse_hat: dict
    success: np.ndarray

    @property
    def n_failed(self) -> int:
        return len(self.failed_reps)

    def g_frequencies(self) -> dict[int, float]:
        sel = self.g_selected[self.success]
        return {int(g): float((sel == g).mean()) for g in np.unique(sel)}

    def summary(self) -> dict:
        out = {"n_reps": int(self.success.sum()), "n_failed": self.n_failed,
               "g_frequencies": self.g_frequencies(),
               "mean_rep_seconds": float(self.rep_seconds[self.success].mean())}
        for name in self.predictors:
            out[name] = {
                "mean_bias": float(self.bias[name].mean()),
                "mean_rmse": float(self.rmse[name].mean()),
                "mean_mae": float(self.mae[name].mean()),
                "rmse_quartiles": [float(q) for q in np.percentile(self.rmse[name], [25, 50, 75])],
            }
        for key in self.rmse_hat:
            out[key] = {
                "mean_r_ratio": float(self.r_ratio[key].mean()),
                "mean_coverage": float(self.coverage[key].mean()),
            }
        return out


def run_study(
    config: ScenarioConfig,
    predictors=("sp-ebp",),
    mse_estimators=("plain", "star"),
    options: StudyOptions | None = None,
    n_workers: int | None = None,
) -> MetricsReport:
    """Run the full replication study and aggregate every metric.

    Replications execute in a process pool (``SPSAE_WORKERS`` or
    ``n_workers`` controls the width); per-replication seeds derive from
    (rng_seed, replication index) so results do not depend on scheduling.
    Failed replications are excluded and reported.
    """
    for name in predictors:
        if name not in PREDICTORS:
            raise DataError(f"unknown predictor {name!r}")
    for name in mse_estimators:
        if name not in MSE_ESTIMATORS:
            raise DataError(f"unknown MSE estimator {name!r}")
    if mse_estimators and "sp-ebp" not in predictors:
        raise DataError("MSE estimators require the sp-ebp predictor")
    opts = options or StudyOptions()

    if n_workers is None:
        n_workers = int(os.environ.get("SPSAE_WORKERS", os.cpu_count() or 1))
    outcomes: list[_RepOutcome | None] = [None] * config.T
    if n_workers > 1 and config.T > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            futures = [
                pool.submit(_run_replication, config, t, tuple(predictors), tuple(mse_estimators), opts)
                for t in range(config.T)
            ]
            for fut in futures:
                out = fut.result()
                outcomes[out.rep_index] = out
    else:
        for t in range(config.T):
            outcomes[t] = _run_replication(config, t, tuple(predictors), tuple(mse_estimators), opts)

    m, T = config.m, config.T
    true_p = np.full((T, m), np.nan)
    predictions = {name: np.full((T, m), np.nan) for name in predictors}
    est_keys = [f"sp-ebp:{e}" for e in mse_estimators]
    rmse_hat = {key: np.full((T, m), np.nan) for key in est_keys}
    g_selected = np.full(T, -1, dtype=int)
    rep_seconds = np.zeros(T)
    failed = []
    for out in outcomes:
        rep_seconds[out.rep_index] = out.seconds
        if out.error is not None:
            failed.append((out.rep_index, out.error))
            continue
        true_p[out.rep_index] = out.true_p
        for name in predictors:
            predictions[name][out.rep_index] = out.predictions[name]
        for key in est_keys:
            rmse_hat[key][out.rep_index] = out.rmse_hat[key]
        g_selected[out.rep_index] = out.g_selected
    success = g_selected >= 0

    bias, rmse, mae, r_ratio, coverage = aggregate_metrics(true_p, predictions, rmse_hat, success)
    return MetricsReport(
        config=config,
        predictors=tuple(predictors),
        mse_estimators=tuple(mse_estimators),
        bias=bias,
        rmse=rmse,
        mae=mae,
        r_ratio=r_ratio,
        coverage=coverage,
        g_selected=g_selected,
        rep_seconds=rep_seconds,
        failed_reps=tuple(failed),
        true_p=true_p,
        predictions=predictions,
        rmse_hat=rmse_hat,
        success=success,
    )
