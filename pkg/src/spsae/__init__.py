"""Semi-parametric small area estimation of proportions.

Fits finite-mixture mixed logistic models to unit-level survey data by EM,
predicts small-area proportions from population cross-tabulations, and
attaches analytic, second-order bias-corrected MSE estimates. Includes
Gaussian-random-effect and plug-in baselines plus a replication study
harness.
"""

from ._version import __version__
from .baselines import GaussianFit, fit_gaussian, gaussian_ebp, naive_plugin
from .em import EmConfig, e_step, fit, m_step_masses, m_step_regression, select_G
from .exceptions import DataError, EstimationError, SingularMatrixError, SpsaeError
from .inference import (
    InformationMatrices,
    covariance,
    oakes_information,
    per_area_scores,
    sandwich_covariance,
    score,
)
from .io import (
    CovariateCoding,
    direct_estimates,
    load_crosstab,
    load_sample,
    read_fit,
    wald_gof,
    write_fit,
)
from .model import (
    AreaSample,
    FitResult,
    MixtureParams,
    PopulationCrossTab,
    SurveyData,
    UnitRecord,
    aic_bic,
    area_component_loglik,
    linear_predictor,
    observed_loglik,
)
from .mse import (
    MseReport,
    PoissonBinomialPmf,
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
from .predict import (
    AreaPrediction,
    component_population_means,
    posterior_mean_intercept,
    predict_areas,
    sp_ebp,
)
from .simulate import (
    MetricsReport,
    Population,
    ScenarioConfig,
    StudyOptions,
    draw_srswor,
    generate_population,
    population_crosstabs,
    run_study,
)

__all__ = [name for name in dir() if not name.startswith("_")]
