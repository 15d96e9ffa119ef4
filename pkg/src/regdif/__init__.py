"""Regularized DIF analysis: penalized EM estimation of covariate-moderated
item response models, decorrelated score tests, and one-step debiased
estimates, plus a Monte Carlo study engine and a CLI.
"""

from . import _env  # noqa: F401  (must precede the first numpy import)
from .model import (
    Dataset,
    ItemParams,
    NumericalError,
    ParamVector,
    PopulationParams,
    QuadratureGrid,
    SingularInformationError,
    all_dif_mask,
    build_quadrature,
    coordinate_names,
    dif_indices,
    flat_dim,
    irf_probability,
    item_slice,
    latent_moments,
    marginal_loglik,
    observed_information,
    population_indices,
    score_vector,
)
from .em import (
    EmConfig,
    FitResult,
    PenaltyConfig,
    default_start,
    m_step_item,
    m_step_population,
    penalized_em_fit,
    polish_ml_fit,
    posterior_weights,
    select_lambda,
    soft_threshold,
)
from .inference import (
    DebiasReport,
    DscoreReport,
    FocalSpec,
    InferenceContext,
    WaldReport,
    decorrelated_score,
    dscore_test,
    efficient_information,
    estimate_w,
    estimate_w_from_information,
    estimate_w_from_rows,
    one_step_debias,
    wald_test_from_fit,
    wald_test_oracle,
)

__version__ = "0.1.0"
