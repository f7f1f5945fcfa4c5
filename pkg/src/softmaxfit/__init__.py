"""Estimation of softmax choice models with linear objectives.

Includes a stochastic UCL bandit simulator and the linearization that turns
its choices into data the softmax estimator can fit.
"""

from .bandit import (
    BanditEnv,
    BeliefState,
    EpisodeLog,
    UclParams,
    belief_update,
    build_spatial_prior,
    cumulative_regret,
    run_episode,
    select_arm,
    ucl_heuristic,
)
from .estimator import (
    ConfidenceInterval,
    FitResult,
    IdentificationReport,
    check_identification,
    confidence_intervals,
    fit_map,
    fit_ml,
    pool_fits,
    welch_t_test,
)
from .linearize import (
    LinearizationPoint,
    UclEstimate,
    UclFeatureDataset,
    delta_bounds,
    fit_population,
    fit_ucl,
    linearize_episode,
)
from .model import (
    ChoiceDataset,
    PriorSpec,
    build_softmax_features,
    choice_probabilities,
    gaussian_prior,
    log_likelihood,
    log_likelihood_gradient,
    log_likelihood_hessian,
)

__version__ = "0.1.0"
