"""Simulation and analysis of category learning under interacting biases."""

from biaslearn.data import (
    DatasetSpec,
    Exemplar,
    ObservationSet,
    generate_exemplars,
    to_observations,
)
from biaslearn.experiment import (
    Condition,
    GridResult,
    classify_exemplar,
    default_conditions,
    default_fit_config,
    run_block_learning,
    run_grid,
    simulate_participants,
    summarize,
)
from biaslearn.model import (
    BiasClass,
    Hyperparams,
    JointTarget,
    LatentState,
    SingularCovarianceError,
    constrain,
    log_joint,
    unconstrain,
)
from biaslearn.sampler import PosteriorDraws, SamplerConfig, run_chains

__all__ = [
    "BiasClass",
    "Condition",
    "DatasetSpec",
    "Exemplar",
    "GridResult",
    "Hyperparams",
    "JointTarget",
    "LatentState",
    "ObservationSet",
    "PosteriorDraws",
    "SamplerConfig",
    "SingularCovarianceError",
    "classify_exemplar",
    "constrain",
    "default_conditions",
    "default_fit_config",
    "generate_exemplars",
    "log_joint",
    "run_block_learning",
    "run_chains",
    "run_grid",
    "simulate_participants",
    "summarize",
    "to_observations",
    "unconstrain",
]

__version__ = "0.1.0"
