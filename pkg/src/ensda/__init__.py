"""Ensemble data assimilation: a training-free score-based filter, an
ensemble Kalman baseline, windowed forward models, and a twin-experiment
harness."""

from .data import (
    NormalizationStats,
    TrajectoryTable,
    compute_metrics,
    load_trajectory,
    log_minmax_apply,
    log_minmax_fit,
    log_minmax_invert,
    write_table,
)
from .diffusion import (
    DiffusionSchedule,
    Ensemble,
    MiniBatch,
    forward_diffuse,
    reverse_sde_sample,
    score_estimate,
    score_log_weights,
)
from .errors import (
    ConfigError,
    DataError,
    DivergenceError,
    ExternalModelError,
    ParseError,
)
from .filters import (
    FilterConfig,
    FilterState,
    enkf_step,
    ensf_step,
    linear_damping,
    open_loop_step,
    posterior_score,
    run_filter,
    state_estimate,
    warm_start,
)
from .models import (
    ExternalModel,
    ForwardModel,
    LinearModel,
    Lorenz96Model,
    SeasonalLoadModel,
    SeasonalLoadParams,
    external_propagate,
    linear_step,
    lorenz96_step,
    seasonal_load_step,
)
from .observation import (
    ObservationRecord,
    ObservationSpec,
    apply_operator,
    build_block_mask,
    likelihood_gradient,
    synthesize_observation,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DiffusionSchedule",
    "DivergenceError",
    "Ensemble",
    "ExternalModel",
    "ExternalModelError",
    "FilterConfig",
    "FilterState",
    "ForwardModel",
    "LinearModel",
    "Lorenz96Model",
    "MiniBatch",
    "NormalizationStats",
    "ObservationRecord",
    "ObservationSpec",
    "ParseError",
    "SeasonalLoadModel",
    "SeasonalLoadParams",
    "TrajectoryTable",
    "apply_operator",
    "build_block_mask",
    "compute_metrics",
    "enkf_step",
    "ensf_step",
    "external_propagate",
    "forward_diffuse",
    "likelihood_gradient",
    "linear_damping",
    "linear_step",
    "load_trajectory",
    "log_minmax_apply",
    "log_minmax_fit",
    "log_minmax_invert",
    "lorenz96_step",
    "open_loop_step",
    "posterior_score",
    "reverse_sde_sample",
    "run_filter",
    "score_estimate",
    "score_log_weights",
    "seasonal_load_step",
    "state_estimate",
    "synthesize_observation",
    "warm_start",
    "write_table",
]
