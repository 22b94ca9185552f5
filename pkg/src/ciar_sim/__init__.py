"""Desk-scale simulator for interval-gated cloud/device collaborative decoding."""

from .config import ConfigError, RunConfig, SweepGrid, apply_overrides, load_run_config, parse_run_config
from .decoder import (
    DEFAULT_RHO,
    DEFAULT_TAU,
    DecodeConfig,
    DecodeError,
    DecodeTrace,
    EpisodeEvent,
    EpisodeMetrics,
    ORIGIN_CLOUD_RESAMPLED,
    ORIGIN_CLOUD_VERIFIED,
    ORIGIN_DEVICE,
    ORIGIN_PREFIX,
    RollingQuantilePolicy,
    TraceRecord,
    metrics_from_trace,
    path_alignment_kl,
    run_baseline_cloud,
    run_baseline_device,
    run_ciar,
    run_fixed_split,
    run_uniform_verification,
)
from .intervals import (
    DEFAULT_FUSE_CONFIG,
    DEFAULT_RADIUS_CLAMP_MAX,
    FuseConfig,
    IntervalInvariantError,
    IntervalValidationError,
    LogitIntervalVec,
    ProbIntervalVec,
    UncertaintyBreakdown,
    breakdown_from_widths,
    ensemble_average,
    feasible_polytope_sample,
    inter_fuse,
    majority_vote,
    raw_prob_bounds,
    uncertainty_score,
    widths,
)
from .netsim import (
    ComputeModel,
    LatencyReport,
    NetworkConfigError,
    NetworkProfile,
    PayloadModel,
    builtin_profiles,
    episode_latency,
    t_comm,
)
from .properties import (
    PROPERTY_NAMES,
    PropertyResult,
    format_results,
    run_property_suite,
    suite_passed,
)
from .toy_models import (
    InterHeadParams,
    ModelParams,
    SceneSpec,
    TokenGrid,
    ToyModelError,
    build_analytic_head,
    cloud_logits,
    device_hidden,
    device_logits,
    generate_scene,
    inter_head_forward,
)
from .training import (
    InterDroConfig,
    LossBreakdown,
    TrainingBatch,
    TrainingDivergedError,
    TrainingError,
    analytic_gradient,
    bound_distributions,
    dro_loss,
    dro_weights,
    harvest_batches,
    inter_dro_loss,
    load_inter_head,
    mean_center_kl,
    save_inter_head,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ComputeModel",
    "ConfigError",
    "DEFAULT_FUSE_CONFIG",
    "DEFAULT_RADIUS_CLAMP_MAX",
    "DEFAULT_RHO",
    "DEFAULT_TAU",
    "DecodeConfig",
    "DecodeError",
    "DecodeTrace",
    "EpisodeEvent",
    "EpisodeMetrics",
    "FuseConfig",
    "InterDroConfig",
    "InterHeadParams",
    "IntervalInvariantError",
    "IntervalValidationError",
    "LatencyReport",
    "LogitIntervalVec",
    "LossBreakdown",
    "ModelParams",
    "NetworkConfigError",
    "NetworkProfile",
    "ORIGIN_CLOUD_RESAMPLED",
    "ORIGIN_CLOUD_VERIFIED",
    "ORIGIN_DEVICE",
    "ORIGIN_PREFIX",
    "PROPERTY_NAMES",
    "PayloadModel",
    "ProbIntervalVec",
    "PropertyResult",
    "RollingQuantilePolicy",
    "RunConfig",
    "SceneSpec",
    "SweepGrid",
    "TokenGrid",
    "ToyModelError",
    "TraceRecord",
    "TrainingBatch",
    "TrainingDivergedError",
    "TrainingError",
    "UncertaintyBreakdown",
    "analytic_gradient",
    "apply_overrides",
    "bound_distributions",
    "breakdown_from_widths",
    "build_analytic_head",
    "builtin_profiles",
    "cloud_logits",
    "device_hidden",
    "device_logits",
    "dro_loss",
    "dro_weights",
    "ensemble_average",
    "episode_latency",
    "feasible_polytope_sample",
    "format_results",
    "generate_scene",
    "harvest_batches",
    "inter_dro_loss",
    "inter_fuse",
    "inter_head_forward",
    "load_inter_head",
    "load_run_config",
    "majority_vote",
    "mean_center_kl",
    "metrics_from_trace",
    "parse_run_config",
    "path_alignment_kl",
    "raw_prob_bounds",
    "run_baseline_cloud",
    "run_baseline_device",
    "run_ciar",
    "run_fixed_split",
    "run_property_suite",
    "run_uniform_verification",
    "save_inter_head",
    "suite_passed",
    "t_comm",
    "train",
    "uncertainty_score",
    "widths",
    "__version__",
]
