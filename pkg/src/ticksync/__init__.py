"""Passive tick-level wireless clock synchronization toolkit.

Simulate interval measurements for a master clock, three relay
transceivers, and a passive node; compute clock resolution bounds
(deterministic and hybrid); and run the online joint clock/position
estimator.
"""

from .model import (
    DEFAULT_ALPHA,
    SPEED_OF_LIGHT_M_PER_NS,
    ClockParams,
    EpochMode,
    MissingTransceiversError,
    NoiseConfig,
    PositionPrior,
    RangeModel,
    SceneConfig,
    SingularGeometryError,
    SystemMatrices,
    build_system_matrices,
    range_model,
)
from .sim import (
    EpochMeasurement,
    GroundTruth,
    InvalidTruthError,
    ModelViolationError,
    ScheduleViolationError,
    TickTrace,
    derive_rng,
    make_noise_schedule,
    noise_free_trace,
    simulate_campaign,
    simulate_epoch,
)
from .bounds import (
    BoundMap,
    BoundResult,
    InfoMatrix,
    NotIdentifiableError,
    accumulate_info,
    accumulated_fisher_info,
    bound_map,
    crb_clock,
    fisher_info,
    grid_points,
    hcrb_clock,
    zero_info,
)
from .estimator import (
    CombinerState,
    EpochEstimate,
    OnlineRecord,
    SolverOptions,
    cost_and_gradient,
    epoch_ml,
    line_search,
    profile_clock_and_noise,
    robust_sigma,
    run_online,
    update_combiner,
)
from .experiments import (
    ConfigError,
    ExperimentConfig,
    ResultTable,
    emit_results,
    parse_config,
    run_monte_carlo,
    serialize_config,
)

__version__ = "0.1.0"
