"""Online (renewable) estimation of average treatment effects from streaming batches."""

from .engine import (
    ConvergenceError,
    OnlineState,
    SingularityError,
    SolverOptions,
    ate_estimate,
    init_state,
    renew,
    run_stream,
    sandwich_variance,
    solve_offline,
)
from .model import DataBatch, Family, ModelSpec, Observation, OutcomeType, ParameterVector
from .scores import PositivityError, ScoreBundle, batch_bundle
from .sequential import Decision, MonitorConfig, MonitorState, Spending, compute_boundaries, monitor_step, wald_stat

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError",
    "DataBatch",
    "Decision",
    "Family",
    "ModelSpec",
    "MonitorConfig",
    "MonitorState",
    "Observation",
    "OnlineState",
    "OutcomeType",
    "ParameterVector",
    "PositivityError",
    "ScoreBundle",
    "SingularityError",
    "SolverOptions",
    "Spending",
    "ate_estimate",
    "batch_bundle",
    "compute_boundaries",
    "init_state",
    "monitor_step",
    "renew",
    "run_stream",
    "sandwich_variance",
    "solve_offline",
    "wald_stat",
]
