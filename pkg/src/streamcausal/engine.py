"""Renewable estimating-equation engine.

The state after ``b`` batches is the tuple ``(theta_b, S_b, M_b, N_b, b)``:
the current estimate, the accumulated sensitivity matrices (each evaluated at
the estimate obtained right after its batch was absorbed), the accumulated
score outer products, the running sample size and the batch count.  A new
batch is absorbed by solving

    S_{b-1} (theta_{b-1} - theta) + U_b(D_b; theta) = 0

with Newton-Raphson started at ``theta_{b-1}``.  Nothing but the state and
the new batch is ever read.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .model import DataBatch, Family, ModelError, ModelSpec, OutcomeType, ParameterVector, concat_batches, expit
from .scores import POSITIVITY_EPS, PositivityError, ScoreBundle, evaluate

logger = logging.getLogger(__name__)

COND_WARN = 1e10
COND_SINGULAR = 1e14


class EngineError(RuntimeError):
    pass


class SingularityError(EngineError):
    pass


class ConvergenceError(EngineError):
    def __init__(self, message: str, last_iterate: np.ndarray, residual_norm: float):
        super().__init__(f"{message} (residual max-norm {residual_norm:.3e})")
        self.last_iterate = last_iterate
        self.residual_norm = residual_norm


class IllConditionedWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 50
    restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.restarts < 0:
            raise ValueError("restarts must be non-negative")


@dataclass(frozen=True, eq=False)
class OnlineState:
    spec: ModelSpec
    theta: np.ndarray
    s_cum: np.ndarray
    m_cum: np.ndarray
    n_total: int
    batch_count: int
    iterations: int = field(default=0, compare=False)

    def __post_init__(self):
        d = self.spec.dim
        theta = np.array(self.theta, dtype=float)
        s = np.array(self.s_cum, dtype=float)
        m = np.array(self.m_cum, dtype=float)
        if theta.shape != (d,) or s.shape != (d, d) or m.shape != (d, d):
            raise ModelError("state arrays do not match the model dimension")
        for arr in (theta, s, m):
            arr.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "s_cum", s)
        object.__setattr__(self, "m_cum", m)

    @classmethod
    def _owned(cls, spec, theta, s_cum, m_cum, n_total, batch_count, iterations=0) -> "OnlineState":
        # arrays are fresh and private to the new state: freeze them without copying
        state = object.__new__(cls)
        for name, value in (("spec", spec), ("theta", theta), ("s_cum", s_cum), ("m_cum", m_cum),
                            ("n_total", n_total), ("batch_count", batch_count), ("iterations", iterations)):
            if isinstance(value, np.ndarray):
                value.setflags(write=False)
            object.__setattr__(state, name, value)
        return state

    @property
    def parameters(self) -> ParameterVector:
        return ParameterVector(self.spec, self.theta)

    @property
    def delta(self) -> float:
        return float(self.theta[-1])

    def condition_number(self) -> float:
        return float(np.linalg.cond(self.s_cum))


def _solve(mat: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    try:
        step = np.linalg.solve(mat, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularityError(f"{what} is singular") from exc
    if not np.all(np.isfinite(step)):
        raise SingularityError(f"{what} is singular")
    return step


def _check_conditioning(mat: np.ndarray, what: str) -> float:
    cond = float(np.linalg.cond(mat))
    if not math.isfinite(cond) or cond > COND_SINGULAR:
        raise SingularityError(f"{what} is numerically singular (condition number {cond:.3g})")
    if cond > COND_WARN:
        warnings.warn(f"{what} is ill-conditioned (condition number {cond:.3g})", IllConditionedWarning, stacklevel=3)
    return cond


def _check_treatment_variation(batch: DataBatch, spec: ModelSpec) -> None:
    if np.all(batch.a == batch.a[0]):
        raise SingularityError(
            f"batch {batch.batch_index}: every subject has a={int(batch.a[0])}; "
            "the treatment arm is degenerate and the information matrix is singular"
        )


def _newton_pooled(batch: DataBatch, spec: ModelSpec, start: np.ndarray, opts: SolverOptions):
    theta = start.copy()
    step_norm = math.inf
    for it in range(1, opts.max_iter + 1):
        bundle = evaluate(batch, theta, spec, with_m=False)
        if it == 1:
            _check_conditioning(bundle.s, "sensitivity matrix")
        step = _solve(bundle.s, bundle.u, "sensitivity matrix")
        theta = theta + step
        step_norm = float(np.max(np.abs(step)))
        if step_norm < opts.tol:
            return theta, it
    raise ConvergenceError(f"Newton-Raphson did not converge in {opts.max_iter} iterations", theta, step_norm)


def _solve_pooled(batch: DataBatch, spec: ModelSpec, opts: SolverOptions):
    """Solve ``sum_i U(O_i; theta) = 0`` from zero, with seeded restarts on failure."""
    rng = np.random.default_rng(opts.seed)
    start = spec.zeros()
    last_exc: Exception | None = None
    for attempt in range(opts.restarts + 1):
        try:
            return _newton_pooled(batch, spec, start, opts)
        except (ConvergenceError, PositivityError) as exc:
            last_exc = exc
            logger.debug("initial solve attempt %d failed: %s", attempt, exc)
            start = rng.normal(scale=0.5, size=spec.dim)
    assert last_exc is not None
    raise last_exc


def init_state(batch1: DataBatch, spec: ModelSpec, opts: SolverOptions = SolverOptions()) -> OnlineState:
    """Solve the first batch's estimating equation and seed the renewable state."""
    if batch1.p != spec.p:
        raise ModelError(f"batch has p={batch1.p}, model expects p={spec.p}")
    if batch1.n <= spec.dim:
        warnings.warn(
            f"first batch has n={batch1.n} <= d={spec.dim}; the sensitivity matrix is likely singular",
            UserWarning,
            stacklevel=2,
        )
    _check_treatment_variation(batch1, spec)
    theta, iters = _solve_pooled(batch1, spec, opts)
    bundle = evaluate(batch1, theta, spec)
    _check_conditioning(bundle.s, "sensitivity matrix")
    return OnlineState(spec, theta, bundle.s, bundle.m, batch1.n, 1, iters)


_FAMILY_CODE = {Family.GCOMP: _kernels.GCOMP, Family.IPTW: _kernels.IPTW, Family.AIPTW: _kernels.AIPTW}


def renew(state: OnlineState, batch: DataBatch, opts: SolverOptions = SolverOptions()) -> OnlineState:
    """Absorb one batch into the state; prior batches are never touched."""
    spec = state.spec
    if batch.p != spec.p:
        raise ModelError(f"batch {batch.batch_index} has p={batch.p}, model expects p={spec.p}")
    try:
        status, detail, it, step_norm, theta, s_b, m_b = _kernels.renew_batch(
            _FAMILY_CODE[spec.family],
            spec.outcome_type is OutcomeType.BINARY,
            batch.x,
            batch.a,
            batch.y,
            state.theta,
            state.s_cum,
            POSITIVITY_EPS,
            opts.tol,
            opts.max_iter,
        )
    except np.linalg.LinAlgError as exc:
        raise SingularityError(f"combined sensitivity matrix for batch {batch.batch_index} is singular") from exc
    if status == _kernels.POSITIVITY:
        e = float(expit(batch.x[detail] @ theta[spec.alpha_slice]))
        raise PositivityError(batch.batch_index, int(detail), e)
    if status == _kernels.NO_CONVERGENCE:
        raise ConvergenceError(
            f"online update for batch {batch.batch_index} did not converge in {opts.max_iter} iterations",
            theta,
            step_norm,
        )
    if status == _kernels.SINGULAR:
        raise SingularityError(f"combined sensitivity matrix for batch {batch.batch_index} is singular")
    if status == _kernels.NON_FINITE:
        raise ModelError(f"non-finite score or sensitivity in batch {batch.batch_index}")
    return OnlineState._owned(
        spec,
        theta,
        state.s_cum + s_b,
        state.m_cum + m_b,
        state.n_total + batch.n,
        state.batch_count + 1,
        int(it),
    )


def _renew_reference(state: OnlineState, batch: DataBatch, opts: SolverOptions = SolverOptions()) -> OnlineState:
    # vectorised numpy twin of renew(), used to cross-check the compiled kernel
    spec = state.spec
    prev = state.theta
    s_prev = state.s_cum
    theta = prev.copy()
    step_norm = math.inf
    for it in range(1, opts.max_iter + 1):
        bundle = evaluate(batch, theta, spec, with_m=False)
        adjusted = s_prev @ (prev - theta) + bundle.u
        step = _solve(s_prev + bundle.s, adjusted, "combined sensitivity matrix")
        theta = theta + step
        step_norm = float(np.max(np.abs(step)))
        if step_norm < opts.tol:
            break
    else:
        raise ConvergenceError(
            f"online update for batch {batch.batch_index} did not converge in {opts.max_iter} iterations",
            theta,
            step_norm,
        )
    final = evaluate(batch, theta, spec)
    return OnlineState(
        spec,
        theta,
        s_prev + final.s,
        state.m_cum + final.m,
        state.n_total + batch.n,
        state.batch_count + 1,
        it,
    )


def sandwich(s: np.ndarray, m: np.ndarray) -> np.ndarray:
    """``S^{-1} M S^{-T}``, symmetrised."""
    s_inv = _solve(s, np.eye(s.shape[0]), "sensitivity matrix")
    v = s_inv @ m @ s_inv.T
    return 0.5 * (v + v.T)


def sandwich_variance(state: OnlineState) -> np.ndarray:
    return sandwich(state.s_cum, state.m_cum)


def ate_estimate(state: OnlineState) -> tuple[float, float]:
    """ATE point estimate and its standard error."""
    v = sandwich_variance(state)
    return state.delta, math.sqrt(max(v[-1, -1], 0.0))


@dataclass(frozen=True, eq=False)
class OfflineFit:
    theta: ParameterVector
    variance: np.ndarray
    iterations: int

    @property
    def delta(self) -> float:
        return self.theta.delta

    @property
    def se(self) -> float:
        return math.sqrt(max(self.variance[-1, -1], 0.0))

    def __iter__(self):
        # allows ``theta, variance = solve_offline(...)``
        yield self.theta
        yield self.variance


def solve_offline(batches, spec: ModelSpec, opts: SolverOptions = SolverOptions()) -> OfflineFit:
    """Pooled (oracle) M-estimate and sandwich variance over all batches."""
    if isinstance(batches, DataBatch):
        pooled = batches
    else:
        batches = list(batches)
        pooled = batches[0] if len(batches) == 1 else concat_batches(batches)
    if pooled.p != spec.p:
        raise ModelError(f"data has p={pooled.p}, model expects p={spec.p}")
    _check_treatment_variation(pooled, spec)
    theta, iters = _solve_pooled(pooled, spec, opts)
    bundle: ScoreBundle = evaluate(pooled, theta, spec)
    return OfflineFit(ParameterVector(spec, theta), sandwich(bundle.s, bundle.m), iters)


def run_stream(batches, spec: ModelSpec, opts: SolverOptions = SolverOptions()) -> OnlineState:
    """Initialise on the first batch and renew with the rest."""
    it = iter(batches)
    try:
        first = next(it)
    except StopIteration:
        raise ModelError("empty stream") from None
    state = init_state(first, spec, opts)
    for batch in it:
        state = renew(state, batch, opts)
    return state
