"""Stacked estimating functions for G-computation, IPTW and AIPTW.

Each family is evaluated column-wise on a whole batch.  ``unit_scores``
returns the per-observation score matrix ``U`` of shape ``(n, d)``;
``batch_bundle`` returns the batch sums needed by the online engine:

    u = sum_i U(O_i; theta)
    s = -sum_i dU(O_i; theta)/dtheta^T      (analytic)
    m = sum_i U(O_i; theta) U(O_i; theta)^T
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    DataBatch,
    Family,
    ModelError,
    ModelSpec,
    Observation,
    OutcomeType,
    ParameterVector,
    expit,
)

POSITIVITY_EPS = 1e-8


class PositivityError(ModelError):
    """Estimated propensity score too close to 0 or 1."""

    def __init__(self, batch_index: int, obs_index: int, e: float):
        self.batch_index = batch_index
        self.obs_index = obs_index
        self.e = e
        super().__init__(
            f"positivity violation in batch {batch_index}, observation {obs_index}: "
            f"propensity score {e:.3g} outside ({POSITIVITY_EPS}, {1 - POSITIVITY_EPS})"
        )


@dataclass(frozen=True, eq=False)
class ScoreBundle:
    u: np.ndarray
    s: np.ndarray
    m: np.ndarray

    def __add__(self, other: "ScoreBundle") -> "ScoreBundle":
        return ScoreBundle(self.u + other.u, self.s + other.s, self.m + other.m)


def _theta_array(theta, spec: ModelSpec) -> np.ndarray:
    if isinstance(theta, ParameterVector):
        if theta.spec != spec:
            raise ModelError("parameter vector was built for a different model spec")
        return theta.theta
    arr = np.asarray(theta, dtype=float)
    if arr.shape != (spec.dim,):
        raise ModelError(f"theta has shape {arr.shape}, expected ({spec.dim},)")
    return arr


def _propensity(x: np.ndarray, alpha: np.ndarray, batch_index: int) -> np.ndarray:
    e = expit(x @ alpha)
    bad = (e <= POSITIVITY_EPS) | (e >= 1.0 - POSITIVITY_EPS)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise PositivityError(batch_index, i, float(e[i]))
    return e


class _Pieces:
    """Intermediate quantities shared by the score and its Jacobian."""

    __slots__ = ("x", "a", "y", "e", "mu", "dmu", "mu1", "dmu1", "mu0", "dmu0", "delta", "p")


def _pieces(spec: ModelSpec, x, a, y, theta: np.ndarray, batch_index: int) -> _Pieces:
    if x.shape[1] != spec.p:
        raise ModelError(f"batch {batch_index} has p={x.shape[1]}, model expects p={spec.p}")
    pc = _Pieces()
    pc.x, pc.a, pc.y, pc.p = x, a, y, spec.p
    pc.delta = theta[-1]
    pc.e = None
    if spec.has_alpha:
        pc.e = _propensity(x, theta[spec.alpha_slice], batch_index)
    pc.mu = pc.dmu = pc.mu1 = pc.dmu1 = pc.mu0 = pc.dmu0 = None
    if spec.has_beta:
        beta = theta[spec.beta_slice]
        p = spec.p
        lin0 = x @ beta[:p]
        lin1 = lin0 + x @ beta[p:]
        lin = np.where(a == 1.0, lin1, lin0)
        if spec.outcome_type is OutcomeType.BINARY:
            pc.mu, pc.mu1, pc.mu0 = expit(lin), expit(lin1), expit(lin0)
            pc.dmu = pc.mu * (1.0 - pc.mu)
            pc.dmu1 = pc.mu1 * (1.0 - pc.mu1)
            pc.dmu0 = pc.mu0 * (1.0 - pc.mu0)
        else:
            ones = np.ones_like(lin)
            pc.mu, pc.mu1, pc.mu0 = lin, lin1, lin0
            pc.dmu = pc.dmu1 = pc.dmu0 = ones
    return pc


def _ate_column(spec: ModelSpec, pc: _Pieces) -> np.ndarray:
    a, y, e = pc.a, pc.y, pc.e
    if spec.family is Family.GCOMP:
        return pc.mu1 - pc.mu0 - pc.delta
    if spec.family is Family.IPTW:
        return a * y / e - (1.0 - a) * y / (1.0 - e) - pc.delta
    return (
        pc.mu1 + a * (y - pc.mu1) / e
        - pc.mu0 - (1.0 - a) * (y - pc.mu0) / (1.0 - e)
        - pc.delta
    )


def _score_matrix(spec: ModelSpec, pc: _Pieces) -> np.ndarray:
    x, a = pc.x, pc.a
    n, p = x.shape
    out = np.empty((n, spec.dim))
    if spec.has_alpha:
        out[:, spec.alpha_slice] = x * (a - pc.e)[:, None]
    if spec.has_beta:
        r = pc.y - pc.mu
        bs = spec.beta_slice
        out[:, bs.start:bs.start + p] = x * r[:, None]
        out[:, bs.start + p:bs.stop] = x * (a * r)[:, None]
    out[:, -1] = _ate_column(spec, pc)
    return out


def _sensitivity(spec: ModelSpec, pc: _Pieces) -> np.ndarray:
    """Analytic ``-sum_i dU_i/dtheta^T``."""
    x, a, y, e = pc.x, pc.a, pc.y, pc.e
    n, p = x.shape
    d = spec.dim
    s = np.zeros((d, d))
    s[-1, -1] = n
    if spec.has_alpha:
        sa = spec.alpha_slice
        s[sa, sa] = (x * (e * (1.0 - e))[:, None]).T @ x
        if spec.family is Family.IPTW:
            w = a * y * (1.0 - e) / e + (1.0 - a) * y * e / (1.0 - e)
        else:
            w = a * (y - pc.mu1) * (1.0 - e) / e + (1.0 - a) * (y - pc.mu0) * e / (1.0 - e)
        s[-1, sa] = w @ x
    if spec.has_beta:
        bs = spec.beta_slice
        b0, b1 = bs.start, bs.start + p
        xd = x * pc.dmu[:, None]
        xad = xd * a[:, None]
        # h h^T m' with h = (x, a x); a is 0/1 so a^2 = a
        g00 = xd.T @ x
        g01 = xad.T @ x
        s[b0:b1, b0:b1] = g00
        s[b0:b1, b1:bs.stop] = g01
        s[b1:bs.stop, b0:b1] = g01.T
        s[b1:bs.stop, b1:bs.stop] = g01
        # derivative of the ATE entry in beta: c1 * h(1,x) - c0 * h(0,x)
        if spec.family is Family.GCOMP:
            c1, c0 = pc.dmu1, pc.dmu0
        else:
            c1 = pc.dmu1 * (1.0 - a / e)
            c0 = pc.dmu0 * (1.0 - (1.0 - a) / (1.0 - e))
        s[-1, b0:b1] = -((c1 - c0) @ x)
        s[-1, b1:bs.stop] = -(c1 @ x)
    return s


def unit_scores(batch: DataBatch, theta, spec: ModelSpec) -> np.ndarray:
    """Per-observation scores, shape ``(n, d)``."""
    th = _theta_array(theta, spec)
    pc = _pieces(spec, batch.x, batch.a, batch.y, th, batch.batch_index)
    return _score_matrix(spec, pc)


def evaluate(batch: DataBatch, theta, spec: ModelSpec, *, with_m: bool = True) -> ScoreBundle:
    th = _theta_array(theta, spec)
    pc = _pieces(spec, batch.x, batch.a, batch.y, th, batch.batch_index)
    scores = _score_matrix(spec, pc)
    u = scores.sum(axis=0)
    s = _sensitivity(spec, pc)
    m = scores.T @ scores if with_m else None
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(s))) or (
        m is not None and not np.all(np.isfinite(m))
    ):
        raise ModelError(f"non-finite score or sensitivity in batch {batch.batch_index}")
    return ScoreBundle(u, s, m)


def batch_bundle(batch: DataBatch, theta, spec: ModelSpec) -> ScoreBundle:
    """Score sum, sensitivity and variability sum of ``batch`` at ``theta``."""
    return evaluate(batch, theta, spec, with_m=True)


def _single(obs: Observation, theta: ParameterVector, family: Family) -> np.ndarray:
    spec = theta.spec
    if spec.family is not family:
        raise ModelError(f"parameter vector is for {spec.family.value}, not {family.value}")
    if obs.p != spec.p:
        raise ModelError(f"observation has p={obs.p}, model expects p={spec.p}")
    if spec.outcome_type is OutcomeType.BINARY and obs.y not in (0.0, 1.0):
        raise ModelError("binary outcome must be 0 or 1")
    batch = DataBatch.from_observations(1, [obs])
    return unit_scores(batch, theta, spec)[0]


def score_gcomp(obs: Observation, theta: ParameterVector) -> np.ndarray:
    return _single(obs, theta, Family.GCOMP)


def score_iptw(obs: Observation, theta: ParameterVector) -> np.ndarray:
    return _single(obs, theta, Family.IPTW)


def score_aiptw(obs: Observation, theta: ParameterVector) -> np.ndarray:
    return _single(obs, theta, Family.AIPTW)
