"""Group-sequential monitoring of the ATE with alpha-spending boundaries.

Interim Wald statistics ``Z_1, ..., Z_T`` are treated as a Gaussian
sequence with independent increments on the information scale, i.e.
``Cov(Z_j, Z_k) = sqrt(t_j / t_k)`` for ``j <= k``.  Two-sided boundaries
``z(k)`` are found one stage at a time so that the probability of having
crossed by stage ``k`` equals the cumulative spent alpha.  Crossing
probabilities come from recursive numerical integration of the
sub-density of not-yet-stopped paths.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .engine import OnlineState, ate_estimate

GRID_POINTS = 513  # odd, for Simpson's rule
PROB_TOL = 1e-6


class Spending(str, enum.Enum):
    POCOCK = "pocock"
    OBRIEN_FLEMING = "obrien_fleming"


class Decision(str, enum.Enum):
    CONTINUE = "continue"
    REJECT = "reject"
    COMPLETE_ACCEPT = "complete_accept"


class MonitorError(RuntimeError):
    pass


class MonitorTerminated(MonitorError):
    pass


def spent_alpha(spending: Spending, fraction: float, alpha: float) -> float:
    """Cumulative alpha spent at information fraction ``fraction`` in (0, 1]."""
    spending = Spending(spending)
    if fraction <= 0.0:
        return 0.0
    if fraction >= 1.0:
        return alpha
    if spending is Spending.POCOCK:
        return alpha * math.log(1.0 + (math.e - 1.0) * fraction)
    z = norm.ppf(1.0 - alpha / 2.0)
    return 2.0 * norm.sf(z / math.sqrt(fraction))


def spending_value(spending: Spending, t: int, T: int, alpha: float) -> float:
    """``alpha(t)`` for analysis ``t`` of ``T`` equally spaced analyses."""
    if not 1 <= t <= T:
        raise ValueError(f"analysis index {t} outside 1..{T}")
    return spent_alpha(spending, t / T, alpha)


@dataclass(frozen=True)
class MonitorConfig:
    total_analyses: int
    alpha: float = 0.05
    spending: Spending = Spending.POCOCK
    null_delta: float = 0.0
    info_fractions: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "spending", Spending(self.spending))
        if self.total_analyses < 1:
            raise MonitorError("total_analyses must be at least 1")
        if not 0.0 < self.alpha < 1.0:
            raise MonitorError("alpha must lie in (0, 1)")
        T = self.total_analyses
        fr = self.info_fractions
        fr = tuple(k / T for k in range(1, T + 1)) if fr is None else tuple(float(f) for f in fr)
        if len(fr) != T:
            raise MonitorError(f"need {T} information fractions, got {len(fr)}")
        if fr[0] <= 0.0 or any(b <= a for a, b in zip(fr, fr[1:])) or fr[-1] != 1.0:
            raise MonitorError("information fractions must be strictly increasing in (0, 1] and end at 1")
        object.__setattr__(self, "info_fractions", fr)

    def cumulative_alpha(self) -> np.ndarray:
        return np.array([spent_alpha(self.spending, f, self.alpha) for f in self.info_fractions])


def _simpson_weights(n: int, h: float) -> np.ndarray:
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * h / 3.0


def _crossing_prob(c: float, nodes: np.ndarray, mass: np.ndarray, sd: float) -> float:
    # P(|W_prev + N(0, sd^2)| >= c) integrated against the continuation sub-density
    return float(mass @ (norm.cdf((-c - nodes) / sd) + norm.sf((c - nodes) / sd)))


def compute_boundaries(config: MonitorConfig) -> np.ndarray:
    """Two-sided critical values ``z(1..T)`` on the Z scale."""
    cum = config.cumulative_alpha()
    incr = np.diff(np.concatenate([[0.0], cum]))
    if np.any(incr < -1e-15):
        raise MonitorError("spending function is not monotone")
    fr = np.asarray(config.info_fractions)
    bounds = np.empty(config.total_analyses)

    bounds[0] = norm.isf(cum[0] / 2.0) if cum[0] > 0 else math.inf
    # sub-density of the score process W_1 = Z_1 sqrt(t_1) on (-c_1, c_1)
    c = bounds[0] * math.sqrt(fr[0])
    nodes = np.linspace(-c, c, GRID_POINTS)
    dens = norm.pdf(nodes, scale=math.sqrt(fr[0]))
    for k in range(1, config.total_analyses):
        sd = math.sqrt(fr[k] - fr[k - 1])
        mass = dens * _simpson_weights(GRID_POINTS, nodes[1] - nodes[0])
        target = incr[k]
        if target <= 0.0:
            bounds[k] = math.inf
            z_k = 40.0
        else:
            lo, hi = 0.0, 40.0
            scale = math.sqrt(fr[k])
            if _crossing_prob(lo, nodes, mass, sd) < target:
                raise MonitorError(f"alpha spent at analysis {k + 1} exceeds the remaining probability")
            while hi - lo > 1e-12:
                mid = 0.5 * (lo + hi)
                if _crossing_prob(mid * scale, nodes, mass, sd) > target:
                    lo = mid
                else:
                    hi = mid
            z_k = 0.5 * (lo + hi)
            if abs(_crossing_prob(z_k * scale, nodes, mass, sd) - target) > PROB_TOL:
                raise MonitorError(f"boundary search failed at analysis {k + 1}")
            bounds[k] = z_k
        c = z_k * math.sqrt(fr[k])
        new_nodes = np.linspace(-c, c, GRID_POINTS)
        kernel = norm.pdf((new_nodes[:, None] - nodes[None, :]) / sd) / sd
        dens = kernel @ mass
        nodes = new_nodes
    return bounds


def crossing_probabilities(config: MonitorConfig, boundaries: Sequence[float]) -> np.ndarray:
    """Cumulative null crossing probabilities for given boundaries (recursive integration)."""
    fr = np.asarray(config.info_fractions)
    zb = np.asarray(boundaries, dtype=float)
    out = np.empty(len(zb))
    out[0] = 2.0 * norm.sf(zb[0])
    c = min(zb[0], 40.0) * math.sqrt(fr[0])
    nodes = np.linspace(-c, c, GRID_POINTS)
    dens = norm.pdf(nodes, scale=math.sqrt(fr[0]))
    for k in range(1, len(zb)):
        sd = math.sqrt(fr[k] - fr[k - 1])
        mass = dens * _simpson_weights(GRID_POINTS, nodes[1] - nodes[0])
        ck = min(zb[k], 40.0) * math.sqrt(fr[k])
        out[k] = out[k - 1] + _crossing_prob(ck, nodes, mass, sd)
        new_nodes = np.linspace(-ck, ck, GRID_POINTS)
        dens = (norm.pdf((new_nodes[:, None] - nodes[None, :]) / sd) / sd) @ mass
        nodes = new_nodes
    return out


def wald_stat(state: OnlineState, null_delta: float = 0.0) -> float:
    delta, se = ate_estimate(state)
    if not se > 0.0:
        raise MonitorError("standard error is zero; Wald statistic undefined")
    return (delta - null_delta) / se


@dataclass(frozen=True)
class MonitorState:
    config: MonitorConfig
    boundaries: tuple[float, ...]
    analyses_done: int = 0
    z_history: tuple[float, ...] = ()
    decision: Decision = Decision.CONTINUE

    def __post_init__(self):
        object.__setattr__(self, "decision", Decision(self.decision))
        object.__setattr__(self, "boundaries", tuple(float(b) for b in self.boundaries))
        object.__setattr__(self, "z_history", tuple(float(z) for z in self.z_history))
        if len(self.boundaries) != self.config.total_analyses:
            raise MonitorError("boundary count does not match total_analyses")
        if not 0 <= self.analyses_done <= self.config.total_analyses:
            raise MonitorError("analyses_done out of range")
        if len(self.z_history) != self.analyses_done:
            raise MonitorError("z_history length must equal analyses_done")

    @classmethod
    def start(cls, config: MonitorConfig) -> "MonitorState":
        return cls(config, tuple(compute_boundaries(config)))

    @property
    def terminated(self) -> bool:
        return self.decision is not Decision.CONTINUE


def record_statistic(monitor: MonitorState, z: float) -> MonitorState:
    """Advance the monitor by one analysis with an already computed statistic."""
    if monitor.terminated:
        raise MonitorTerminated(f"monitor already stopped with decision {monitor.decision.value}")
    k = monitor.analyses_done
    if k >= monitor.config.total_analyses:
        raise MonitorTerminated("all planned analyses have been performed")
    if abs(z) >= monitor.boundaries[k]:
        decision = Decision.REJECT
    elif k + 1 == monitor.config.total_analyses:
        decision = Decision.COMPLETE_ACCEPT
    else:
        decision = Decision.CONTINUE
    return replace(monitor, analyses_done=k + 1, z_history=monitor.z_history + (float(z),), decision=decision)


def monitor_step(monitor: MonitorState, engine_state: OnlineState) -> MonitorState:
    return record_statistic(monitor, wald_stat(engine_state, monitor.config.null_delta))

