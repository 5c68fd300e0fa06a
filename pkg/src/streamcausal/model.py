"""Observations, batches, model specifications and the shared design rows.

Conventions used throughout the package:

* every covariate vector carries its intercept in position 0;
* the propensity-score features are ``g(X) = X``;
* the outcome-regression features are ``h(A, X) = (X, A * X)``, so for
  ``X = (1, X_1, ..., X_{p-1})`` the coefficient vector ``beta`` is ordered as
  ``(intercept, X_1..X_{p-1}, A, A*X_1..A*X_{p-1})``;
* the ATE is always the last entry of ``theta``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit as _expit


class Family(str, enum.Enum):
    GCOMP = "gcomp"
    IPTW = "iptw"
    AIPTW = "aiptw"


class OutcomeType(str, enum.Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


class ModelError(ValueError):
    """Raised on malformed observations, batches or parameter vectors."""


def expit(z):
    """Logistic function ``1 / (1 + exp(-z))``; saturates instead of overflowing."""
    return _expit(z)


@dataclass(frozen=True)
class Observation:
    y: float
    a: int
    x: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in self.x))
        if self.a not in (0, 1):
            raise ModelError(f"treatment must be 0 or 1, got {self.a!r}")
        if len(self.x) == 0 or self.x[0] != 1.0:
            raise ModelError("covariate vector must start with the intercept 1")

    @property
    def p(self) -> int:
        return len(self.x)


@dataclass(frozen=True, eq=False)
class DataBatch:
    """A finite batch of observations stored column-wise.

    ``x`` has shape ``(n, p)`` with ``x[:, 0] == 1``; ``a`` and ``y`` have
    shape ``(n,)``.
    """

    batch_index: int
    y: np.ndarray
    a: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        y = np.ascontiguousarray(self.y, dtype=float)
        a = np.ascontiguousarray(self.a, dtype=float)
        x = np.ascontiguousarray(self.x, dtype=float)
        if x.ndim != 2:
            raise ModelError("x must be a 2-d array (n, p)")
        n = x.shape[0]
        if n < 1:
            raise ModelError(f"batch {self.batch_index} is empty")
        if y.shape != (n,) or a.shape != (n,):
            raise ModelError(f"batch {self.batch_index}: y, a and x disagree on n")
        if not np.all((a == 0.0) | (a == 1.0)):
            raise ModelError(f"batch {self.batch_index}: treatment must be 0/1")
        if not np.all(x[:, 0] == 1.0):
            raise ModelError(f"batch {self.batch_index}: x[:, 0] must be the intercept 1")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ModelError(f"batch {self.batch_index}: non-finite values")
        for arr in (y, a, x):
            arr.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "x", x)

    @classmethod
    def from_observations(cls, batch_index: int, observations: Iterable[Observation]) -> "DataBatch":
        obs = list(observations)
        if not obs:
            raise ModelError(f"batch {batch_index} is empty")
        p = obs[0].p
        if any(o.p != p for o in obs):
            raise ModelError(f"batch {batch_index}: observations differ in covariate dimension")
        return cls(
            batch_index,
            y=np.array([o.y for o in obs]),
            a=np.array([o.a for o in obs]),
            x=np.array([o.x for o in obs]),
        )

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def observations(self) -> list[Observation]:
        return [Observation(float(y), int(a), tuple(x)) for y, a, x in zip(self.y, self.a, self.x)]


def concat_batches(batches: Sequence[DataBatch], batch_index: int = 1) -> DataBatch:
    """Pool several batches into one."""
    if not batches:
        raise ModelError("no batches to pool")
    return DataBatch(
        batch_index,
        y=np.concatenate([b.y for b in batches]),
        a=np.concatenate([b.a for b in batches]),
        x=np.concatenate([b.x for b in batches]),
    )


@dataclass(frozen=True)
class ModelSpec:
    family: Family
    outcome_type: OutcomeType
    p: int

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "outcome_type", OutcomeType(self.outcome_type))
        if self.p < 1:
            raise ModelError("p must be at least 1 (the intercept)")

    @property
    def has_alpha(self) -> bool:
        return self.family is not Family.GCOMP

    @property
    def has_beta(self) -> bool:
        return self.family is not Family.IPTW

    @property
    def dim(self) -> int:
        return (self.p if self.has_alpha else 0) + (2 * self.p if self.has_beta else 0) + 1

    @property
    def alpha_slice(self) -> slice | None:
        return slice(0, self.p) if self.has_alpha else None

    @property
    def beta_slice(self) -> slice | None:
        if not self.has_beta:
            return None
        start = self.p if self.has_alpha else 0
        return slice(start, start + 2 * self.p)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.dim)


@dataclass(frozen=True)
class ParameterVector:
    """Packed ``theta = (alpha, beta, delta)`` with family-dependent slices."""

    spec: ModelSpec
    theta: np.ndarray = field(repr=False)

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).reshape(-1)
        if theta.shape != (self.spec.dim,):
            raise ModelError(f"theta has length {theta.size}, spec needs {self.spec.dim}")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def pack(cls, spec: ModelSpec, alpha=None, beta=None, delta: float = 0.0) -> "ParameterVector":
        parts = []
        if spec.has_alpha:
            if alpha is None or len(alpha) != spec.p:
                raise ModelError(f"alpha must have length {spec.p}")
            parts.append(np.asarray(alpha, dtype=float))
        elif alpha is not None:
            raise ModelError("G-computation carries no alpha block")
        if spec.has_beta:
            if beta is None or len(beta) != 2 * spec.p:
                raise ModelError(f"beta must have length {2 * spec.p}")
            parts.append(np.asarray(beta, dtype=float))
        elif beta is not None:
            raise ModelError("IPTW carries no beta block")
        parts.append(np.array([delta], dtype=float))
        return cls(spec, np.concatenate(parts))

    @property
    def alpha(self) -> np.ndarray | None:
        s = self.spec.alpha_slice
        return None if s is None else self.theta[s]

    @property
    def beta(self) -> np.ndarray | None:
        s = self.spec.beta_slice
        return None if s is None else self.theta[s]

    @property
    def delta(self) -> float:
        return float(self.theta[-1])

    def unpack(self):
        return self.alpha, self.beta, self.delta


def ps_features(x: np.ndarray) -> np.ndarray:
    """Propensity features ``g(X)``: the covariate row itself, intercept included."""
    return np.asarray(x, dtype=float)


def or_features(a, x: np.ndarray) -> np.ndarray:
    """Outcome-regression features ``h(A, X) = (X, A * X)``.

    Works on a single row (``x`` of shape ``(p,)``) or on a batch
    (``x`` of shape ``(n, p)`` with ``a`` of shape ``(n,)``).
    """
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    if x.ndim == 1:
        return np.concatenate([x, a * x])
    return np.hstack([x, a[:, None] * x])


def predict_outcome(a, x, beta, outcome_type: OutcomeType) -> np.ndarray | float:
    """Outcome mean ``m(a, x; beta)``; ``a`` may be counterfactual."""
    x = np.asarray(x, dtype=float)
    beta = np.asarray(beta, dtype=float)
    p = x.shape[-1]
    if beta.shape != (2 * p,):
        raise ModelError(f"beta has length {beta.size}, expected {2 * p}")
    lin = or_features(a, x) @ beta
    if OutcomeType(outcome_type) is OutcomeType.BINARY:
        return expit(lin)
    return lin
