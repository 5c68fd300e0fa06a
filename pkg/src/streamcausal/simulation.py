"""Simulation harness: data-generating process, scenario runners and metrics.

Data-generating process for one subject::

    X ~ MVN(0, V),  V = compound symmetry with correlation rho
    A | X ~ Bernoulli(expit((1, X) . alpha))
    Y | A, X ~ N(h(A, X) . beta, 1)            (continuous)
    Y | A, X ~ Bernoulli(expit(h(A, X) . beta))  (binary)

with ``h(A, X) = (1, X, A, A X)`` in the package's coefficient order.
Every replication draws its own random stream from ``(seed, replication)``.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .engine import EngineError, SolverOptions, ate_estimate, init_state, renew, solve_offline
from .model import DataBatch, Family, ModelError, ModelSpec, OutcomeType, concat_batches, expit
from .sequential import Decision, MonitorConfig, MonitorState, record_statistic, wald_stat

logger = logging.getLogger(__name__)

Z95 = 1.959963984540054

# Fixed standard-normal draw of (alpha, beta) used by default.  With one
# covariate and the treatment coefficient pinned to DEFAULT_ATE, this draw
# gives asymptotic ATE standard errors of about (2.33, 2.42, 2.34)/sqrt(N)
# for G-computation / IPTW / AIPTW.
DEFAULT_PARAM_SEED = 178
DEFAULT_ATE = 0.17934


class StreamBias(str, enum.Enum):
    NONE = "none"
    COVARIATE_SORTED = "covariate_sorted"


class ParamMode(str, enum.Enum):
    FIXED = "fixed"
    PER_REPLICATION = "per_replication"


@dataclass(frozen=True)
class TrueParams:
    alpha: np.ndarray
    beta: np.ndarray

    @property
    def p(self) -> int:
        return len(self.alpha)


@dataclass(frozen=True)
class SimConfig:
    n_batches: int = 100
    batch_size: int = 100
    p_covariates: int = 1
    rho: float = 0.5
    outcome_type: OutcomeType = OutcomeType.CONTINUOUS
    replications: int = 500
    seed: int = 2024
    stream_bias: StreamBias = StreamBias.NONE
    param_mode: ParamMode = ParamMode.FIXED
    param_seed: int = DEFAULT_PARAM_SEED
    ate: float | None = DEFAULT_ATE
    interactions: bool = True
    alpha_true: tuple[float, ...] | None = None
    beta_true: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "outcome_type", OutcomeType(self.outcome_type))
        object.__setattr__(self, "stream_bias", StreamBias(self.stream_bias))
        object.__setattr__(self, "param_mode", ParamMode(self.param_mode))
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if self.n_batches < 1 or self.batch_size < 1:
            raise ValueError("n_batches and batch_size must be positive")
        if self.p_covariates < 0:
            raise ValueError("p_covariates must be non-negative")
        if self.replications < 0:
            raise ValueError("replications must be non-negative")

    @property
    def p(self) -> int:
        return self.p_covariates + 1

    @property
    def total_n(self) -> int:
        return self.n_batches * self.batch_size

    def covariance(self) -> np.ndarray:
        q = self.p_covariates
        return self.rho * np.ones((q, q)) + (1.0 - self.rho) * np.eye(q)


def replication_rng(seed: int, replication: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, replication)``."""
    return np.random.default_rng(np.random.SeedSequence([seed, replication]))


def draw_params(config: SimConfig, rng: np.random.Generator | None = None) -> TrueParams:
    """Draw ``(alpha, beta)`` from a standard normal, then apply the config overrides."""
    p = config.p
    if rng is None:
        rng = np.random.default_rng(config.param_seed)
    draw = rng.standard_normal(3 * p + 1)  # (alpha, beta, delta); delta is implied by beta
    alpha = draw[:p].copy()
    beta = draw[p:3 * p].copy()
    if config.outcome_type is OutcomeType.BINARY:
        # keep propensities and outcome probabilities away from 0/1
        alpha *= 0.5
        beta *= 0.5
    if config.alpha_true is not None:
        alpha = np.asarray(config.alpha_true, dtype=float)
    if config.beta_true is not None:
        beta = np.asarray(config.beta_true, dtype=float)
    if config.ate is not None and config.outcome_type is OutcomeType.CONTINUOUS:
        beta[p] = config.ate
    if not config.interactions:
        beta[p + 1:] = 0.0
    if alpha.shape != (p,) or beta.shape != (2 * p,):
        raise ValueError("alpha_true / beta_true have the wrong length")
    return TrueParams(alpha, beta)


def params_for_replication(config: SimConfig, replication: int) -> TrueParams:
    if config.param_mode is ParamMode.FIXED:
        return draw_params(config)
    return draw_params(config, replication_rng(config.param_seed, 10**6 + replication))


def _draw_pooled(config: SimConfig, params: TrueParams, n: int, rng: np.random.Generator):
    q = config.p_covariates
    z = rng.standard_normal((n, q))
    if q:
        z = z @ np.linalg.cholesky(config.covariance()).T
    x = np.hstack([np.ones((n, 1)), z])
    a = (rng.random(n) < expit(x @ params.alpha)).astype(float)
    lin = np.hstack([x, a[:, None] * x]) @ params.beta
    if config.outcome_type is OutcomeType.BINARY:
        y = (rng.random(n) < expit(lin)).astype(float)
    else:
        y = lin + rng.standard_normal(n)
    return y, a, x


def generate_batch(config: SimConfig, params: TrueParams, rng: np.random.Generator, batch_index: int = 1) -> DataBatch:
    y, a, x = _draw_pooled(config, params, config.batch_size, rng)
    return DataBatch(batch_index, y, a, x)


def true_ate(params: TrueParams, config: SimConfig, rng: np.random.Generator | None = None,
             n_draws: int = 10**6) -> tuple[float, float]:
    """Population ATE and the Monte Carlo standard error of its computation.

    Continuous outcomes with zero-mean covariates: the treatment main effect,
    exactly.  Binary outcomes: Monte Carlo average of
    ``expit(h(1, X) beta) - expit(h(0, X) beta)`` over covariate draws.
    """
    p = config.p
    if config.outcome_type is OutcomeType.CONTINUOUS:
        return float(params.beta[p]), 0.0
    if config.p_covariates == 0:
        b = params.beta
        return float(expit(b[0] + b[1]) - expit(b[0])), 0.0
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([config.param_seed, 7]))
    z = rng.standard_normal((n_draws, config.p_covariates)) @ np.linalg.cholesky(config.covariance()).T
    x = np.hstack([np.ones((n_draws, 1)), z])
    b0, b1 = params.beta[:p], params.beta[p:]
    diff = expit(x @ (b0 + b1)) - expit(x @ b0)
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(n_draws))


def make_stream(config: SimConfig, params: TrueParams, rng: np.random.Generator) -> list[DataBatch]:
    """Draw the pooled sample and cut it into batches.

    With ``COVARIATE_SORTED`` the pooled sample is ordered by the first
    non-intercept covariate first, so each batch is a covariate-skewed slice
    while the pooled data stay a random sample.
    """
    y, a, x = _draw_pooled(config, params, config.total_n, rng)
    if config.stream_bias is StreamBias.COVARIATE_SORTED:
        if config.p_covariates == 0:
            raise ValueError("covariate-sorted streams need at least one covariate")
        order = np.argsort(x[:, 1], kind="stable")
        y, a, x = y[order], a[order], x[order]
    n = config.batch_size
    return [
        DataBatch(j + 1, y[j * n:(j + 1) * n], a[j * n:(j + 1) * n], x[j * n:(j + 1) * n])
        for j in range(config.n_batches)
    ]


# --------------------------------------------------------------------------- metrics


@dataclass
class ReplicationResult:
    replication: int
    family: str
    mode: str
    delta: float
    se: float
    truth: float
    tol_time: float
    run_time: float

    @property
    def covered(self) -> bool:
        return abs(self.delta - self.truth) <= Z95 * self.se


@dataclass
class MetricsRow:
    family: str
    mode: str
    n_batches: int
    batch_size: int
    total_n: int
    replications: int
    failures: int
    bias: float
    rel_bias: float
    ase: float
    ese: float
    cp: float
    tol_time: float
    run_time: float


STAT_FIELDS = ("bias", "rel_bias", "ase", "ese", "cp")


@dataclass
class MetricsTable:
    rows: list[MetricsRow] = field(default_factory=list)
    results: list[ReplicationResult] = field(default_factory=list, repr=False)
    failures: list[dict] = field(default_factory=list, repr=False)

    def row(self, family, mode: str = "online") -> MetricsRow:
        family = Family(family).value
        for r in self.rows:
            if r.family == family and r.mode == mode:
                return r
        raise KeyError((family, mode))

    def statistics(self) -> list[tuple]:
        """Timing-free content, for reproducibility comparisons."""
        return [
            (r.family, r.mode, r.replications, r.failures) + tuple(getattr(r, f) for f in STAT_FIELDS)
            for r in self.rows
        ]

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(MetricsRow.__dataclass_fields__)
        w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(asdict(r))
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {"rows": [asdict(r) for r in self.rows], "failures": self.failures},
            indent=2,
            allow_nan=True,
        )


def aggregate(results: Sequence[ReplicationResult], config: SimConfig, failures: Sequence[dict] = ()) -> MetricsTable:
    table = MetricsTable(results=list(results), failures=list(failures))
    keys: list[tuple[str, str]] = []
    for r in results:
        if (r.family, r.mode) not in keys:
            keys.append((r.family, r.mode))
    for fam, mode in keys:
        rs = [r for r in results if r.family == fam and r.mode == mode]
        err = np.array([r.delta - r.truth for r in rs])
        truth = np.array([r.truth for r in rs])
        se = np.array([r.se for r in rs])
        n_fail = sum(1 for f in failures if f["family"] == fam and f["mode"] == mode)
        bias = float(err.mean())
        mean_truth = float(truth.mean())
        table.rows.append(
            MetricsRow(
                family=fam,
                mode=mode,
                n_batches=config.n_batches,
                batch_size=config.batch_size,
                total_n=config.total_n,
                replications=len(rs),
                failures=n_fail,
                bias=bias,
                rel_bias=bias / mean_truth if mean_truth != 0 else math.nan,
                ase=float(se.mean()),
                ese=float(err.std(ddof=1)) if len(rs) > 1 else math.nan,
                cp=float(np.mean([r.covered for r in rs])),
                tol_time=float(np.mean([r.tol_time for r in rs])),
                run_time=float(np.mean([r.run_time for r in rs])),
            )
        )
    return table


# --------------------------------------------------------------------------- runners


def _raw_stream(batches: Sequence[DataBatch]):
    return [(b.batch_index, np.array(b.y), np.array(b.a), np.array(b.x)) for b in batches]


def run_online(raw, spec: ModelSpec, opts: SolverOptions):
    """Online pass over raw batch arrays; returns (state, tol_time, run_time)."""
    run = 0.0
    t0 = time.perf_counter()
    state = None
    for idx, y, a, x in raw:
        batch = DataBatch(idx, y, a, x)
        t1 = time.perf_counter()
        state = init_state(batch, spec, opts) if state is None else renew(state, batch, opts)
        run += time.perf_counter() - t1
    return state, time.perf_counter() - t0, run


def run_offline(raw, spec: ModelSpec, opts: SolverOptions):
    """Pooled oracle fit from raw batch arrays; returns (fit, tol_time, run_time)."""
    t0 = time.perf_counter()
    pooled = concat_batches([DataBatch(idx, y, a, x) for idx, y, a, x in raw])
    t1 = time.perf_counter()
    fit = solve_offline(pooled, spec, opts)
    t2 = time.perf_counter()
    return fit, t2 - t0, t2 - t1


def _one_replication(config: SimConfig, rep: int, families, modes, opts: SolverOptions, truth_cache: dict):
    params = params_for_replication(config, rep)
    key = (params.alpha.tobytes(), params.beta.tobytes())
    if key not in truth_cache:
        truth_cache[key] = true_ate(params, config)[0]
    truth = truth_cache[key]
    raw = _raw_stream(make_stream(config, params, replication_rng(config.seed, rep)))
    results, failures = [], []
    for fam in families:
        spec = ModelSpec(fam, config.outcome_type, config.p)
        for mode in modes:
            try:
                if mode == "online":
                    state, tol, run = run_online(raw, spec, opts)
                    delta, se = ate_estimate(state)
                else:
                    fit, tol, run = run_offline(raw, spec, opts)
                    delta, se = fit.delta, fit.se
            except (EngineError, ModelError) as exc:
                failures.append({"replication": rep, "family": spec.family.value, "mode": mode, "error": str(exc)})
                continue
            results.append(ReplicationResult(rep, spec.family.value, mode, delta, se, truth, tol, run))
    return results, failures


def run_scenario(config: SimConfig, families: Iterable = tuple(Family), modes: Sequence[str] = ("offline", "online"),
                 opts: SolverOptions = SolverOptions(), replications: Iterable[int] | None = None) -> MetricsTable:
    """Replicate the stream ``config.replications`` times and aggregate per family and mode."""
    families = [Family(f) for f in families]
    reps = range(config.replications) if replications is None else list(replications)
    results: list[ReplicationResult] = []
    failures: list[dict] = []
    cache: dict = {}
    for rep in reps:
        r, f = _one_replication(config, rep, families, modes, opts, cache)
        results.extend(r)
        failures.extend(f)
    if failures:
        logger.warning("%d solver failures across replications", len(failures))
    return aggregate(results, config, failures)


@dataclass
class EquivalenceResult:
    family: str
    online_delta: np.ndarray
    offline_delta: np.ndarray
    offline_se: np.ndarray
    failures: int

    @property
    def standardized_gap(self) -> np.ndarray:
        return np.abs(self.online_delta - self.offline_delta) / self.offline_se

    def fraction_within(self, k: float = 0.1) -> float:
        return float(np.mean(self.standardized_gap <= k))


def run_equivalence(config: SimConfig, families: Iterable = (Family.IPTW, Family.AIPTW),
                    opts: SolverOptions = SolverOptions()) -> dict[str, EquivalenceResult]:
    """Online estimate vs. pooled oracle on the same streams."""
    out = {}
    for fam in families:
        spec = ModelSpec(fam, config.outcome_type, config.p)
        on, off, se, fails = [], [], [], 0
        for rep in range(config.replications):
            params = params_for_replication(config, rep)
            batches = make_stream(config, params, replication_rng(config.seed, rep))
            try:
                state = init_state(batches[0], spec, opts)
                for b in batches[1:]:
                    state = renew(state, b, opts)
                fit = solve_offline(batches, spec, opts)
            except (EngineError, ModelError):
                fails += 1
                continue
            on.append(state.delta)
            off.append(fit.delta)
            se.append(fit.se)
        out[spec.family.value] = EquivalenceResult(spec.family.value, np.array(on), np.array(off), np.array(se), fails)
    return out


@dataclass
class SequentialRow:
    family: str
    delta: float
    replications: int
    rejections: int
    failures: int
    mean_stop: float

    @property
    def rejection_rate(self) -> float:
        return self.rejections / self.replications if self.replications else math.nan


def run_sequential_experiment(config: SimConfig, monitor_config: MonitorConfig, delta_grid: Sequence[float],
                              families: Iterable = tuple(Family),
                              opts: SolverOptions = SolverOptions()) -> list[SequentialRow]:
    """Rejection frequency of the monitored Wald test for each true ATE in ``delta_grid``.

    One interim analysis per batch, so ``monitor_config.total_analyses`` must
    equal ``config.n_batches``.
    """
    if monitor_config.total_analyses != config.n_batches:
        raise ValueError("one analysis per batch: total_analyses must equal n_batches")
    if config.outcome_type is not OutcomeType.CONTINUOUS:
        raise ValueError("the sequential experiment sets the ATE through the treatment coefficient")
    families = [Family(f) for f in families]
    start = MonitorState.start(monitor_config)
    rows = []
    for delta in delta_grid:
        cfg = replace(config, ate=float(delta))
        for fam in families:
            spec = ModelSpec(fam, cfg.outcome_type, cfg.p)
            rejections = fails = done = 0
            stops = []
            for rep in range(cfg.replications):
                params = params_for_replication(cfg, rep)
                batches = make_stream(cfg, params, replication_rng(cfg.seed, rep))
                monitor = start
                try:
                    state = None
                    for b in batches:
                        state = init_state(b, spec, opts) if state is None else renew(state, b, opts)
                        monitor = record_statistic(monitor, wald_stat(state, monitor_config.null_delta))
                        if monitor.terminated:
                            break
                except (EngineError, ModelError):
                    fails += 1
                    continue
                done += 1
                stops.append(monitor.analyses_done)
                rejections += monitor.decision is Decision.REJECT
            rows.append(SequentialRow(spec.family.value, float(delta), done, rejections, fails,
                                      float(np.mean(stops)) if stops else math.nan))
    return rows


def trajectory(config: SimConfig, family, replication: int = 0, offline_every: int = 1,
               opts: SolverOptions = SolverOptions()) -> list[dict]:
    """Long-format per-batch online estimates, with the pooled oracle every ``offline_every`` batches."""
    spec = ModelSpec(family, config.outcome_type, config.p)
    params = params_for_replication(config, replication)
    batches = make_stream(config, params, replication_rng(config.seed, replication))
    truth = true_ate(params, config)[0]
    rows = []
    state = None
    for j, b in enumerate(batches, start=1):
        state = init_state(b, spec, opts) if state is None else renew(state, b, opts)
        d, se = ate_estimate(state)
        rows.append({"batch": j, "n_total": state.n_total, "mode": "online", "delta": d, "se": se, "truth": truth})
        if offline_every and (j % offline_every == 0 or j == len(batches)):
            fit = solve_offline(batches[:j], spec, opts)
            rows.append({"batch": j, "n_total": state.n_total, "mode": "offline", "delta": fit.delta,
                         "se": fit.se, "truth": truth})
    return rows
