"""Command-line interface.

Exit codes: 0 success / monitor continues, 2 monitor rejected H0, 3 monitor
completed without rejection, 4 refused because the monitor already stopped,
10 and above for errors (a JSON error object is written to stderr).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .engine import EngineError, SolverOptions, ate_estimate, init_state, renew, solve_offline
from .model import Family, ModelError, ModelSpec, OutcomeType
from .persist import (
    BatchFormatError,
    StateFileError,
    load_state,
    locked,
    read_batch_csv,
    save_state,
)
from .sequential import Decision, MonitorConfig, MonitorError, MonitorState, monitor_step, wald_stat
from .simulation import SimConfig, StreamBias, run_equivalence, run_scenario, run_sequential_experiment, trajectory

EXIT_OK = 0
EXIT_REJECT = 2
EXIT_ACCEPT = 3
EXIT_TERMINATED = 4
EXIT_USAGE = 10
EXIT_DATA = 11
EXIT_STATE = 12
EXIT_ENGINE = 13
EXIT_MONITOR = 14

Z95 = 1.959963984540054


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _parse_monitor(text: str) -> MonitorConfig:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise CliError(EXIT_USAGE, "usage", "--monitor expects T,alpha,spending")
    try:
        return MonitorConfig(int(parts[0]), float(parts[1]), parts[2].lower().replace("-", "_"))
    except (ValueError, MonitorError) as exc:
        raise CliError(EXIT_USAGE, "usage", f"bad --monitor value: {exc}") from exc


def _opts(args) -> SolverOptions:
    return SolverOptions(tol=args.tol, max_iter=args.max_iter, seed=args.seed)


def cmd_init(args) -> int:
    batch = read_batch_csv(args.batch, args.outcome)
    spec = ModelSpec(args.family, args.outcome, batch.p)
    state = init_state(batch, spec, _opts(args))
    monitor = MonitorState.start(_parse_monitor(args.monitor)) if args.monitor else None
    save_state(args.state, state, monitor)
    delta, se = ate_estimate(state)
    print(f"initialised {spec.family.value}: delta={delta:.6g} se={se:.6g} n={state.n_total}")
    return EXIT_OK


def cmd_update(args) -> int:
    with locked(args.state):
        sf = load_state(args.state)
        if sf.monitor is not None and sf.monitor.terminated:
            raise CliError(
                EXIT_TERMINATED,
                "terminated",
                f"monitor stopped with decision {sf.monitor.decision.value}; refusing to update",
            )
        spec = sf.state.spec
        batch = read_batch_csv(args.batch, spec.outcome_type, spec.p, batch_index=sf.state.batch_count + 1)
        state = renew(sf.state, batch, _opts(args))
        save_state(args.state, state, sf.monitor)
    delta, se = ate_estimate(state)
    print(f"batch {state.batch_count}: delta={delta:.6g} se={se:.6g} n={state.n_total}")
    return EXIT_OK


REPORT_FIELDS = (
    "family",
    "outcome_type",
    "p",
    "delta",
    "se",
    "ci_lower",
    "ci_upper",
    "n_total",
    "batch_count",
    "condition_number",
    "monitor_decision",
    "monitor_analyses_done",
    "monitor_last_z",
)


def build_report(sf) -> dict:
    state = sf.state
    delta, se = ate_estimate(state)
    m = sf.monitor
    return {
        "family": state.spec.family.value,
        "outcome_type": state.spec.outcome_type.value,
        "p": state.spec.p,
        "delta": delta,
        "se": se,
        "ci_lower": delta - Z95 * se,
        "ci_upper": delta + Z95 * se,
        "n_total": state.n_total,
        "batch_count": state.batch_count,
        "condition_number": state.condition_number(),
        "monitor_decision": None if m is None else m.decision.value,
        "monitor_analyses_done": None if m is None else m.analyses_done,
        "monitor_last_z": None if m is None or not m.z_history else m.z_history[-1],
    }


def cmd_report(args) -> int:
    rep = build_report(load_state(args.state))
    if args.format == "json":
        print(json.dumps(rep, indent=2))
    elif args.format == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerow({k: "" if v is None else v for k, v in rep.items()})
        sys.stdout.write(buf.getvalue())
    else:
        print(f"family          {rep['family']} ({rep['outcome_type']}, p={rep['p']})")
        print(f"ATE estimate    {rep['delta']:.6g}")
        print(f"standard error  {rep['se']:.6g}")
        print(f"95% CI          [{rep['ci_lower']:.6g}, {rep['ci_upper']:.6g}]")
        print(f"N / batches     {rep['n_total']} / {rep['batch_count']}")
        print(f"cond(S)         {rep['condition_number']:.3g}")
        if rep["monitor_decision"] is not None:
            print(f"monitor         {rep['monitor_decision']} after {rep['monitor_analyses_done']} analyses")
    return EXIT_OK


def cmd_monitor(args) -> int:
    with locked(args.state):
        sf = load_state(args.state)
        if sf.monitor is None:
            raise CliError(EXIT_MONITOR, "monitor", "state file has no monitor block (use init --monitor)")
        if sf.monitor.terminated:
            raise CliError(EXIT_TERMINATED, "terminated", f"monitor already stopped: {sf.monitor.decision.value}")
        mon = monitor_step(sf.monitor, sf.state)
        save_state(args.state, sf.state, mon)
    k = mon.analyses_done
    print(f"analysis {k}/{mon.config.total_analyses}: Z={mon.z_history[-1]:.6g} "
          f"boundary={mon.boundaries[k - 1]:.6g} decision={mon.decision.value}")
    return {Decision.CONTINUE: EXIT_OK, Decision.REJECT: EXIT_REJECT, Decision.COMPLETE_ACCEPT: EXIT_ACCEPT}[mon.decision]


def _apply_overrides(cfg: SimConfig, items) -> SimConfig:
    changes = {}
    fields = SimConfig.__dataclass_fields__
    for item in items or ():
        key, _, value = item.partition("=")
        if key not in fields:
            raise CliError(EXIT_USAGE, "usage", f"unknown override {key!r}")
        current = getattr(cfg, key)
        if isinstance(current, bool):
            changes[key] = value.lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            changes[key] = int(value)
        elif isinstance(current, float) or key == "ate":
            changes[key] = None if value.lower() == "none" else float(value)
        else:
            changes[key] = value
    return replace(cfg, **changes)


def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = SimConfig(seed=args.seed, replications=args.replications)
    summary = {"scenario": args.scenario, "tables": []}

    def emit(name: str, table, cfg):
        (out / f"{name}.csv").write_text(table.to_csv())
        summary["tables"].append({"name": name, "config": _jsonable(asdict(cfg)), **json.loads(table.to_json())})

    if args.scenario == "1":
        for b in (10, 100, 1000):
            cfg = _apply_overrides(replace(base, n_batches=b, batch_size=100), args.override)
            emit(f"scenario1_b{b}", run_scenario(cfg), cfg)
        cfg = _apply_overrides(replace(base, n_batches=10, batch_size=100), args.override)
        _write_rows(out / "trajectory.csv", trajectory(cfg, Family.AIPTW))
    elif args.scenario == "2":
        for n in (1000, 200):
            cfg = _apply_overrides(replace(base, n_batches=10000 // n, batch_size=n), args.override)
            emit(f"scenario2_n{n}", run_scenario(cfg), cfg)
    elif args.scenario == "3":
        cfg = _apply_overrides(replace(base, n_batches=10, batch_size=1000, interactions=False), args.override)
        mon = MonitorConfig(cfg.n_batches, 0.05, args.spending)
        rows = run_sequential_experiment(cfg, mon, [0.0, 0.02, 0.04, 0.06, 0.08, 0.10, 0.12])
        recs = [{**asdict(r), "rejection_rate": r.rejection_rate} for r in rows]
        _write_rows(out / "sequential.csv", recs)
        summary["sequential"] = recs
    else:
        cfg = _apply_overrides(replace(base, n_batches=100, batch_size=100,
                                       stream_bias=StreamBias.COVARIATE_SORTED), args.override)
        res = run_equivalence(cfg, tuple(Family))
        recs = [{"family": k, "replications": len(v.online_delta), "failures": v.failures,
                 "fraction_within_0.1se": v.fraction_within(0.1),
                 "max_standardized_gap": float(v.standardized_gap.max()) if len(v.online_delta) else math.nan}
                for k, v in res.items()]
        _write_rows(out / "biased_equivalence.csv", recs)
        summary["equivalence"] = recs
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str))
    print(f"wrote results to {out}")
    return EXIT_OK


def _jsonable(d: dict) -> dict:
    return {k: (v.value if hasattr(v, "value") else v) for k, v in d.items()}


def _write_rows(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_oracle(args) -> int:
    batches = [read_batch_csv(path, args.outcome, batch_index=i) for i, path in enumerate(args.batches, start=1)]
    spec = ModelSpec(args.family, args.outcome, batches[0].p)
    fit = solve_offline(batches, spec, _opts(args))
    rep = {
        "family": spec.family.value,
        "delta": fit.delta,
        "se": fit.se,
        "ci_lower": fit.delta - Z95 * fit.se,
        "ci_upper": fit.delta + Z95 * fit.se,
        "n_total": sum(b.n for b in batches),
        "iterations": fit.iterations,
    }
    print(json.dumps(rep, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamcausal", description="Online ATE estimation and sequential monitoring")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def solver_args(p):
        p.add_argument("--tol", type=float, default=1e-8)
        p.add_argument("--max-iter", type=int, default=50)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("init", help="fit the first batch and write a state file")
    p.add_argument("--family", required=True, choices=[f.value for f in Family])
    p.add_argument("--outcome", required=True, choices=[o.value for o in OutcomeType])
    p.add_argument("--batch", required=True)
    p.add_argument("--state", required=True)
    p.add_argument("--monitor", help="T,alpha,spending (spending: pocock or obrien_fleming)")
    solver_args(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("update", help="absorb one batch into a state file")
    p.add_argument("--state", required=True)
    p.add_argument("--batch", required=True)
    solver_args(p)
    p.set_defaults(func=cmd_update)

    p = sub.add_parser("report", help="print the current estimate")
    p.add_argument("--state", required=True)
    p.add_argument("--format", choices=("text", "json", "csv"), default="text")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("monitor", help="run one interim analysis")
    p.add_argument("--state", required=True)
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("simulate", help="run the simulation studies")
    p.add_argument("--scenario", required=True, choices=("1", "2", "3", "biased"))
    p.add_argument("--out", required=True)
    p.add_argument("--replications", type=int, default=500)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--spending", default="obrien_fleming", choices=("pocock", "obrien_fleming"))
    p.add_argument("--override", action="append", metavar="KEY=VALUE", help="override a SimConfig field")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("oracle", help="offline pooled estimate over several batch files")
    p.add_argument("--batches", nargs="+", required=True)
    p.add_argument("--family", required=True, choices=[f.value for f in Family])
    p.add_argument("--outcome", default="continuous", choices=[o.value for o in OutcomeType])
    solver_args(p)
    p.set_defaults(func=cmd_oracle)
    return parser


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc))
    except (BatchFormatError, FileNotFoundError) as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    except StateFileError as exc:
        return _fail(EXIT_STATE, "state", str(exc))
    except MonitorError as exc:
        return _fail(EXIT_MONITOR, "monitor", str(exc))
    except (EngineError, ModelError) as exc:
        return _fail(EXIT_ENGINE, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
