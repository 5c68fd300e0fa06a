"""Batch CSV ingestion and bit-exact persistence of engine and monitor state.

State files are JSON.  Every real number is written as a C99 hex-float
string so a write/read cycle reproduces it bit for bit.  A SHA-256 checksum
over the canonical payload guards against corruption and hand edits.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .engine import OnlineState
from .model import DataBatch, ModelError, ModelSpec, OutcomeType
from .sequential import Decision, MonitorConfig, MonitorState

FORMAT_VERSION = 1


class StateFileError(ValueError):
    pass


class BatchFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


# --------------------------------------------------------------------------- CSV


def _check_header(header: list[str], p: int | None) -> int:
    q = len(header) - 2
    expected = ["y", "a"] + [f"x{k}" for k in range(1, q + 1)]
    if [h.strip() for h in header] != expected:
        raise BatchFormatError(f"header must be y,a,x1,...,xq; got {','.join(header)}", 1)
    if p is not None and q + 1 != p:
        raise BatchFormatError(f"file has {q} covariates but the model expects {p - 1}", 1)
    return q


def _parse_row(row: list[str], lineno: int, q: int, binary: bool) -> tuple[float, float, list[float]]:
    if len(row) != q + 2:
        raise BatchFormatError(f"expected {q + 2} fields, got {len(row)}", lineno)
    try:
        vals = [float(v) for v in row]
    except ValueError as exc:
        raise BatchFormatError(f"non-numeric field ({exc})", lineno) from None
    if not all(math.isfinite(v) for v in vals):
        raise BatchFormatError("non-finite value", lineno)
    y, a = vals[0], vals[1]
    if a not in (0.0, 1.0):
        raise BatchFormatError(f"treatment a must be 0 or 1, got {row[1]}", lineno)
    if binary and y not in (0.0, 1.0):
        raise BatchFormatError(f"binary outcome y must be 0 or 1, got {row[0]}", lineno)
    return y, a, vals[2:]


def iter_batch_csv(path, chunk_size: int, outcome_type: OutcomeType | str | None = None,
                   p: int | None = None, first_index: int = 1) -> Iterator[DataBatch]:
    """Stream a batch file in chunks of ``chunk_size`` rows."""
    binary = outcome_type is not None and OutcomeType(outcome_type) is OutcomeType.BINARY
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise BatchFormatError(f"{path}: empty file")
        q = _check_header(header, p)
        idx = first_index
        ys, as_, xs = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            y, a, x = _parse_row(row, lineno, q, binary)
            ys.append(y)
            as_.append(a)
            xs.append([1.0] + x)
            if len(ys) == chunk_size:
                yield DataBatch(idx, ys, as_, np.array(xs).reshape(len(ys), q + 1))
                idx += 1
                ys, as_, xs = [], [], []
        if ys:
            yield DataBatch(idx, ys, as_, np.array(xs).reshape(len(ys), q + 1))
        elif idx == first_index:
            raise BatchFormatError(f"{path}: no data rows")


def read_batch_csv(path, outcome_type: OutcomeType | str | None = None, p: int | None = None,
                   batch_index: int = 1) -> DataBatch:
    """Read a whole batch file (``y,a,x1..xq``; the intercept is added here)."""
    chunks = list(iter_batch_csv(path, 2**62, outcome_type, p, batch_index))
    return chunks[0]


def write_batch_csv(path, batch: DataBatch) -> None:
    q = batch.p - 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y", "a"] + [f"x{k}" for k in range(1, q + 1)])
        for y, a, x in zip(batch.y, batch.a, batch.x):
            w.writerow([repr(float(y)), int(a)] + [repr(float(v)) for v in x[1:]])


# --------------------------------------------------------------------------- state


def _hex(values) -> list[str]:
    return [float(v).hex() for v in np.asarray(values, dtype=float).ravel()]


def _unhex(items, shape=None) -> np.ndarray:
    arr = np.array([float.fromhex(s) for s in items], dtype=float)
    return arr if shape is None else arr.reshape(shape)


def _checksum(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


@dataclass(frozen=True)
class StateFile:
    state: OnlineState
    monitor: MonitorState | None = None


def _monitor_payload(m: MonitorState) -> dict:
    c = m.config
    return {
        "config": {
            "total_analyses": c.total_analyses,
            "alpha": float(c.alpha).hex(),
            "spending": c.spending.value,
            "null_delta": float(c.null_delta).hex(),
            "info_fractions": _hex(c.info_fractions),
        },
        "boundaries": _hex(m.boundaries),
        "analyses_done": m.analyses_done,
        "z_history": _hex(m.z_history),
        "decision": m.decision.value,
    }


def _monitor_from(payload: dict) -> MonitorState:
    c = payload["config"]
    config = MonitorConfig(
        total_analyses=int(c["total_analyses"]),
        alpha=float.fromhex(c["alpha"]),
        spending=c["spending"],
        null_delta=float.fromhex(c["null_delta"]),
        info_fractions=tuple(_unhex(c["info_fractions"])),
    )
    return MonitorState(
        config,
        boundaries=tuple(_unhex(payload["boundaries"])),
        analyses_done=int(payload["analyses_done"]),
        z_history=tuple(_unhex(payload["z_history"])),
        decision=Decision(payload["decision"]),
    )


def to_payload(state: OnlineState, monitor: MonitorState | None = None) -> dict:
    spec = state.spec
    payload = {
        "format_version": FORMAT_VERSION,
        "spec": {"family": spec.family.value, "outcome_type": spec.outcome_type.value, "p": spec.p},
        "theta": _hex(state.theta),
        "s_cum": _hex(state.s_cum),
        "m_cum": _hex(state.m_cum),
        "n_total": int(state.n_total),
        "batch_count": int(state.batch_count),
        "monitor": None if monitor is None else _monitor_payload(monitor),
    }
    payload["checksum"] = _checksum(payload)
    return payload


def from_payload(payload: dict) -> StateFile:
    try:
        version = payload["format_version"]
        if version != FORMAT_VERSION:
            raise StateFileError(f"unsupported state format version {version}")
        body = {k: v for k, v in payload.items() if k != "checksum"}
        if payload.get("checksum") != _checksum(body):
            raise StateFileError("state file checksum mismatch; refusing to load")
        s = payload["spec"]
        spec = ModelSpec(s["family"], s["outcome_type"], int(s["p"]))
        d = spec.dim
        state = OnlineState(
            spec,
            _unhex(payload["theta"]),
            _unhex(payload["s_cum"], (d, d)),
            _unhex(payload["m_cum"], (d, d)),
            int(payload["n_total"]),
            int(payload["batch_count"]),
        )
        monitor = None if payload.get("monitor") is None else _monitor_from(payload["monitor"])
    except StateFileError:
        raise
    except (KeyError, TypeError, ValueError, ModelError) as exc:
        raise StateFileError(f"malformed state file: {exc}") from exc
    return StateFile(state, monitor)


def dumps_state(state: OnlineState, monitor: MonitorState | None = None) -> str:
    return json.dumps(to_payload(state, monitor), indent=1) + "\n"


def loads_state(text: str) -> StateFile:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise StateFileError(f"state file is not valid JSON: {exc}") from exc
    return from_payload(payload)


def load_state(path) -> StateFile:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise StateFileError(f"cannot read state file: {exc}") from exc
    return loads_state(text)


def save_state(path, state: OnlineState, monitor: MonitorState | None = None) -> None:
    """Atomically replace ``path``: write a temp file, fsync, rename."""
    path = Path(path)
    text = dumps_state(state, monitor)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise
    with contextlib.suppress(OSError):
        dfd = os.open(path.parent, os.O_RDONLY)
        try:
            os.fsync(dfd)
        finally:
            os.close(dfd)


@contextlib.contextmanager
def locked(path):
    """Advisory exclusive lock held for the duration of an update."""
    import fcntl

    lock_path = Path(str(path) + ".lock")
    with open(lock_path, "a") as fh:
        fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh.fileno(), fcntl.LOCK_UN)
