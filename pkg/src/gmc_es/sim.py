"""Fixed-step integration and trajectory recording."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

COMPLETED = "completed"
CONVERGED = "converged"
QP_FAILURE = "qp_failure"
ABORTED = "aborted"

QP_STATUS_CODES = {"optimal": 0, "infeasible": 1, "max_iter": 2}
QP_STATUS_NAMES = {v: k for k, v in QP_STATUS_CODES.items()}


class IntegrationHalt(Exception):
    """Raised from a right-hand side or recorder to stop a run.

    ``state`` is the offending state, kept on the trajectory for diagnosis.
    """

    def __init__(self, status: str, message: str = "", state=None):
        super().__init__(message or status)
        self.status = status
        self.state = None if state is None else np.asarray(state, dtype=float).copy()


@dataclass
class Trajectory:
    """Time-indexed states plus named per-record diagnostics.

    Diagnostics are stored column-wise: ``diagnostics[key][i]`` belongs to
    record ``i``.
    """

    times: np.ndarray
    states: np.ndarray
    diagnostics: dict[str, np.ndarray] = field(default_factory=dict)
    status: str = COMPLETED
    metadata: dict[str, Any] = field(default_factory=dict)
    message: str = ""
    failure_state: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.times.size

    def record(self, i: int) -> dict[str, Any]:
        out = {"t": float(self.times[i]), "state": self.states[i]}
        for key, col in self.diagnostics.items():
            out[key] = col[i]
        return out

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


class Recorder:
    """Collects records into growable column buffers."""

    def __init__(self, capacity: int = 1024):
        self._capacity = max(int(capacity), 1)
        self._n = 0
        self._times = np.empty(self._capacity)
        self._states: Optional[np.ndarray] = None
        self._cols: dict[str, np.ndarray] = {}

    def _grow(self):
        self._capacity *= 2
        self._times = np.resize(self._times, self._capacity)
        self._states = np.resize(self._states, (self._capacity,) + self._states.shape[1:])
        for key, col in self._cols.items():
            self._cols[key] = np.resize(col, (self._capacity,) + col.shape[1:])

    def append(self, t: float, x: np.ndarray, diag: Optional[dict[str, Any]] = None):
        if self._states is None:
            self._states = np.empty((self._capacity, x.size))
        if self._n == self._capacity:
            self._grow()
        i = self._n
        self._times[i] = t
        self._states[i] = x
        for key, value in (diag or {}).items():
            col = self._cols.get(key)
            if col is None:
                arr = np.asarray(value, dtype=float)
                col = np.full((self._capacity,) + arr.shape, np.nan)
                self._cols[key] = col
            col[i] = value
        self._n += 1

    def finish(self, **kwargs) -> Trajectory:
        n = self._n
        dim = 0 if self._states is None else self._states.shape[1]
        states = np.empty((0, dim)) if self._states is None else self._states[:n].copy()
        return Trajectory(
            times=self._times[:n].copy(),
            states=states,
            diagnostics={k: v[:n].copy() for k, v in self._cols.items()},
            **kwargs,
        )


RhsFn = Callable[[float, np.ndarray], tuple[np.ndarray, Any]]
RecordFn = Callable[[float, np.ndarray, Any], Optional[dict[str, Any]]]
StopFn = Callable[[float, np.ndarray, Any], Optional[str]]


def num_steps(dt: float, horizon: float) -> int:
    # round() so that horizon/dt = 99.99999 still means 100 steps
    k = round(horizon / dt)
    return int(k) if abs(k * dt - horizon) <= 1e-9 * max(horizon, 1.0) else int(math.floor(horizon / dt))


def integrate(
    rhs: RhsFn,
    x0,
    dt: float,
    horizon: float,
    method: str = "euler",
    recorder: Optional[RecordFn] = None,
    stop: Optional[StopFn] = None,
    t0: float = 0.0,
    metadata: Optional[dict[str, Any]] = None,
) -> Trajectory:
    """Integrate ``x' = rhs(t, x)`` with a fixed step.

    ``rhs`` returns ``(dx, aux)``. The first-stage ``aux`` of each step is
    handed to ``recorder(t, x, aux)``, whose dict becomes that record's
    diagnostics, so diagnostics come from the same evaluation that drives
    the step. ``stop`` may return a status to end the run early. A
    non-finite state ends the run with status ``aborted``.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if method not in ("euler", "rk4"):
        raise ValueError(f"unknown method {method!r}")
    x = np.array(x0, dtype=float).reshape(-1)
    steps = num_steps(dt, horizon)
    rec = Recorder(steps + 1)
    status, message, bad = COMPLETED, "", None
    t = t0
    for k in range(steps + 1):
        t = t0 + k * dt
        if not np.all(np.isfinite(x)):
            status, message, bad = ABORTED, f"non-finite state at t={t:g}", x.copy()
            break
        try:
            k1, aux = rhs(t, x)
            rec.append(t, x, recorder(t, x, aux) if recorder is not None else None)
            if stop is not None:
                reason = stop(t, x, aux)
                if reason:
                    status = reason
                    break
            if k == steps:
                break
            if method == "euler":
                x = x + dt * k1
            else:
                k2, _ = rhs(t + 0.5 * dt, x + 0.5 * dt * k1)
                k3, _ = rhs(t + 0.5 * dt, x + 0.5 * dt * k2)
                k4, _ = rhs(t + dt, x + dt * k3)
                x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        except IntegrationHalt as halt:
            status, message = halt.status, str(halt)
            bad = halt.state if halt.state is not None else x.copy()
            break
    meta = dict(metadata or {})
    meta.setdefault("dt", dt)
    meta.setdefault("horizon", horizon)
    meta.setdefault("method", method)
    return rec.finish(status=status, metadata=meta, message=message, failure_state=bad)


def decimate(traj: Trajectory, stride: int) -> Trajectory:
    """Keep every ``stride``-th record and always the last one."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n = len(traj)
    if n == 0:
        return traj
    idx = list(range(0, n, stride))
    if idx[-1] != n - 1:
        idx.append(n - 1)
    idx = np.asarray(idx)
    return Trajectory(
        times=traj.times[idx],
        states=traj.states[idx],
        diagnostics={k: v[idx] for k, v in traj.diagnostics.items()},
        status=traj.status,
        metadata=dict(traj.metadata),
        message=traj.message,
        failure_state=traj.failure_state,
    )


# -- CSV ----------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def csv_columns(n: int, m: int, l: int, es: bool = False) -> list[str]:  # noqa: E741
    cols = ["t"] + [f"theta_{i + 1}" for i in range(n)]
    if es:
        cols += [f"theta_hat_{i + 1}" for i in range(n)]
    cols += [f"g_{i + 1}" for i in range(m)] + [f"h_{j + 1}" for j in range(l)]
    cols += ["V_eps", "norm_G_alpha"]
    cols += [f"u_{i + 1}" for i in range(m)] + [f"v_{j + 1}" for j in range(l)]
    cols.append("qp_status")
    return cols


def to_csv(traj: Trajectory) -> str:
    """Serialize a trajectory with 17 significant digits (lossless).

    The dimensions come from ``metadata`` (``n``, ``m``, ``l``, ``kind``).
    For exact-flow runs the state is theta; for ES runs ``theta`` is the
    probe point and ``theta_hat`` the estimate.
    """
    meta = traj.metadata
    n, m, l = int(meta.get("n", traj.states.shape[1] if traj.states.ndim == 2 else 0)), int(meta.get("m", 0)), int(meta.get("l", 0))
    es = meta.get("kind") == "es"
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(csv_columns(n, m, l, es))
    D = traj.diagnostics

    def vec(key, i, size):
        if size == 0:
            return []
        col = D.get(key)
        if col is None:
            return ["nan"] * size
        return [_fmt(x) for x in np.atleast_1d(col[i])]

    for i in range(len(traj)):
        row = [_fmt(traj.times[i])]
        if es:
            row += vec("theta", i, n)
            row += [_fmt(x) for x in traj.states[i, :n]]
        else:
            row += [_fmt(x) for x in traj.states[i, :n]]
        row += vec("g", i, m) + vec("h", i, l)
        row += vec("V_eps", i, 1) + vec("norm_G_alpha", i, 1)
        row += vec("u", i, m) + vec("v", i, l)
        code = D.get("qp_status")
        row.append(QP_STATUS_NAMES.get(int(code[i]), "unknown") if code is not None and np.isfinite(code[i]) else "")
        writer.writerow(row)
    return out.getvalue()


def read_csv(text: str) -> dict[str, np.ndarray]:
    """Parse :func:`to_csv` output back into named float columns."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    rows = list(reader)
    cols: dict[str, np.ndarray] = {}
    for j, name in enumerate(header):
        if name == "qp_status":
            cols[name] = np.array([r[j] for r in rows], dtype=object)
        else:
            cols[name] = np.array([float(r[j]) for r in rows], dtype=float)
    return cols


def metadata_json(traj: Trajectory) -> str:
    meta = dict(traj.metadata)
    meta["status"] = traj.status
    meta["records"] = len(traj)
    if traj.message:
        meta["message"] = traj.message
    if traj.failure_state is not None:
        meta["failure_state"] = [float(x) for x in traj.failure_state]
    return json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
