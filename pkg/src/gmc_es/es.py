"""Model-free extremum seeking on top of the safe gradient flow (GMC-ES).

The controller only measures ``f``, ``g`` and ``h`` at the dithered point
``theta = theta_hat + S(t)``. Gradients are estimated by demodulating the
high-passed measurements with ``M(t)``, and the estimates replace the true
data in the flow QP.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import qp, sim
from .problem import ProblemSpec, evaluate, gradients

# pairwise distinct integers: every dither shares the common period 2*pi
FREQUENCY_LADDER = (10.0, 13.0, 17.0, 19.0, 23.0, 29.0, 31.0, 37.0, 41.0, 43.0, 47.0, 53.0)

MEASURED_PLUS_PROBE = "measured_plus_probe"
WARMUP = "warmup"


def default_omegas(n: int, base: float = 1.0) -> tuple[float, ...]:
    if n > len(FREQUENCY_LADDER):
        raise ValueError(f"no default dither frequencies for n={n}; pass omegas explicitly")
    return tuple(base * w for w in FREQUENCY_LADDER[:n])


@dataclass(frozen=True)
class EsParams:
    k: float = 0.03
    omega_f: float = 0.5
    alpha: float = 1.0
    a: float = 0.1
    omegas: tuple[float, ...] = (10.0, 13.0)
    dt: float = 0.048
    horizon: float = 5000.0
    init_scheme: str = MEASURED_PLUS_PROBE
    warmup_time: float = 0.0
    qp_tol: float = 1e-9
    qp_max_iter: Optional[int] = None
    max_qp_failures: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "omegas", tuple(float(w) for w in self.omegas))
        for name in ("omega_f", "alpha", "a", "dt", "horizon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.k < 0:
            raise ValueError(f"k must be non-negative, got {self.k}")
        if not self.omegas or min(self.omegas) <= 0:
            raise ValueError("dither frequencies must be positive")
        if len(set(self.omegas)) != len(self.omegas):
            raise ValueError(f"dither frequencies must be pairwise distinct, got {self.omegas}")
        if self.init_scheme not in (MEASURED_PLUS_PROBE, WARMUP):
            raise ValueError(f"unknown init_scheme {self.init_scheme!r}")
        if self.warmup_time < 0:
            raise ValueError("warmup_time must be non-negative")
        if self.dt * max(self.omegas) > 0.7:
            warnings.warn(
                f"dt*max(omega) = {self.dt * max(self.omegas):.3g} > 0.7; Euler will poorly resolve the dither",
                RuntimeWarning,
                stacklevel=3,
            )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["omegas"] = list(self.omegas)
        return out


class Measurement:
    """Evaluation-only view of a problem, counting every query.

    This is the only handle the controller dynamics receive, so gradient
    information cannot leak into the loop.
    """

    def __init__(self, problem: ProblemSpec):
        self._evaluate = lambda theta: evaluate(problem, theta)
        self.n, self.m, self.l = problem.n, problem.m, problem.l
        self.name = problem.name
        self.calls = 0

    def __call__(self, theta) -> tuple[float, np.ndarray, np.ndarray]:
        self.calls += 1
        f, cv = self._evaluate(theta)
        return f, cv.g, cv.h


def _plant(problem) -> "Measurement":
    return Measurement(problem) if isinstance(problem, ProblemSpec) else problem


@dataclass
class EsState:
    theta_hat: np.ndarray
    G_f: np.ndarray
    G_g: np.ndarray
    G_h: np.ndarray
    eta_f: float
    eta_g: np.ndarray
    eta_h: np.ndarray
    t: float = 0.0

    @property
    def n(self) -> int:
        return self.theta_hat.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate((self.theta_hat, self.G_f, self.G_g.ravel(), self.G_h.ravel(),
                               [self.eta_f], self.eta_g, self.eta_h))

    @classmethod
    def from_vector(cls, x: np.ndarray, n: int, m: int, l: int, t: float = 0.0) -> "EsState":  # noqa: E741
        i = 0
        theta_hat = x[i:i + n]; i += n
        G_f = x[i:i + n]; i += n
        G_g = x[i:i + m * n].reshape(m, n); i += m * n
        G_h = x[i:i + l * n].reshape(l, n); i += l * n
        eta_f = float(x[i]); i += 1
        eta_g = x[i:i + m]; i += m
        eta_h = x[i:i + l]
        return cls(theta_hat, G_f, G_g, G_h, eta_f, eta_g, eta_h, t)

    @classmethod
    def size(cls, n: int, m: int, l: int) -> int:  # noqa: E741
        return 2 * n + (m + l) * n + 1 + m + l


def dither(t: float, params: EsParams) -> tuple[np.ndarray, np.ndarray]:
    """Perturbation ``S_i = a sin(w_i t)`` and demodulation ``M_i = (2/a) sin(w_i t)``."""
    s = np.sin(np.asarray(params.omegas) * t)
    return params.a * s, (2.0 / params.a) * s


def approx_qp(state: EsState, params: EsParams) -> qp.QpInstance:
    """The flow QP with every gradient and constraint value replaced by its estimate."""
    return qp.QpInstance(d=state.G_f, A=state.G_g, b=-params.alpha * state.eta_g,
                         C=state.G_h, e=-params.alpha * state.eta_h)


@dataclass
class EsStep:
    """Side information from one right-hand-side evaluation."""

    theta: np.ndarray
    f: float
    g: np.ndarray
    h: np.ndarray
    solution: qp.QpSolution
    qp_failed: bool = False


def es_rhs(plant, state: EsState, params: EsParams, k: Optional[float] = None) -> tuple[EsState, EsStep]:
    """Time derivative of the controller state.

    Measures the plant once at ``theta_hat + S(t)``. If the estimated-data QP
    is infeasible the estimate is frozen for this step (``theta_hat' = 0``)
    while filters and estimators keep running. ``k`` overrides ``params.k``
    (used to hold the estimate during warm-up).
    """
    plant = _plant(plant)
    S, M = dither(state.t, params)
    theta = state.theta_hat + S
    f, g, h = plant(theta)
    wf = params.omega_f
    sol = qp.solve(approx_qp(state, params), tol=params.qp_tol, max_iter=params.qp_max_iter)
    gain = params.k if k is None else k
    failed = not sol.ok
    dtheta = np.zeros(state.n) if failed else (gain * wf) * sol.xi
    deriv = EsState(
        theta_hat=dtheta,
        G_f=-wf * (state.G_f - (f - state.eta_f) * M),
        G_g=-wf * (state.G_g - np.outer(g - state.eta_g, M)),
        G_h=-wf * (state.G_h - np.outer(h - state.eta_h, M)),
        eta_f=-wf * (state.eta_f - f),
        eta_g=-wf * (state.eta_g - g),
        eta_h=-wf * (state.eta_h - h),
        t=1.0,
    )
    return deriv, EsStep(theta=theta, f=f, g=g, h=h, solution=sol, qp_failed=failed)


def initialize(problem, theta_hat0, params: EsParams, t0: float = 0.0) -> EsState:
    """Initial controller state built from measurements only.

    ``measured_plus_probe`` sets the filters to the measured values at
    ``theta_hat0 + S(t0)`` and the gradient estimates to central differences
    with step ``a/2``. ``warmup`` starts the gradient estimates at zero.
    """
    plant = _plant(problem)
    n, m, l = plant.n, plant.m, plant.l
    theta_hat0 = np.asarray(theta_hat0, dtype=float).reshape(n)
    if len(params.omegas) != n:
        raise ValueError(f"need {n} dither frequencies, got {len(params.omegas)}")
    S, _ = dither(t0, params)
    f0, g0, h0 = plant(theta_hat0 + S)
    G_f, G_g, G_h = np.zeros(n), np.zeros((m, n)), np.zeros((l, n))
    if params.init_scheme == MEASURED_PLUS_PROBE:
        step = params.a / 2.0
        for i in range(n):
            e = np.zeros(n)
            e[i] = step
            fp, gp, hp = plant(theta_hat0 + e)
            fm, gm, hm = plant(theta_hat0 - e)
            G_f[i] = (fp - fm) / (2.0 * step)
            G_g[:, i] = (gp - gm) / (2.0 * step)
            G_h[:, i] = (hp - hm) / (2.0 * step)
    return EsState(theta_hat=theta_hat0.copy(), G_f=G_f, G_g=G_g, G_h=G_h,
                   eta_f=float(f0), eta_g=np.array(g0, dtype=float), eta_h=np.array(h0, dtype=float), t=t0)


def run(problem: ProblemSpec, theta_hat0, params: EsParams = EsParams(), epsilon: float = 0.1,
        state0: Optional[EsState] = None) -> sim.Trajectory:
    """Euler-integrate the controller from ``theta_hat0``.

    The trajectory state is the flattened :class:`EsState`; ``states[:, :n]``
    is ``theta_hat``. Per-record diagnostics include the probe point
    ``theta``, measured ``f``, ``g``, ``h``, the filters, the QP step and,
    when the problem has analytic gradients, ``grad_error`` =
    ``||G_f - grad f(theta_hat)||`` (diagnostic only; never fed back).
    """
    from .analysis import exact_penalty

    plant = Measurement(problem)
    n, m, l = problem.n, problem.m, problem.l
    if state0 is None:
        state0 = initialize(plant, theta_hat0, params)
    t0 = state0.t
    hold_until = t0 + (params.warmup_time if params.init_scheme == WARMUP else 0.0)
    failures = [0]

    def rhs(t, x):
        state = EsState.from_vector(x, n, m, l, t)
        k = 0.0 if t < hold_until else None
        deriv, step = es_rhs(plant, state, params, k=k)
        if step.qp_failed:
            failures[0] += 1
            if failures[0] >= params.max_qp_failures:
                raise sim.IntegrationHalt(sim.ABORTED, f"{failures[0]} consecutive infeasible QPs", x)
        else:
            failures[0] = 0
        return deriv.to_vector(), (state, step)

    def record(t, x, aux):
        state, step = aux
        sol = step.solution
        diag = {
            "theta": step.theta,
            "f": step.f,
            "g": step.g,
            "h": step.h,
            "eta_f": state.eta_f,
            "eta_g": state.eta_g,
            "eta_h": state.eta_h,
            "V_eps": exact_penalty(step.f, step.g, step.h, epsilon),
            "xi": sol.xi,
            "norm_G_alpha": math.sqrt(sol.xi @ sol.xi) if sol.ok else math.nan,
            "u": sol.u,
            "v": sol.v,
            "qp_status": sim.QP_STATUS_CODES[sol.status],
        }
        if problem.has_analytic_gradients:
            df, _, _ = gradients(problem, state.theta_hat)
            err = state.G_f - df
            diag["grad_error"] = math.sqrt(err @ err)
        return diag

    meta = {
        "kind": "es",
        "problem": problem.name,
        "n": n,
        "m": m,
        "l": l,
        "theta_hat0": [float(x) for x in state0.theta_hat],
        "params": params.to_dict(),
        "epsilon": epsilon,
    }
    return sim.integrate(rhs, state0.to_vector(), params.dt, params.horizon, "euler",
                         recorder=record, t0=t0, metadata=meta)


@dataclass
class EsSummary:
    final_theta_hat: np.ndarray
    error: float
    max_g: np.ndarray = field(default_factory=lambda: np.zeros(0))
    max_abs_h: np.ndarray = field(default_factory=lambda: np.zeros(0))
    qp_failures: int = 0


def summarize(traj: sim.Trajectory, theta_star=None) -> EsSummary:
    n = int(traj.metadata["n"])
    final = traj.states[-1, :n].copy()
    err = math.nan if theta_star is None else float(np.linalg.norm(final - np.asarray(theta_star)))
    g = traj.diagnostics.get("g")
    h = traj.diagnostics.get("h")
    status = traj.diagnostics.get("qp_status")
    return EsSummary(
        final_theta_hat=final,
        error=err,
        max_g=g.max(axis=0) if g is not None and g.size else np.zeros(0),
        max_abs_h=np.abs(h).max(axis=0) if h is not None and h.size else np.zeros(0),
        qp_failures=int(np.sum(status != 0)) if status is not None else 0,
    )
