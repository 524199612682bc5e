"""Exact safe gradient flow ``theta' = G_alpha(theta)``.

``G_alpha(theta)`` is the minimizer of ``0.5 * ||xi + grad f(theta)||^2``
subject to the linearized, alpha-relaxed constraints
``Jg xi <= -alpha g(theta)`` and ``Jh xi = -alpha h(theta)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import qp, sim
from .problem import ProblemSpec, evaluate, gradients


class QpFailure(RuntimeError):
    """The flow QP could not be solved at ``theta``."""

    def __init__(self, theta, status: str):
        super().__init__(f"QP {status} at theta={np.array2string(np.asarray(theta), precision=6)}")
        self.theta = np.asarray(theta, dtype=float)
        self.status = status


@dataclass(frozen=True)
class FlowParams:
    alpha: float = 1.0
    dt: float = 0.01
    horizon: float = 20.0
    method: str = "rk4"
    gradient_source: str = "analytic"
    epsilon: float = 0.1
    stop_tol: float = 1e-8
    qp_tol: float = 1e-9

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.horizon >= self.dt:
            raise ValueError(f"horizon ({self.horizon}) must be at least dt ({self.dt})")
        if self.method not in ("euler", "rk4"):
            raise ValueError(f"method must be 'euler' or 'rk4', got {self.method!r}")
        if self.gradient_source not in ("analytic", "finite_difference"):
            raise ValueError(f"unknown gradient source {self.gradient_source!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def flow_qp(problem: ProblemSpec, theta, alpha: float, source: str = "analytic"):
    """Assemble the flow QP at ``theta``; returns ``(instance, f, constraint values)``."""
    f, cv = evaluate(problem, theta)
    df, Jg, Jh = gradients(problem, theta, source)
    inst = qp.QpInstance(d=df, A=Jg, b=-alpha * cv.g, C=Jh, e=-alpha * cv.h)
    return inst, f, cv


def g_alpha(problem: ProblemSpec, theta, alpha: float = 1.0, source: str = "analytic",
            tol: float = 1e-9) -> qp.QpSolution:
    """Solve the flow QP; ``.xi`` of the result is the flow velocity."""
    inst, _, _ = flow_qp(problem, theta, alpha, source)
    return qp.solve(inst, tol=tol)


def equilibrium_residual(problem: ProblemSpec, theta, alpha: float = 1.0, source: str = "analytic") -> float:
    sol = g_alpha(problem, theta, alpha, source)
    if not sol.ok:
        raise QpFailure(theta, sol.status)
    return float(np.linalg.norm(sol.xi))


def integrate(problem: ProblemSpec, theta0, params: FlowParams = FlowParams()) -> sim.Trajectory:
    """Integrate the exact flow from ``theta0``.

    Each record carries f, g, h, V_eps (at ``params.epsilon``), the flow
    speed ``norm_G_alpha`` and the multipliers from the QP that produced the
    step. The run stops with status ``converged`` once the speed drops to
    ``params.stop_tol`` and with ``qp_failure`` if a QP cannot be solved.
    """
    from .analysis import exact_penalty

    theta0 = np.asarray(theta0, dtype=float)
    if theta0.shape != (problem.n,) or not np.all(np.isfinite(theta0)):
        raise ValueError(f"theta0 must be a finite vector of length {problem.n}")
    alpha, eps = params.alpha, params.epsilon

    def rhs(t, theta):
        inst, f, cv = flow_qp(problem, theta, alpha, params.gradient_source)
        sol = qp.solve(inst, tol=params.qp_tol)
        if not sol.ok:
            raise sim.IntegrationHalt(sim.QP_FAILURE, str(QpFailure(theta, sol.status)), theta)
        return sol.xi, (sol, f, cv)

    def record(t, theta, aux):
        sol, f, cv = aux
        return {
            "f": f,
            "g": cv.g,
            "h": cv.h,
            "V_eps": exact_penalty(f, cv.g, cv.h, eps),
            "norm_G_alpha": float(np.linalg.norm(sol.xi)),
            "xi": sol.xi,
            "u": sol.u,
            "v": sol.v,
            "qp_status": sim.QP_STATUS_CODES[sol.status],
        }

    def stop(t, theta, aux):
        return sim.CONVERGED if np.linalg.norm(aux[0].xi) <= params.stop_tol else None

    meta = {
        "kind": "exact",
        "problem": problem.name,
        "n": problem.n,
        "m": problem.m,
        "l": problem.l,
        "theta0": theta0.tolist(),
        "params": params.to_dict(),
    }
    return sim.integrate(rhs, theta0, params.dt, params.horizon, params.method,
                         recorder=record, stop=stop, metadata=meta)


@dataclass
class InvarianceReport:
    ok: bool
    worst_g_margin: float
    worst_h_margin: float
    violations: int


def check_invariance(traj: sim.Trajectory, alpha: float = 1.0, tol: float = 1e-3) -> InvarianceReport:
    """Check the exponential constraint envelopes along a trajectory.

    Requires ``g_i(t) <= max(g_i(0), 0) exp(-alpha t) + tol`` and
    ``|h_j(t)| <= |h_j(0)| exp(-alpha t) + tol``; margins are
    ``envelope - value`` (negative means the envelope was exceeded).
    """
    if len(traj) == 0:
        return InvarianceReport(True, np.inf, np.inf, 0)
    t = traj.times - traj.times[0]
    decay = np.exp(-alpha * t)[:, None]
    worst_g = worst_h = np.inf
    violations = 0
    g = traj.diagnostics.get("g")
    if g is not None and g.ndim == 2 and g.shape[1]:
        margin = np.maximum(g[0], 0.0)[None, :] * decay - g
        worst_g = float(margin.min())
        violations += int(np.sum(margin < -tol))
    h = traj.diagnostics.get("h")
    if h is not None and h.ndim == 2 and h.shape[1]:
        margin = np.abs(h[0])[None, :] * decay - np.abs(h)
        worst_h = float(margin.min())
        violations += int(np.sum(margin < -tol))
    return InvarianceReport(violations == 0, worst_g, worst_h, violations)
