"""Nonsmooth Lyapunov analysis of the safe gradient flow.

The exact penalty ``V_eps = f + (1/eps) sum [g_i]_+ + (1/eps) sum |h_j|``
serves as the Lyapunov function; its generalized gradient is a box of
convex-combination coefficients on the constraint gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import qp
from .problem import ProblemSpec, evaluate, gradients
from .safe_flow import flow_qp
from .sim import Trajectory


@dataclass(frozen=True)
class PenaltyParams:
    epsilon: float = 0.1
    activity_tol: float = 1e-7

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.activity_tol < 0:
            raise ValueError("activity_tol must be non-negative")


def exact_penalty(f: float, g, h, epsilon: float) -> float:
    excess = sum(max(gi, 0.0) for gi in np.ravel(g).tolist()) + sum(abs(hj) for hj in np.ravel(h).tolist())
    return float(f + excess / epsilon)


def penalty_value(problem: ProblemSpec, theta, pp: PenaltyParams = PenaltyParams()) -> float:
    f, cv = evaluate(problem, theta)
    return exact_penalty(f, cv.g, cv.h, pp.epsilon)


@dataclass
class SubdifferentialDescription:
    """Generalized gradient of ``V_eps`` at a point.

    Elements are ``base + sum_i q_i * ineq_vectors[i] + sum_j r_j * eq_vectors[j]``
    with ``q_i`` in ``q_ranges[i]`` and ``r_j`` in ``r_ranges[j]``. The
    vectors already include the ``1/eps`` factor.
    """

    base: np.ndarray
    ineq_vectors: np.ndarray
    q_ranges: list[tuple[float, float]]
    eq_vectors: np.ndarray
    r_ranges: list[tuple[float, float]]

    @property
    def active_inequalities(self) -> list[int]:
        return [i for i, (lo, hi) in enumerate(self.q_ranges) if lo < hi]

    @property
    def active_equalities(self) -> list[int]:
        return [j for j, (lo, hi) in enumerate(self.r_ranges) if lo < hi]

    @property
    def is_singleton(self) -> bool:
        return not self.active_inequalities and not self.active_equalities

    def fixed_part(self) -> np.ndarray:
        """The element obtained with every free coefficient at zero."""
        out = self.base.copy()
        for i, (lo, hi) in enumerate(self.q_ranges):
            if lo == hi:
                out += lo * self.ineq_vectors[i]
        for j, (lo, hi) in enumerate(self.r_ranges):
            if lo == hi:
                out += lo * self.eq_vectors[j]
        return out

    def contains(self, p, tol: float = 1e-10) -> bool:
        p = np.asarray(p, dtype=float)
        target = p - self.fixed_part()
        free = [self.ineq_vectors[i] for i in self.active_inequalities]
        free += [self.eq_vectors[j] for j in self.active_equalities]
        if not free:
            return bool(np.max(np.abs(target), initial=0.0) <= tol)
        from scipy.optimize import lsq_linear

        lo = [self.q_ranges[i][0] for i in self.active_inequalities] + [self.r_ranges[j][0] for j in self.active_equalities]
        hi = [self.q_ranges[i][1] for i in self.active_inequalities] + [self.r_ranges[j][1] for j in self.active_equalities]
        B = np.column_stack(free)
        res = lsq_linear(B, target, bounds=(lo, hi), method="bvls", tol=1e-14)
        return bool(np.max(np.abs(B @ res.x - target), initial=0.0) <= tol)


def penalty_subdifferential(problem: ProblemSpec, theta, pp: PenaltyParams = PenaltyParams(),
                            source: str = "analytic") -> SubdifferentialDescription:
    _, cv = evaluate(problem, theta)
    df, Jg, Jh = gradients(problem, theta, source)
    tol = pp.activity_tol
    q_ranges = []
    for gi in cv.g:
        if gi < -tol:
            q_ranges.append((0.0, 0.0))
        elif gi > tol:
            q_ranges.append((1.0, 1.0))
        else:
            q_ranges.append((0.0, 1.0))
    r_ranges = []
    for hj in cv.h:
        if abs(hj) > tol:
            s = float(np.sign(hj))
            r_ranges.append((s, s))
        else:
            r_ranges.append((-1.0, 1.0))
    return SubdifferentialDescription(
        base=np.asarray(df, dtype=float),
        ineq_vectors=Jg / pp.epsilon,
        q_ranges=q_ranges,
        eq_vectors=Jh / pp.epsilon,
        r_ranges=r_ranges,
    )


def lie_derivative_bound(problem: ProblemSpec, theta, sol: qp.QpSolution,
                         pp: PenaltyParams = PenaltyParams(), alpha: float = 1.0) -> float:
    """Upper bound on every element of the set-valued Lie derivative of V_eps.

    ``-||xi||^2 + alpha sum [g_i]_+ (u_i - 1/eps) + alpha sum |h_j| (|v_j| - 1/eps)``
    where ``sol`` is the flow QP solution at ``theta``.
    """
    _, cv = evaluate(problem, theta)
    inv = 1.0 / pp.epsilon
    bound = -float(sol.xi @ sol.xi)
    bound += alpha * float(np.sum(np.maximum(cv.g, 0.0) * (sol.u - inv)))
    bound += alpha * float(np.sum(np.abs(cv.h) * (np.abs(sol.v) - inv)))
    return bound


@dataclass
class MfcqResult:
    """``holds`` is None when the check was inconclusive (inner QP failed)."""

    holds: Optional[bool]
    witness_d: np.ndarray
    margin: float
    active_set: tuple[int, ...] = ()
    rank_ok: bool = True
    status: str = "ok"


def mfcq_check(problem: ProblemSpec, theta, alpha: float = 1.0, tol: float = 1e-8,
               source: str = "analytic", mu: float = 1e-6) -> MfcqResult:
    """Check MFCQ for the flow QP at ``theta``.

    The active set is read off the flow QP solution. A witness direction is
    found from the regularized max-margin problem over ``z = (d, s)``::

        min 0.5*mu*||z||^2 - s  s.t.  grad g_i^T d + s <= 0 (i active),
                                      Jh d = 0,  -1 <= d <= 1
    """
    inst, _, _ = flow_qp(problem, theta, alpha, source)
    n = problem.n
    sol = qp.solve(inst)
    if not sol.ok:
        return MfcqResult(None, np.zeros(n), np.nan, status=f"flow QP {sol.status}")
    Jh, Jg = inst.C, inst.A
    rank_ok = True
    if Jh.shape[0]:
        sv = np.linalg.svd(Jh, compute_uv=False)
        rank_ok = bool(Jh.shape[0] <= n and sv[-1] >= 1e-8 * max(sv[0], 1e-300))
    active = sol.active_set
    if not active:
        return MfcqResult(rank_ok, np.zeros(n), np.inf, active, rank_ok)
    A = np.vstack([
        np.hstack((Jg[list(active)], np.ones((len(active), 1)))),
        np.hstack((np.eye(n), np.zeros((n, 1)))),
        np.hstack((-np.eye(n), np.zeros((n, 1)))),
    ])
    b = np.concatenate((np.zeros(len(active)), np.ones(2 * n)))
    C = np.hstack((Jh, np.zeros((Jh.shape[0], 1))))
    c = np.zeros(n + 1)
    c[-1] = -1.0
    witness = qp.solve(qp.QpInstance(d=np.zeros(n + 1), A=A, b=b, C=C, e=np.zeros(Jh.shape[0]),
                                     H=mu * np.eye(n + 1), c=c))
    if not witness.ok:
        return MfcqResult(None, np.zeros(n), np.nan, active, rank_ok, status=f"witness QP {witness.status}")
    d = witness.xi[:n]
    # margin of the direction itself rather than the regularized slack variable
    margin = float(-np.max(Jg[list(active)] @ d))
    return MfcqResult(bool(rank_ok and margin > tol), d, margin, active, rank_ok)


def multiplier_bound_scan(*trajectories: Trajectory, safety: float = 0.5) -> tuple[float, float]:
    """Largest recorded multiplier ``M_bar`` and the suggested ``eps = safety / M_bar``."""
    if not trajectories or all(len(t) == 0 for t in trajectories):
        raise ValueError("multiplier scan needs a non-empty trajectory")
    m_bar = 0.0
    for traj in trajectories:
        for key, fn in (("u", lambda x: x), ("v", np.abs)):
            col = traj.diagnostics.get(key)
            if col is not None and col.size:
                vals = fn(col)
                vals = vals[np.isfinite(vals)]
                if vals.size:
                    m_bar = max(m_bar, float(vals.max()))
    eps = np.inf if m_bar == 0.0 else safety / m_bar
    return m_bar, eps
