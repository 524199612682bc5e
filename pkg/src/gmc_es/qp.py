"""Dense strictly convex QP solver used to filter the gradient flow.

Problems have the form::

    minimize    0.5 * xi^T H xi + c^T xi
    subject to  A xi <= b,   C xi = e

with the default cost ``H = I, c = d`` (that is ``0.5 * ||xi + d||^2`` up to a
constant). Multipliers follow the sign convention
``H xi + c + A^T u + C^T v = 0`` with ``u >= 0``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

ACTIVITY_TOL = 1e-9

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max_iter"


@dataclass
class QpInstance:
    d: np.ndarray
    A: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    C: Optional[np.ndarray] = None
    e: Optional[np.ndarray] = None
    H: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=float).reshape(-1)
        n = self.d.size
        self.A = np.zeros((0, n)) if self.A is None else np.asarray(self.A, dtype=float).reshape(-1, n)
        self.b = np.zeros(0) if self.b is None else np.asarray(self.b, dtype=float).reshape(-1)
        self.C = np.zeros((0, n)) if self.C is None else np.asarray(self.C, dtype=float).reshape(-1, n)
        self.e = np.zeros(0) if self.e is None else np.asarray(self.e, dtype=float).reshape(-1)
        if self.A.shape[0] != self.b.size:
            raise ValueError(f"A has {self.A.shape[0]} rows but b has length {self.b.size}")
        if self.C.shape[0] != self.e.size:
            raise ValueError(f"C has {self.C.shape[0]} rows but e has length {self.e.size}")
        if self.H is not None:
            H = np.asarray(self.H, dtype=float)
            if H.shape != (n, n):
                raise ValueError(f"H must be {n}x{n}, got {H.shape}")
            if not np.allclose(H, H.T, rtol=0.0, atol=1e-12):
                raise ValueError("H must be symmetric")
            if np.linalg.eigvalsh(H)[0] < 1e-10:
                raise ValueError("H must be positive definite (min eigenvalue >= 1e-10)")
            self.H = H
        if self.c is not None:
            self.c = np.asarray(self.c, dtype=float).reshape(n)

    @property
    def n(self) -> int:
        return self.d.size

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def l(self) -> int:  # noqa: E743
        return self.C.shape[0]

    def hessian(self) -> np.ndarray:
        return np.eye(self.n) if self.H is None else self.H

    def linear(self) -> np.ndarray:
        return self.d if self.c is None else self.c

    def cost(self, xi) -> float:
        xi = np.asarray(xi, dtype=float)
        return float(0.5 * xi @ self.hessian() @ xi + self.linear() @ xi)


@dataclass
class QpSolution:
    xi: np.ndarray
    u: np.ndarray
    v: np.ndarray
    active_set: tuple[int, ...] = ()
    iterations: int = 0
    status: str = OPTIMAL

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


@dataclass
class KktReport:
    stationarity: float
    primal_inequality: float
    primal_equality: float
    dual: float
    complementarity: float
    tol: float = field(default=1e-8)

    @property
    def residuals(self) -> dict[str, float]:
        return {
            "stationarity": self.stationarity,
            "primal_inequality": self.primal_inequality,
            "primal_equality": self.primal_equality,
            "dual": self.dual,
            "complementarity": self.complementarity,
        }

    @property
    def max_residual(self) -> float:
        return max(self.residuals.values())

    @property
    def ok(self) -> bool:
        return self.max_residual <= self.tol


def verify_kkt(inst: QpInstance, sol: QpSolution, tol: float = 1e-8) -> KktReport:
    xi, u, v = sol.xi, sol.u, sol.v
    grad = inst.hessian() @ xi + inst.linear() + inst.A.T @ u + inst.C.T @ v
    slack = inst.A @ xi - inst.b
    return KktReport(
        stationarity=float(np.max(np.abs(grad))) if grad.size else 0.0,
        primal_inequality=max(0.0, float(np.max(slack))) if slack.size else 0.0,
        primal_equality=float(np.max(np.abs(inst.C @ xi - inst.e))) if inst.l else 0.0,
        dual=max(0.0, -float(np.min(u))) if u.size else 0.0,
        complementarity=float(np.max(np.abs(u * slack))) if u.size else 0.0,
        tol=tol,
    )


class _Kkt:
    """Equality-constrained subproblem solves sharing one factorization of H."""

    def __init__(self, inst: QpInstance):
        self.inst = inst
        self.identity = inst.H is None
        if not self.identity:
            self.L = np.linalg.cholesky(inst.H)
        self.x0 = -self._hinv(inst.linear())
        self._cache: dict[tuple[int, ...], tuple] = {}

    def _hinv(self, x: np.ndarray) -> np.ndarray:
        if self.identity:
            return x
        return np.linalg.solve(self.L.T, np.linalg.solve(self.L, x))

    @staticmethod
    def _lin(S, rhs):
        if S.shape[0] == 1:
            s00 = S[0, 0]
            if s00 > 1e-14:
                return rhs / s00
        else:
            try:
                sol = np.linalg.solve(S, rhs)
                if np.isfinite(sol).all():
                    return sol
            except np.linalg.LinAlgError:
                pass
        return np.linalg.lstsq(S, rhs, rcond=None)[0]

    def solve(self, rows: list[int]):
        """Minimize the cost with ``C xi = e`` and ``A[rows] xi = b[rows]``.

        Returns ``(xi, lam, consistent)``; ``lam`` stacks equality multipliers
        first, then those of ``rows``. Rank-deficient systems fall back to
        least squares, which still yields the unique primal point when the
        constraints are consistent. One refinement step is applied to the
        constraint residual.
        """
        key = tuple(rows)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        inst = self.inst
        if rows:
            E = np.vstack((inst.C, inst.A[rows])) if inst.l else inst.A[rows]
            r = np.concatenate((inst.e, inst.b[rows])) if inst.l else inst.b[rows]
        else:
            E, r = inst.C, inst.e
        x0 = self.x0
        if E.shape[0] == 0:
            out = (x0, np.zeros(0), True)
            self._cache[key] = out
            return out
        HiEt = self._hinv(E.T)
        S = E @ HiEt
        rhs = E @ x0 - r
        lam = self._lin(S, rhs)
        xi = x0 - HiEt @ lam
        res = E @ xi - r
        err = np.abs(res).max()
        consistent = True
        if err > 1e-12:
            scale = 1.0 + np.abs(r).max() + np.abs(E).max() * np.abs(xi).max()
            if err > 1e-9 * scale:
                lam = np.linalg.lstsq(S, rhs, rcond=None)[0]
                xi = x0 - HiEt @ lam
                res = E @ xi - r
                consistent = bool(np.abs(res).max() <= 1e-9 * scale)
        if consistent and err > 0.0:
            # one step of iterative refinement on the constraint residual
            delta = self._lin(S, res)
            xi = xi - HiEt @ delta
            lam = lam + delta
        out = (xi, lam, consistent)
        self._cache[key] = out
        return out


def _phase1(inst: QpInstance, tol: float) -> Optional[np.ndarray]:
    """Feasible point by minimizing the total inequality violation, or None."""
    from scipy.optimize import linprog

    n, m = inst.n, inst.m
    cost = np.concatenate((np.zeros(n), np.ones(m)))
    A_ub = np.hstack((inst.A, -np.eye(m)))
    A_eq = np.hstack((inst.C, np.zeros((inst.l, m)))) if inst.l else None
    bounds = [(None, None)] * n + [(0.0, None)] * m
    res = linprog(cost, A_ub=A_ub, b_ub=inst.b, A_eq=A_eq, b_eq=inst.e if inst.l else None,
                  bounds=bounds, method="highs")
    if res.status != 0:
        return None
    scale = 1.0 + float(np.max(np.abs(inst.b), initial=0.0))
    if res.fun > tol * scale * max(m, 1) * 10:
        return None
    return res.x[:n]


def solve(inst: QpInstance, tol: float = 1e-9, max_iter: Optional[int] = None) -> QpSolution:
    """Primal active-set method for a strictly convex QP.

    Starts at the equality-constrained minimizer; if that is infeasible a
    feasible working set is built greedily by fixing the most violated row,
    with a phase-1 LP as fallback. Iterations add the lowest-index blocking
    constraint and drop the lowest-index row with a negative multiplier.
    """
    n, m, l = inst.n, inst.m, inst.l
    if max_iter is None:
        max_iter = 100 * (m + l + 1)
    kkt = _Kkt(inst)
    A, b = inst.A, inst.b
    bscale = 1.0 + (float(np.abs(b).max()) if m else 0.0)
    feas_tol = tol * bscale

    xi, lam, consistent = kkt.solve([])
    if not consistent:
        return _infeasible(n, m, l)
    working: list[int] = []
    iterations = 0
    if m and (A @ xi - b).max() > feas_tol:
        # greedy phase: fix violated rows until the point is feasible
        x = None
        while len(working) < min(m, n):
            i, worst = -1, feas_tol
            for j, vj in enumerate((A @ xi - b).tolist()):
                if vj > worst and j not in working:
                    i, worst = j, vj
            if i < 0:
                x = xi
                break
            working.append(i)
            iterations += 1
            xi, lam, consistent = kkt.solve(sorted(working))
            if not consistent:
                break
        else:
            if consistent and np.max(A @ xi - b) <= feas_tol:
                x = xi
        if x is None:
            x = _phase1(inst, tol)
            if x is None:
                return _infeasible(n, m, l, iterations)
            working = []
            xi = x
            target, lam, consistent = kkt.solve(working)
        else:
            # xi already solves the subproblem on the sorted working set
            working.sort()
            target = xi
    else:
        target = xi

    status = MAX_ITER
    while iterations < max_iter:
        iterations += 1
        p = target - xi
        if not p.size or np.abs(p).max() <= 1e-12 * (1.0 + np.abs(xi).max()):
            xi = target
            u_w = lam[l:]
            neg = [w for w, uw in zip(working, u_w) if uw < -tol]
            if not neg:
                status = OPTIMAL
                break
            working.remove(min(neg))
            target, lam, consistent = kkt.solve(working)
            continue
        step, blocking = 1.0, -1
        if m:
            Ap = A @ p
            slack = b - A @ xi
            pn = float(np.linalg.norm(p))
            for i in range(m):
                if i in working:
                    continue
                if Ap[i] > 1e-12 * pn * (1.0 + np.linalg.norm(A[i])):
                    ratio = max(slack[i], 0.0) / Ap[i]
                    if ratio < step - 1e-15:
                        step, blocking = ratio, i
        xi = xi + step * p
        if blocking >= 0:
            working.append(blocking)
            working.sort()
            target, lam, consistent = kkt.solve(working)
            if not consistent:
                # dependent row slipped in; drop it and treat as a full step
                working.remove(blocking)
                target, lam, consistent = kkt.solve(working)

    if status == OPTIMAL and working:
        xi, lam, _ = kkt.solve(working)  # cached; drops drift from partial steps
    u = np.zeros(m)
    v = lam[:l].copy() if lam.size >= l else np.zeros(l)
    if working and lam.size == l + len(working):
        u[working] = lam[l:]
    slack = A @ xi - b
    act_tol = ACTIVITY_TOL * bscale
    active = tuple(i for i, s_i in enumerate(slack.tolist()) if abs(s_i) <= act_tol)
    return QpSolution(xi=xi, u=u, v=v, active_set=active, iterations=iterations, status=status)


def _infeasible(n: int, m: int, l: int, iterations: int = 0) -> QpSolution:
    nan = np.full(n, np.nan)
    return QpSolution(xi=nan, u=np.full(m, np.nan), v=np.full(l, np.nan),
                      active_set=(), iterations=iterations, status=INFEASIBLE)


def brute_force_solve(inst: QpInstance, tol: float = 1e-9) -> QpSolution:
    """Enumerate every candidate active set and keep the best KKT point.

    Exponential in ``m``; only for cross-checking :func:`solve`.
    """
    n, m, l = inst.n, inst.m, inst.l
    if m > 12:
        raise ValueError(f"brute force limited to m <= 12, got {m}")
    H, c = inst.hessian(), inst.linear()
    bscale = 1.0 + float(np.max(np.abs(inst.b), initial=0.0))
    best = None
    count = 0
    for size in range(m + 1):
        for rows in itertools.combinations(range(m), size):
            count += 1
            rows = list(rows)
            E = np.vstack((inst.C, inst.A[rows]))
            r = np.concatenate((inst.e, inst.b[rows]))
            k = E.shape[0]
            K = np.block([[H, E.T], [E, np.zeros((k, k))]])
            rhs = np.concatenate((-c, r))
            z = np.linalg.lstsq(K, rhs, rcond=None)[0]
            xi, lam = z[:n], z[n:]
            if k and np.max(np.abs(E @ xi - r)) > 1e-9 * bscale:
                continue
            if np.max(np.abs(H @ xi + c + E.T @ lam)) > 1e-8 * (1.0 + np.max(np.abs(c))):
                continue
            if m and np.max(inst.A @ xi - inst.b) > tol * bscale:
                continue
            u_rows = lam[l:]
            if u_rows.size and np.min(u_rows) < -tol:
                continue
            cost = inst.cost(xi)
            if best is None or cost < best[0] - 1e-12 * (1.0 + abs(best[0])):
                u = np.zeros(m)
                u[rows] = u_rows
                best = (cost, xi, u, lam[:l].copy(), rows)
    if best is None:
        return _infeasible(n, m, l, count)
    _, xi, u, v, _ = best
    slack = inst.A @ xi - inst.b
    active = tuple(int(i) for i in np.flatnonzero(np.abs(slack) <= ACTIVITY_TOL * bscale)) if m else ()
    return QpSolution(xi=xi, u=u, v=v, active_set=active, iterations=count, status=OPTIMAL)
