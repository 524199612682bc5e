"""Nonlinear programs: evaluation, gradient oracles and the built-in registry.

A problem is ``minimize f(theta) s.t. g(theta) <= 0, h(theta) = 0`` with
``theta`` in R^n, m inequality rows and l equality rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Sequence

import numpy as np

ScalarFn = Callable[[np.ndarray], float]
VectorFn = Callable[[np.ndarray], np.ndarray]

DEFAULT_FD_STEP = 1e-5


class ProblemError(Exception):
    """Base class for problem-definition errors."""


class DimensionError(ProblemError, ValueError):
    """Raised when a point does not have the problem dimension."""


class EvaluationError(ProblemError, ArithmeticError):
    """Raised when an evaluator returns a non-finite value."""


class CapabilityError(ProblemError):
    """Raised when analytic gradients are requested but not available."""


class ConfigError(ProblemError, ValueError):
    """Malformed problem configuration. ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class ConstraintValues:
    g: np.ndarray
    h: np.ndarray


@dataclass(frozen=True)
class ProblemSpec:
    """An immutable nonlinear program.

    ``grad_f``, ``jac_g`` and ``jac_h`` are optional analytic derivatives;
    when one is given all three must be (empty Jacobians for m=0 or l=0 are
    produced automatically).
    """

    n: int
    objective: ScalarFn
    inequalities: tuple[ScalarFn, ...] = ()
    equalities: tuple[ScalarFn, ...] = ()
    grad_f: Optional[VectorFn] = None
    jac_g: Optional[VectorFn] = None
    jac_h: Optional[VectorFn] = None
    known_optimum: Optional[tuple[float, ...]] = None
    name: str = "custom"
    source: Optional[Mapping[str, Any]] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"dimension must be a positive integer, got {self.n!r}")
        object.__setattr__(self, "inequalities", tuple(self.inequalities))
        object.__setattr__(self, "equalities", tuple(self.equalities))
        if self.known_optimum is not None:
            opt = tuple(float(x) for x in self.known_optimum)
            if len(opt) != self.n:
                raise DimensionError(f"known_optimum has length {len(opt)}, expected {self.n}")
            object.__setattr__(self, "known_optimum", opt)

    @property
    def m(self) -> int:
        return len(self.inequalities)

    @property
    def l(self) -> int:  # noqa: E743
        return len(self.equalities)

    @property
    def has_analytic_gradients(self) -> bool:
        return self.grad_f is not None


def _as_point(problem: ProblemSpec, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (problem.n,):
        raise DimensionError(f"expected a point of shape ({problem.n},), got {theta.shape}")
    return theta


def evaluate(problem: ProblemSpec, theta) -> tuple[float, ConstraintValues]:
    """Return ``f(theta)`` and the constraint values ``g(theta)``, ``h(theta)``."""
    theta = _as_point(problem, theta)
    f = float(problem.objective(theta))
    if not np.isfinite(f):
        raise EvaluationError(f"objective returned non-finite value {f!r}")
    g = np.array([float(gi(theta)) for gi in problem.inequalities], dtype=float)
    h = np.array([float(hj(theta)) for hj in problem.equalities], dtype=float)
    for label, vals in (("g", g), ("h", h)):
        if vals.size and not np.isfinite(vals).all():
            i = int(np.flatnonzero(~np.isfinite(vals))[0])
            raise EvaluationError(f"{label}[{i}] returned non-finite value {vals[i]!r}")
    return f, ConstraintValues(g=g, h=h)


def _central_difference(fun: ScalarFn, theta: np.ndarray, step: float) -> np.ndarray:
    grad = np.empty(theta.size)
    for k in range(theta.size):
        e = np.zeros(theta.size)
        e[k] = step
        grad[k] = (float(fun(theta + e)) - float(fun(theta - e))) / (2.0 * step)
    return grad


def gradients(problem: ProblemSpec, theta, source: str = "analytic", step: float = DEFAULT_FD_STEP):
    """Return ``(grad_f, Jg, Jh)`` with shapes ``(n,)``, ``(m, n)``, ``(l, n)``.

    ``source`` is ``"analytic"`` or ``"finite_difference"`` (central
    differences with the given ``step``).
    """
    theta = _as_point(problem, theta)
    n, m, l = problem.n, problem.m, problem.l
    if source == "analytic":
        if not problem.has_analytic_gradients:
            raise CapabilityError(f"problem {problem.name!r} has no analytic gradients")
        df = np.asarray(problem.grad_f(theta), dtype=float).reshape(n)
        Jg = np.asarray(problem.jac_g(theta), dtype=float).reshape(m, n) if m else np.zeros((0, n))
        Jh = np.asarray(problem.jac_h(theta), dtype=float).reshape(l, n) if l else np.zeros((0, n))
    elif source in ("finite_difference", "fd"):
        df = _central_difference(problem.objective, theta, step)
        Jg = np.array([_central_difference(gi, theta, step) for gi in problem.inequalities]).reshape(m, n)
        Jh = np.array([_central_difference(hj, theta, step) for hj in problem.equalities]).reshape(l, n)
    else:
        raise ValueError(f"unknown gradient source {source!r}")
    return df, Jg, Jh


# -- built-ins ---------------------------------------------------------------

def _paper2d() -> ProblemSpec:
    return ProblemSpec(
        n=2,
        objective=lambda t: (t[0] + 1.0) ** 2 + (t[1] - 1.0) ** 2,
        inequalities=(
            lambda t: -t[1],
            lambda t: -1.0 + t[0] ** 2 + t[1],
        ),
        grad_f=lambda t: np.array([2.0 * (t[0] + 1.0), 2.0 * (t[1] - 1.0)]),
        jac_g=lambda t: np.array([[0.0, -1.0], [2.0 * t[0], 1.0]]),
        jac_h=lambda t: np.zeros((0, 2)),
        known_optimum=(-0.58975, 0.65219),
        name="paper2d",
    )


def _eq3d() -> ProblemSpec:
    return ProblemSpec(
        n=2,
        objective=lambda t: t[0] ** 2 + t[1] ** 2,
        inequalities=(lambda t: -t[0],),
        equalities=(lambda t: t[0] + t[1] - 1.0,),
        grad_f=lambda t: 2.0 * np.asarray(t, dtype=float),
        jac_g=lambda t: np.array([[-1.0, 0.0]]),
        jac_h=lambda t: np.array([[1.0, 1.0]]),
        known_optimum=(0.5, 0.5),
        name="eq3d",
    )


def _unconstrained_quad() -> ProblemSpec:
    center = np.array([1.0, 2.0])
    return ProblemSpec(
        n=2,
        objective=lambda t: float(np.sum((np.asarray(t) - center) ** 2)),
        grad_f=lambda t: 2.0 * (np.asarray(t, dtype=float) - center),
        jac_g=lambda t: np.zeros((0, 2)),
        jac_h=lambda t: np.zeros((0, 2)),
        known_optimum=(1.0, 2.0),
        name="unconstrained_quad",
    )


_REGISTRY: dict[str, Callable[[], ProblemSpec]] = {
    "paper2d": _paper2d,
    "eq3d": _eq3d,
    "unconstrained_quad": _unconstrained_quad,
}


def list_problems() -> list[str]:
    return sorted(_REGISTRY)


def builtin(name: str) -> ProblemSpec:
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; available: {', '.join(list_problems())}") from None
    return factory()


# -- config-defined quadratic programs ----------------------------------------

@dataclass(frozen=True)
class Quadratic:
    """``0.5 * x^T Q x + q^T x + c``."""

    Q: np.ndarray
    q: np.ndarray
    c: float

    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.Q @ x + self.q @ x + self.c)

    def gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return 0.5 * (self.Q + self.Q.T) @ x + self.q


def _parse_quadratic(doc: Any, path: str, n: Optional[int]) -> Quadratic:
    if not isinstance(doc, Mapping):
        raise ConfigError(path, "expected an object with keys Q, q, c")
    unknown = set(doc) - {"Q", "q", "c"}
    if unknown:
        raise ConfigError(path, f"unknown keys {sorted(unknown)}")
    try:
        q = np.asarray(doc["q"], dtype=float) if "q" in doc else None
        Q = np.asarray(doc["Q"], dtype=float) if "Q" in doc else None
        c = float(doc.get("c", 0.0))
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, f"non-numeric coefficients ({exc})") from None
    if n is None:
        if q is not None:
            n = q.size
        elif Q is not None and Q.ndim == 2:
            n = Q.shape[0]
        else:
            raise ConfigError(path, "cannot infer dimension; supply q or Q")
    if q is None:
        q = np.zeros(n)
    if q.ndim != 1 or q.size != n:
        raise ConfigError(f"{path}.q", f"expected length {n}, got shape {q.shape}")
    if Q is None:
        Q = np.zeros((n, n))
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ConfigError(f"{path}.Q", f"must be square, got shape {Q.shape}")
    if Q.shape[0] != n:
        raise ConfigError(f"{path}.Q", f"expected shape ({n}, {n}), got {Q.shape}")
    if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(q)) and np.isfinite(c)):
        raise ConfigError(path, "coefficients must be finite")
    return Quadratic(Q=Q, q=q, c=c)


def from_config(doc: Mapping[str, Any]) -> ProblemSpec:
    """Build a problem from the ``problem`` section of a run configuration.

    Accepts either ``{"name": <registry id>}`` or an explicit quadratic
    objective with optional ``inequalities``/``equalities`` lists, each entry
    a ``{"Q", "q", "c"}`` polynomial of degree at most two.
    """
    path = "problem"
    if not isinstance(doc, Mapping):
        raise ConfigError(path, "expected an object")
    if "name" in doc and "quadratic" not in doc:
        try:
            return builtin(str(doc["name"]))
        except KeyError as exc:
            raise ConfigError(f"{path}.name", str(exc.args[0])) from None
    if "quadratic" not in doc:
        raise ConfigError(f"{path}.quadratic", "missing objective (give 'name' or 'quadratic')")
    obj = _parse_quadratic(doc["quadratic"], f"{path}.quadratic", None)
    n = obj.q.size
    ineq = [_parse_quadratic(p, f"{path}.inequalities[{i}]", n) for i, p in enumerate(_as_list(doc, "inequalities"))]
    eq = [_parse_quadratic(p, f"{path}.equalities[{j}]", n) for j, p in enumerate(_as_list(doc, "equalities"))]
    opt = doc.get("known_optimum")
    if opt is not None and len(opt) != n:
        raise ConfigError(f"{path}.known_optimum", f"expected length {n}")

    def rows(polys):
        return lambda x: np.array([p.gradient(x) for p in polys]).reshape(len(polys), n)

    return ProblemSpec(
        n=n,
        objective=obj,
        inequalities=tuple(ineq),
        equalities=tuple(eq),
        grad_f=obj.gradient,
        jac_g=rows(ineq),
        jac_h=rows(eq),
        known_optimum=tuple(opt) if opt is not None else None,
        name=str(doc.get("label", "config")),
        source=dict(doc),
    )


def _as_list(doc: Mapping[str, Any], key: str) -> Sequence[Any]:
    value = doc.get(key, [])
    if not isinstance(value, (list, tuple)):
        raise ConfigError(f"problem.{key}", "expected a list")
    return value
