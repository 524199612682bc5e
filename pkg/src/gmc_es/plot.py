"""Static SVG phase portraits for two-dimensional problems.

Level curves come from marching squares on a regular grid; the feasible
region ``{g <= 0}`` is shaded with one rectangle per run of feasible cells
in each grid row. Output depends only on the inputs, so repeated calls are
byte-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .analysis import exact_penalty
from .problem import ProblemSpec, evaluate


class UnsupportedDimensionError(ValueError):
    """Phase plots need a two-dimensional decision variable."""


@dataclass(frozen=True)
class PlotOptions:
    xlim: tuple[float, float] = (-2.0, 2.0)
    ylim: tuple[float, float] = (-2.0, 2.0)
    grid: int = 201
    epsilon: float = 0.1
    v_levels: Optional[tuple[float, ...]] = None
    level_count: int = 8
    size: int = 600
    max_points: int = 2000

    def __post_init__(self):
        object.__setattr__(self, "xlim", tuple(float(x) for x in self.xlim))
        object.__setattr__(self, "ylim", tuple(float(y) for y in self.ylim))
        if self.v_levels is not None:
            object.__setattr__(self, "v_levels", tuple(float(v) for v in self.v_levels))
        if len(self.xlim) != 2 or not self.xlim[0] < self.xlim[1]:
            raise ValueError(f"xlim must be an increasing pair, got {self.xlim}")
        if len(self.ylim) != 2 or not self.ylim[0] < self.ylim[1]:
            raise ValueError(f"ylim must be an increasing pair, got {self.ylim}")
        if self.grid < 3:
            raise ValueError("grid must have at least 3 points per axis")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.level_count < 0:
            raise ValueError("level_count must be non-negative")


@dataclass
class TrajectoryPath:
    label: str
    points: np.ndarray


@dataclass
class Fields:
    xs: np.ndarray
    ys: np.ndarray
    g: np.ndarray            # (m, ny, nx)
    V: np.ndarray            # (ny, nx)
    extra: dict = field(default_factory=dict)


# -- marching squares ---------------------------------------------------------

# edges: 0 bottom (i,j)-(i,j+1), 1 right, 2 top, 3 left; ambiguous cases 5 and 10 handled separately
_SEGMENTS = {
    1: ((3, 0),), 2: ((0, 1),), 3: ((3, 1),), 4: ((1, 2),), 6: ((0, 2),), 7: ((3, 2),),
    8: ((2, 3),), 9: ((0, 2),), 11: ((1, 2),), 12: ((1, 3),), 13: ((0, 1),), 14: ((3, 0),),
}


def marching_squares(xs: np.ndarray, ys: np.ndarray, Z: np.ndarray, level: float) -> list[tuple[float, float, float, float]]:
    """Line segments ``(x0, y0, x1, y1)`` approximating ``Z == level``.

    ``Z[j, i]`` is the value at ``(xs[i], ys[j])``. Saddle cells are resolved
    with the cell-centre average.
    """
    Z = np.asarray(Z, dtype=float)
    above = Z > level
    case = (above[:-1, :-1].astype(np.int8)
            | (above[:-1, 1:].astype(np.int8) << 1)
            | (above[1:, 1:].astype(np.int8) << 2)
            | (above[1:, :-1].astype(np.int8) << 3))
    segments = []
    for j, i in zip(*np.nonzero((case != 0) & (case != 15))):
        z00, z10, z11, z01 = Z[j, i], Z[j, i + 1], Z[j + 1, i + 1], Z[j + 1, i]
        x0, x1, y0, y1 = xs[i], xs[i + 1], ys[j], ys[j + 1]

        def cross(edge):
            if edge == 0:
                return x0 + _frac(z00, z10, level) * (x1 - x0), y0
            if edge == 1:
                return x1, y0 + _frac(z10, z11, level) * (y1 - y0)
            if edge == 2:
                return x0 + _frac(z01, z11, level) * (x1 - x0), y1
            return x0, y0 + _frac(z00, z01, level) * (y1 - y0)

        c = int(case[j, i])
        if c in (5, 10):
            centre_above = 0.25 * (z00 + z10 + z11 + z01) > level
            # a centre above the level joins the two high corners, so the low ones are cut off
            if c == 5:
                pairs = ((3, 2), (0, 1)) if centre_above else ((3, 0), (1, 2))
            else:
                pairs = ((0, 3), (1, 2)) if centre_above else ((0, 1), (2, 3))
        else:
            pairs = _SEGMENTS[c]
        for a, b in pairs:
            (xa, ya), (xb, yb) = cross(a), cross(b)
            segments.append((float(xa), float(ya), float(xb), float(yb)))
    return segments


def _frac(za: float, zb: float, level: float) -> float:
    dz = zb - za
    return 0.5 if dz == 0 else min(max((level - za) / dz, 0.0), 1.0)


def feasible_runs(mask: np.ndarray) -> list[tuple[int, int, int]]:
    """``(row, start, stop)`` for every maximal run of True cells."""
    runs = []
    for j, row in enumerate(np.asarray(mask, dtype=bool)):
        padded = np.concatenate(([False], row, [False])).astype(np.int8)
        edges = np.flatnonzero(np.diff(padded))
        for start, stop in zip(edges[::2], edges[1::2]):
            runs.append((j, int(start), int(stop)))
    return runs


# -- fields and levels --------------------------------------------------------

def sample_fields(problem: ProblemSpec, opts: PlotOptions) -> Fields:
    if problem.n != 2:
        raise UnsupportedDimensionError(f"phase plots need n=2, problem {problem.name!r} has n={problem.n}")
    xs = np.linspace(*opts.xlim, opts.grid)
    ys = np.linspace(*opts.ylim, opts.grid)
    g = np.empty((problem.m, ys.size, xs.size))
    V = np.empty((ys.size, xs.size))
    for j, y in enumerate(ys):
        for i, x in enumerate(xs):
            f, cv = evaluate(problem, np.array([x, y]))
            g[:, j, i] = cv.g
            V[j, i] = exact_penalty(f, cv.g, cv.h, opts.epsilon)
    return Fields(xs, ys, g, V)


def default_levels(V: np.ndarray, count: int) -> list[float]:
    """Evenly spaced values between the grid minimum and the grid median."""
    if count == 0:
        return []
    lo, hi = float(np.min(V)), float(np.median(V))
    return [lo + (hi - lo) * (k + 1) / (count + 1) for k in range(count)]


# -- SVG ----------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def _num(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


class _Canvas:
    def __init__(self, opts: PlotOptions):
        self.opts = opts
        self.margin = 40.0
        self.span = opts.size - 2 * self.margin

    def x(self, v: float) -> float:
        lo, hi = self.opts.xlim
        return self.margin + (v - lo) / (hi - lo) * self.span

    def y(self, v: float) -> float:
        lo, hi = self.opts.ylim
        return self.margin + (hi - v) / (hi - lo) * self.span

    def pt(self, x: float, y: float) -> str:
        return f"{_num(self.x(x))},{_num(self.y(y))}"


def _segments_path(cv: _Canvas, segments, style: str) -> str:
    if not segments:
        return ""
    d = " ".join(f"M{cv.pt(a, b)}L{cv.pt(c, e)}" for a, b, c, e in segments)
    return f'<path d="{d}" {style}/>'


def _thin(points: np.ndarray, limit: int) -> np.ndarray:
    if len(points) <= limit:
        return points
    idx = np.unique(np.concatenate((np.linspace(0, len(points) - 1, limit).astype(int), [len(points) - 1])))
    return points[idx]


def render_svg(problem: ProblemSpec, trajectories: Sequence[TrajectoryPath] = (),
               opts: PlotOptions = PlotOptions(), fields: Optional[Fields] = None) -> str:
    """Phase portrait: feasible shading, zero curves of each g_i, V_eps levels,
    trajectories and a star at the known optimum."""
    fields = fields if fields is not None else sample_fields(problem, opts)
    cv = _Canvas(opts)
    xs, ys = fields.xs, fields.ys
    size = opts.size
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<title>{problem.name}: trajectories, constraint boundaries and penalty levels (eps={opts.epsilon:g})</title>',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="#ffffff"/>',
    ]

    if problem.m:
        mask = np.all(fields.g[:, :-1, :-1] <= 0, axis=0) & np.all(fields.g[:, 1:, 1:] <= 0, axis=0)
        rects = []
        for j, a, b in feasible_runs(mask):
            x0, x1 = cv.x(xs[a]), cv.x(xs[b])
            y0, y1 = cv.y(ys[j + 1]), cv.y(ys[j])
            rects.append(f'<rect x="{_num(x0)}" y="{_num(y0)}" width="{_num(x1 - x0)}" height="{_num(y1 - y0)}"/>')
        out.append('<g class="feasible" fill="#cfe8cf" stroke="none">' + "".join(rects) + "</g>")

    levels = list(opts.v_levels) if opts.v_levels is not None else default_levels(fields.V, opts.level_count)
    out.append('<g class="penalty-levels">')
    for level in levels:
        path = _segments_path(cv, marching_squares(xs, ys, fields.V, level),
                              f'fill="none" stroke="#999999" stroke-width="0.8" data-level="{level:.6g}"')
        if path:
            out.append(path)
    out.append("</g>")

    out.append('<g class="constraints">')
    for i in range(problem.m):
        path = _segments_path(cv, marching_squares(xs, ys, fields.g[i], 0.0),
                              f'fill="none" stroke="#000000" stroke-width="1.6" data-constraint="g_{i + 1}"')
        if path:
            out.append(path)
    out.append("</g>")

    out.append('<g class="trajectories">')
    for k, tr in enumerate(trajectories):
        pts = _thin(np.asarray(tr.points, dtype=float), opts.max_points)
        if len(pts) == 0:
            continue
        colour = _PALETTE[k % len(_PALETTE)]
        coords = " ".join(cv.pt(x, y) for x, y in pts)
        out.append(f'<polyline points="{coords}" fill="none" stroke="{colour}" stroke-width="1.2" data-label="{tr.label}"/>')
        out.append(f'<circle cx="{_num(cv.x(pts[0, 0]))}" cy="{_num(cv.y(pts[0, 1]))}" r="3" fill="{colour}"/>')
    out.append("</g>")

    if problem.known_optimum is not None:
        out.append(_star(cv.x(problem.known_optimum[0]), cv.y(problem.known_optimum[1])))

    m = cv.margin
    out.append(f'<rect x="{_num(m)}" y="{_num(m)}" width="{_num(cv.span)}" height="{_num(cv.span)}" fill="none" stroke="#333333"/>')
    for v in (opts.xlim[0], 0.5 * sum(opts.xlim), opts.xlim[1]):
        out.append(f'<text x="{_num(cv.x(v))}" y="{_num(size - m / 2)}" font-size="11" text-anchor="middle">{v:g}</text>')
    for v in (opts.ylim[0], 0.5 * sum(opts.ylim), opts.ylim[1]):
        out.append(f'<text x="{_num(m / 2)}" y="{_num(cv.y(v) + 4)}" font-size="11" text-anchor="middle">{v:g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _star(cx: float, cy: float, r: float = 9.0) -> str:
    pts = []
    for k in range(10):
        rad = r if k % 2 == 0 else 0.4 * r
        ang = np.pi / 2 + k * np.pi / 5
        pts.append(f"{_num(cx + rad * np.cos(ang))},{_num(cy - rad * np.sin(ang))}")
    return f'<polygon class="optimum" points="{" ".join(pts)}" fill="#1f3fbf" stroke="#000000" stroke-width="0.6"/>'


def trajectory_from_columns(cols: dict, label: str) -> TrajectoryPath:
    """Plot the estimate columns when present, else the state columns."""
    prefix = "theta_hat_" if "theta_hat_1" in cols else "theta_"
    if f"{prefix}1" not in cols or f"{prefix}2" not in cols:
        raise UnsupportedDimensionError(f"trajectory {label!r} has no two-dimensional theta columns")
    if f"{prefix}3" in cols:
        raise UnsupportedDimensionError(f"trajectory {label!r} is not two-dimensional")
    return TrajectoryPath(label, np.column_stack((cols[f"{prefix}1"], cols[f"{prefix}2"])))
