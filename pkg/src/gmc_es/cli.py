"""Command-line front end.

    gmc-es run --config <path> [--out <dir>]
    gmc-es verify --config <path>
    gmc-es plot --config <path> --traj <csv>... --out <svg>
    gmc-es list-problems

Exit codes: 0 success, 1 configuration or I/O error, 2 a run ended with a
status other than ``completed``/``converged`` (or, for ``verify``, a
criterion failed).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np

from . import acceptance, analysis, es, plot, safe_flow, sim
from .problem import ConfigError, ProblemSpec, from_config, list_problems

MODES = ("exact", "es", "verify", "plot")
THREADS_ENV = "GMC_ES_THREADS"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_STATUS = 2


def _fields(cls, exclude=()) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)} - set(exclude)


def _section(doc: Mapping[str, Any], key: str, cls, exclude=()) -> dict[str, Any]:
    sec = doc.get(key, {})
    if not isinstance(sec, Mapping):
        raise ConfigError(key, "expected an object")
    unknown = set(sec) - _fields(cls, exclude)
    if unknown:
        raise ConfigError(f"{key}.{sorted(unknown)[0]}", "unknown parameter")
    return dict(sec)


def _build(cls, key: str, values: Mapping[str, Any]):
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from None


@dataclass
class RunConfig:
    """A validated run description. ``to_dict`` output re-parses to an equal config."""

    problem: dict[str, Any]
    mode: str = "exact"
    flow: dict[str, Any] = field(default_factory=dict)
    es: dict[str, Any] = field(default_factory=dict)
    output_dir: str = "out"
    initial_conditions: list[list[float]] = field(default_factory=list)
    epsilon: Union[float, str] = 0.1
    record_stride: int = 1
    plot: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "RunConfig":
        if not isinstance(doc, Mapping):
            raise ConfigError("<root>", "expected an object")
        unknown = set(doc) - _fields(cls)
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown key")
        if "problem" not in doc:
            raise ConfigError("problem", "missing required section")
        mode = doc.get("mode", "exact")
        if mode not in MODES:
            raise ConfigError("mode", f"must be one of {', '.join(MODES)}, got {mode!r}")
        cfg = cls(
            problem=dict(doc["problem"]) if isinstance(doc["problem"], Mapping) else doc["problem"],
            mode=mode,
            flow=_section(doc, "flow", safe_flow.FlowParams, exclude=("epsilon",)),
            es=_section(doc, "es", es.EsParams),
            output_dir=str(doc.get("output_dir", "out")),
            initial_conditions=_initial_conditions(doc.get("initial_conditions", [])),
            epsilon=doc.get("epsilon", 0.1),
            record_stride=doc.get("record_stride", 1),
            plot=_section(doc, "plot", plot.PlotOptions, exclude=("epsilon",)),
        )
        cfg.validate()
        return cfg

    def to_dict(self) -> dict[str, Any]:
        return {
            "problem": self.problem,
            "mode": self.mode,
            "flow": dict(self.flow),
            "es": dict(self.es),
            "output_dir": self.output_dir,
            "initial_conditions": [list(x) for x in self.initial_conditions],
            "epsilon": self.epsilon,
            "record_stride": self.record_stride,
            "plot": dict(self.plot),
        }

    def validate(self) -> ProblemSpec:
        """Check every section against the selected problem; returns the problem."""
        problem = from_config(self.problem)
        if isinstance(self.epsilon, str):
            if self.epsilon != "auto":
                raise ConfigError("epsilon", "must be a positive number or \"auto\"")
        elif isinstance(self.epsilon, bool) or not isinstance(self.epsilon, (int, float)) or not self.epsilon > 0:
            raise ConfigError("epsilon", f"must be a positive number or \"auto\", got {self.epsilon!r}")
        if isinstance(self.record_stride, bool) or not isinstance(self.record_stride, int) or self.record_stride < 1:
            raise ConfigError("record_stride", "must be an integer >= 1")
        self.flow_params()
        self.plot_options(0.1)
        if self.mode == "es":
            params = self.es_params(problem)
            if len(params.omegas) != problem.n:
                raise ConfigError("es.omegas", f"need {problem.n} frequencies, got {len(params.omegas)}")
        if self.mode in ("exact", "es"):
            if not self.initial_conditions:
                raise ConfigError("initial_conditions", f"mode {self.mode!r} needs at least one initial condition")
            for k, x in enumerate(self.initial_conditions):
                if len(x) != problem.n:
                    raise ConfigError(f"initial_conditions[{k}]", f"expected length {problem.n}, got {len(x)}")
        return problem

    def flow_params(self) -> safe_flow.FlowParams:
        eps = 0.1 if self.epsilon == "auto" else float(self.epsilon)
        return _build(safe_flow.FlowParams, "flow", {**self.flow, "epsilon": eps})

    def es_params(self, problem: ProblemSpec) -> es.EsParams:
        values = dict(self.es)
        values.setdefault("omegas", es.default_omegas(problem.n))
        return _build(es.EsParams, "es", values)

    def plot_options(self, epsilon: float) -> plot.PlotOptions:
        return _build(plot.PlotOptions, "plot", {**self.plot, "epsilon": epsilon})


def _initial_conditions(value) -> list[list[float]]:
    if not isinstance(value, (list, tuple)):
        raise ConfigError("initial_conditions", "expected a list of points")
    out = []
    for k, x in enumerate(value):
        if not isinstance(x, (list, tuple)):
            raise ConfigError(f"initial_conditions[{k}]", "expected a list of numbers")
        try:
            pt = [float(v) for v in x]
        except (TypeError, ValueError):
            raise ConfigError(f"initial_conditions[{k}]", "expected a list of numbers") from None
        if not all(np.isfinite(pt)):
            raise ConfigError(f"initial_conditions[{k}]", "values must be finite")
        out.append(pt)
    return out


def load_config(path: Union[str, Path]) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON in {path}: {exc}") from None
    return RunConfig.from_dict(doc)


def thread_count(jobs: int) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return max(1, min(jobs, os.cpu_count() or 1))
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(THREADS_ENV, f"must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(THREADS_ENV, f"must be a positive integer, got {raw!r}")
    return max(1, min(jobs, value))


def _map(fn, items: Sequence[Any]) -> list[Any]:
    workers = thread_count(len(items))
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# -- commands -----------------------------------------------------------------

def resolve_epsilon(cfg: RunConfig, problem: ProblemSpec) -> tuple[float, Optional[float]]:
    """Numeric epsilon and, for ``"auto"``, the multiplier bound it came from."""
    if cfg.epsilon != "auto":
        return float(cfg.epsilon), None
    params = cfg.flow_params()
    starts = cfg.initial_conditions or [[0.0] * problem.n]
    runs = _map(lambda x: safe_flow.integrate(problem, x, params), starts)
    m_bar, eps = analysis.multiplier_bound_scan(*runs)
    if not np.isfinite(eps):
        eps = 0.1  # no active multipliers: any epsilon works
    return float(eps), m_bar


def cmd_run(cfg: RunConfig, out_dir: Optional[str] = None, log=print) -> int:
    problem = cfg.validate()
    if cfg.mode not in ("exact", "es"):
        raise ConfigError("mode", f"'run' needs mode exact or es, got {cfg.mode!r}")
    eps, m_bar = resolve_epsilon(cfg, problem)
    if cfg.mode == "exact":
        params = dataclasses.replace(cfg.flow_params(), epsilon=eps)
        job = lambda x: safe_flow.integrate(problem, x, params)  # noqa: E731
    else:
        params = cfg.es_params(problem)
        job = lambda x: es.run(problem, x, params, epsilon=eps)  # noqa: E731
    trajectories = _map(job, cfg.initial_conditions)

    target = Path(out_dir if out_dir is not None else cfg.output_dir)
    try:
        target.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError("output_dir", f"cannot create {target}: {exc.strerror}") from None
    worst = EXIT_OK
    star = np.asarray(problem.known_optimum) if problem.known_optimum is not None else None
    for k, traj in enumerate(trajectories):
        traj.metadata["config"] = cfg.to_dict()
        traj.metadata["epsilon_resolved"] = eps
        if m_bar is not None:
            traj.metadata["multiplier_bound"] = m_bar
        stem = target / f"{problem.name}_{cfg.mode}_{k:02d}"
        kept = sim.decimate(traj, cfg.record_stride)
        try:
            stem.with_suffix(".csv").write_text(sim.to_csv(kept))
            stem.with_suffix(".json").write_text(sim.metadata_json(kept))
        except OSError as exc:
            raise ConfigError("output_dir", f"cannot write {stem}: {exc.strerror}") from None
        final = traj.final_state[:problem.n]
        err = "" if star is None else f" error={np.linalg.norm(final - star):.3g}"
        log(f"{stem.name}: status={traj.status} final={np.array2string(final, precision=6)}{err}")
        if traj.status not in (sim.COMPLETED, sim.CONVERGED):
            worst = EXIT_STATUS
    return worst


def cmd_verify(cfg: Optional[RunConfig] = None, log=print, only: Optional[set[str]] = None) -> tuple[int, dict]:
    results = acceptance.run_all(only=only, echo=lambda line: log(line, file=sys.stderr))
    rep = acceptance.report(results)
    return (EXIT_OK if rep["passed"] else EXIT_STATUS), rep


def cmd_plot(cfg: RunConfig, traj_paths: Sequence[str], out: str) -> str:
    problem = cfg.validate()
    eps = 0.1 if cfg.epsilon == "auto" else float(cfg.epsilon)
    opts = cfg.plot_options(eps)
    paths = []
    for p in traj_paths:
        try:
            cols = sim.read_csv(Path(p).read_text())
        except OSError as exc:
            raise ConfigError("--traj", f"cannot read {p}: {exc.strerror}") from None
        except (ValueError, StopIteration, IndexError):
            raise ConfigError("--traj", f"{p} is not a trajectory CSV") from None
        paths.append(plot.trajectory_from_columns(cols, Path(p).stem))
    svg = plot.render_svg(problem, paths, opts)
    try:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(svg)
    except OSError as exc:
        raise ConfigError("--out", f"cannot write {out}: {exc.strerror}") from None
    return svg


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gmc-es", description="Safe gradient flow and GMC extremum seeking simulations.")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="integrate the exact flow or the ES controller")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="output directory (overrides output_dir)")
    ver = sub.add_parser("verify", help="run the acceptance suite and print a JSON report")
    ver.add_argument("--config", required=True)
    ver.add_argument("--only", help="comma-separated criterion ids, e.g. 1,2,4")
    pl = sub.add_parser("plot", help="write an SVG phase portrait")
    pl.add_argument("--config", required=True)
    pl.add_argument("--traj", nargs="*", default=[], help="trajectory CSV files")
    pl.add_argument("--out", required=True, help="output SVG path")
    sub.add_parser("list-problems", help="print the built-in problem names")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "list-problems":
            print("\n".join(list_problems()))
            return EXIT_OK
        cfg = load_config(args.config)
        if args.command == "run":
            return cmd_run(cfg, args.out)
        if args.command == "verify":
            only = None if not args.only else {s.strip() for s in args.only.split(",") if s.strip()}
            code, rep = cmd_verify(cfg, log=print, only=only)
            print(json.dumps(rep, indent=2))
            return code
        cmd_plot(cfg, args.traj, args.out)
        return EXIT_OK
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except plot.UnsupportedDimensionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
