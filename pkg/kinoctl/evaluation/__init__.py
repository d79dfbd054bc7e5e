"""Evaluation Utilities

Polyline Hausdorff distance, the built-in desired paths, the path-following
and connectivity experiment harnesses, report files that can be recomputed
from emitted traces, and SVG charts.
"""

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.spatial import cKDTree  # noqa: E402
from scipy.stats import spearmanr  # noqa: E402

from kinoctl.exceptions import ConfigError, KinoctlError  # noqa: E402
from kinoctl.fkd_model import FkdModel  # noqa: E402
from kinoctl.geometry import wrap_angle  # noqa: E402
from kinoctl.ikd_baseline import IkdModel  # noqa: E402
from kinoctl.logging import LogContext, OperationLogger, get_logger  # noqa: E402
from kinoctl.control_runtime import (  # noqa: E402
    PathMap,
    RuntimeConfig,
    load_path,
    read_trace,
    run_closed_loop,
    save_path,
    write_trace,
)
from kinoctl.nlls_opt import LMConfig  # noqa: E402
from kinoctl.traj_data import WindowSpec  # noqa: E402
from kinoctl.vehicle_sim import SimParams  # noqa: E402

logger = get_logger(__name__)

PATH_SPACING = 0.05
REPORT_COLUMNS = ("experiment", "method", "path", "speed", "rollouts", "mean_hausdorff", "hausdorff",
                  "time_to_goal", "max_speed", "success", "failures")
CONNECT_START = (0.0, 0.0, math.pi / 2)
CONNECT_GOAL = (-5.0, 0.0, 3 * math.pi / 2)


# ------------------------------------------------------------------ metric

def resample_polyline(points: np.ndarray, step: float) -> np.ndarray:
    """Points every ``step`` metres of arc length along the polyline, end point included."""
    pts = np.asarray(points, dtype=float)[:, :2]
    if len(pts) == 0:
        raise ValueError("empty polyline")
    seg = np.hypot(*np.diff(pts, axis=0).T) if len(pts) > 1 else np.zeros(0)
    keep = np.concatenate([[True], seg > 0])
    pts = pts[keep]
    if len(pts) == 1:
        return pts
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(pts, axis=0).T))])
    s = np.append(np.arange(0.0, cum[-1], step), cum[-1])
    return np.column_stack([np.interp(s, cum, pts[:, 0]), np.interp(s, cum, pts[:, 1])])


def hausdorff_distance(a: np.ndarray, b: np.ndarray, sample_step: float = 0.01) -> float:
    """
    Symmetric Hausdorff distance between two polylines.

    Both polylines are resampled every ``sample_step`` metres, then each
    directed distance is the largest nearest-sample distance.

    Args:
        a: (N, >=2) polyline vertices
        b: (M, >=2) polyline vertices
        sample_step: Resampling step in metres

    Returns:
        Distance in metres

    Raises:
        ValueError: empty polyline or non-positive step
    """
    if not sample_step > 0:
        raise ValueError("sample_step must be > 0")
    pa = resample_polyline(a, sample_step)
    pb = resample_polyline(b, sample_step)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return float(max(np.max(d_ab), np.max(d_ba)))


def closed_polyline(path: PathMap) -> np.ndarray:
    """Path vertices, with the first repeated at the end for closed paths."""
    pos = path.positions[:, :2]
    return np.vstack([pos, pos[:1]]) if path.closed else pos


# ------------------------------------------------------------------ built-in paths

def _line(x: float, y: float, heading: float, length: float):
    c, s = math.cos(heading), math.sin(heading)
    return length, lambda d: (x + c * d, y + s * d, heading)


def _arc(cx: float, cy: float, radius: float, phi0: float, sweep: float):
    sign = 1.0 if sweep > 0 else -1.0

    def pose(d):
        phi = phi0 + sign * d / radius
        return cx + radius * math.cos(phi), cy + radius * math.sin(phi), phi + sign * math.pi / 2

    return abs(sweep) * radius, pose


def _sample(pieces, closed: bool, spacing: float = PATH_SPACING) -> Tuple[np.ndarray, np.ndarray]:
    lengths = np.array([p[0] for p in pieces])
    bounds = np.concatenate([[0.0], np.cumsum(lengths)])
    total = float(bounds[-1])
    count = max(1, int(round(total / spacing)))
    arcs = np.arange(count) * total / count if closed else np.linspace(0.0, total, count + 1)
    out = np.empty((len(arcs), 3))
    for k, s in enumerate(arcs):
        i = min(int(np.searchsorted(bounds, s, side="right")) - 1, len(pieces) - 1)
        x, y, th = pieces[i][1](s - bounds[i])
        out[k] = (x, y, wrap_angle(th))
    return out, arcs


def rounded_rectangle(width: float = 6.0, height: float = 3.0, radius: float = 0.75) -> PathMap:
    """Counter-clockwise loop centred on the origin, starting mid bottom edge heading east."""
    hw, hh = width / 2, height / 2
    sx, sy = hw - radius, hh - radius
    pieces = [
        _line(0.0, -hh, 0.0, sx),
        _arc(sx, -sy, radius, -math.pi / 2, math.pi / 2),
        _line(hw, -sy, math.pi / 2, 2 * sy),
        _arc(sx, sy, radius, 0.0, math.pi / 2),
        _line(sx, hh, math.pi, 2 * sx),
        _arc(-sx, sy, radius, math.pi / 2, math.pi / 2),
        _line(-hw, sy, -math.pi / 2, 2 * sy),
        _arc(-sx, -sy, radius, math.pi, math.pi / 2),
        _line(-sx, -hh, 0.0, sx),
    ]
    positions, _ = _sample(pieces, closed=True)
    return PathMap(positions, closed=True)


def figure8(radius: float = 1.5) -> PathMap:
    """
    Two lobes of ``radius`` joined by diagonals crossing once at the origin.

    Starts at the origin heading north-east; clockwise around the right lobe,
    counter-clockwise around the left one.
    """
    c = radius * math.sqrt(2.0)
    leg = radius
    pieces = [
        _line(0.0, 0.0, math.pi / 4, leg),
        _arc(c, 0.0, radius, 3 * math.pi / 4, -3 * math.pi / 2),
        _line(c / 2, -c / 2, 3 * math.pi / 4, 2 * leg),
        _arc(-c, 0.0, radius, math.pi / 4, 3 * math.pi / 2),
        _line(-c / 2, -c / 2, math.pi / 4, leg),
    ]
    positions, _ = _sample(pieces, closed=True)
    return PathMap(positions, closed=True)


def straight(length: float = 10.0) -> PathMap:
    positions, _ = _sample([_line(0.0, 0.0, 0.0, length)], closed=False)
    return PathMap(positions, closed=False)


def demo_racing_line(v_max: float = 2.4, accel: float = 1.5, v_start: float = 0.5) -> PathMap:
    """
    Scripted wide route for the connectivity scenario: north 2 m, a 2.5 m-radius
    left half circle, south 2 m to (-5, 0). Carries a speed profile capped at
    ``v_max`` with ``accel`` ramps, falling to zero at the end.
    """
    radius = 2.5
    pieces = [
        _line(0.0, 0.0, math.pi / 2, 2.0),
        _arc(-radius, 2.0, radius, 0.0, math.pi),
        _line(-2 * radius, 2.0, -math.pi / 2, 2.0),
    ]
    positions, arcs = _sample(pieces, closed=False)
    total = arcs[-1]
    speeds = np.minimum.reduce([
        np.full_like(arcs, v_max),
        np.sqrt(v_start ** 2 + 2 * accel * arcs),
        np.sqrt(np.maximum(2 * accel * (total - arcs), 0.0)),
    ])
    return PathMap(positions, closed=False, speeds=speeds)


BUILTIN_PATHS: Dict[str, Callable[[], PathMap]] = {
    "rounded_rectangle": rounded_rectangle,
    "figure8": figure8,
    "straight": straight,
    "demo_racing_line": demo_racing_line,
}


def builtin_path(name: str) -> PathMap:
    try:
        return BUILTIN_PATHS[name]()
    except KeyError:
        raise ConfigError(f"unknown path {name!r}; choose from {sorted(BUILTIN_PATHS)}") from None


# ------------------------------------------------------------------ reports

@dataclass(frozen=True)
class EvalConfig:
    speeds: Tuple[float, ...] = (1.0, 1.5, 2.0, 2.5, 3.0)
    rollouts: int = 5
    seed: int = 0
    paths: Tuple[str, ...] = ("rounded_rectangle", "figure8")
    sample_step: float = 0.01
    traversal_slack: float = 1.0
    goal_position_tol: float = 0.2
    goal_speed_tol: float = 0.2
    timeout: float = 15.0
    racing_line: str = "demo_racing_line"
    plots: bool = True

    def __post_init__(self):
        object.__setattr__(self, "speeds", tuple(float(v) for v in self.speeds))
        object.__setattr__(self, "paths", tuple(self.paths))
        if not self.speeds or min(self.speeds) <= 0 or self.rollouts < 1:
            raise ConfigError("eval.speeds must be positive and eval.rollouts >= 1")
        if not (self.sample_step > 0 and self.timeout > 0):
            raise ConfigError("eval.sample_step and eval.timeout must be > 0")


@dataclass
class CellResult:
    """Rollouts of one (method, path, speed) cell; failed rollouts hold NaN."""

    method: str
    path: str
    speed: float
    hausdorff: List[float] = field(default_factory=list)
    failures: List[str] = field(default_factory=list)

    @property
    def mean_hausdorff(self) -> float:
        ok = [h for h in self.hausdorff if math.isfinite(h)]
        return float(np.mean(ok)) if ok else math.nan


@dataclass
class ConnectivityResult:
    method: str
    time_to_goal: Optional[float]
    max_speed: float
    failures: List[str] = field(default_factory=list)

    @property
    def success(self) -> bool:
        return self.time_to_goal is not None


@dataclass
class ExperimentReport:
    cells: List[CellResult] = field(default_factory=list)
    connectivity: List[ConnectivityResult] = field(default_factory=list)

    @property
    def failure_count(self) -> int:
        return (sum(len(c.failures) for c in self.cells)
                + sum(len(c.failures) + (0 if c.success else 1) for c in self.connectivity))

    def cell(self, method: str, path: str, speed: float) -> CellResult:
        return next(c for c in self.cells if c.method == method and c.path == path and abs(c.speed - speed) < 1e-9)

    def rows(self) -> List[list]:
        out = []
        for c in self.cells:
            out.append(["path_following", c.method, c.path, c.speed, len(c.hausdorff), c.mean_hausdorff,
                        ";".join(repr(h) for h in c.hausdorff), "", "", "", len(c.failures)])
        for c in self.connectivity:
            out.append(["connectivity", c.method, "", "", 1, "", "",
                        "" if c.time_to_goal is None else c.time_to_goal, c.max_speed, c.success, len(c.failures)])
        return out


def write_report(report: ExperimentReport, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_COLUMNS)
        for row in report.rows():
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def speed_trend(report: ExperimentReport) -> Dict[Tuple[str, str], float]:
    """Spearman rank correlation between speed and mean Hausdorff per (method, path)."""
    groups: Dict[Tuple[str, str], List[CellResult]] = {}
    for c in report.cells:
        groups.setdefault((c.method, c.path), []).append(c)
    out = {}
    for key, cells in groups.items():
        if len(cells) < 2:
            continue
        rho, _ = spearmanr([c.speed for c in cells], [c.mean_hausdorff for c in cells])
        out[key] = float(rho)
    return out


# ------------------------------------------------------------------ experiment harnesses

def _start_state(pose: Sequence[float]) -> np.ndarray:
    return np.array([pose[0], pose[1], wrap_angle(pose[2]), 0.0, 0.0, 0.0])


def _methods(model: Optional[FkdModel], ikd: Optional[IkdModel]) -> List[Tuple[str, object]]:
    methods = [(name, m) for name, m in (("fkd", model), ("ikd", ikd)) if m is not None]
    if not methods:
        raise ConfigError("at least one of the forward and inverse models is required")
    return methods


def _trace_hausdorff(positions: np.ndarray, desired: np.ndarray, step: float) -> float:
    if len(positions) == 0:
        return math.nan
    return hausdorff_distance(positions, desired, step)


def eval_path_following(model: Optional[FkdModel], ikd: Optional[IkdModel], paths: Dict[str, PathMap],
                        cfg: EvalConfig, runtime: RuntimeConfig, sim_params: SimParams, spec: WindowSpec,
                        out_dir: Union[str, Path], lm_cfg: LMConfig = LMConfig()) -> ExperimentReport:
    """
    Path-following experiment: every (method, path, speed) cell runs ``cfg.rollouts`` seeded traversals.

    Writes one trace CSV per rollout, the desired path files, ``manifest.json``
    and ``report.csv`` under ``out_dir``. Failed rollouts are recorded in the
    report and the manifest.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = ExperimentReport()
    manifest = {"experiment": "path_following", "sample_step": cfg.sample_step, "paths": {}, "runs": []}
    for name, path in paths.items():
        save_path(path, out_dir / f"path_{name}.json")
        manifest["paths"][name] = {"file": f"path_{name}.json", "closed": path.closed}
    desired = {name: closed_polyline(p) for name, p in paths.items()}

    with OperationLogger(logger, "eval_path_following", paths=list(paths), speeds=list(cfg.speeds)):
        for method, controller in _methods(model, ikd):
            for name, path in paths.items():
                for speed in cfg.speeds:
                    cell = CellResult(method, name, speed)
                    run_cfg = _with(runtime, v_desired=speed)
                    duration = path.length / speed + cfg.traversal_slack
                    for k in range(cfg.rollouts):
                        seed = cfg.seed + k
                        trace_file = f"trace_{method}_{name}_{speed:.2f}_{seed}.csv"
                        with LogContext(logger, method=method, path=name, speed=speed, seed=seed) as log:
                            error = None
                            try:
                                trace = run_closed_loop(sim_params, controller, "path", path, run_cfg, spec, seed,
                                                        duration, _start_state(path.positions[0]), lm_cfg)
                                write_trace(trace, out_dir / trace_file)
                                h = _trace_hausdorff(trace.positions, desired[name], cfg.sample_step)
                                if trace.errors and any(actor == "executor" for _, actor, _ in trace.errors):
                                    error = trace.errors[-1][2]
                            except KinoctlError as e:
                                h, error = math.nan, str(e)
                            if error is not None:
                                log.warning("Rollout failed", error=error)
                                cell.failures.append(error)
                                h = math.nan
                            log.info("Rollout finished", hausdorff=h)
                        cell.hausdorff.append(h)
                        manifest["runs"].append({"method": method, "path": name, "speed": speed, "seed": seed,
                                                 "trace": trace_file, "error": error})
                    report.cells.append(cell)

    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    write_report(report, out_dir / "report.csv")
    if cfg.plots:
        plot_hausdorff_vs_speed(report, out_dir / "hausdorff_vs_speed.svg")
    return report


def _with(cfg: RuntimeConfig, **changes) -> RuntimeConfig:
    return replace(cfg, **changes)


def goal_reached(state: np.ndarray, goal: np.ndarray, position_tol: float, speed_tol: float) -> bool:
    return (math.hypot(state[0] - goal[0], state[1] - goal[1]) <= position_tol
            and math.hypot(state[3], state[4]) <= speed_tol)


def time_to_goal(states: np.ndarray, times: np.ndarray, goal: np.ndarray, position_tol: float,
                 speed_tol: float) -> Optional[float]:
    for t, s in zip(times, states):
        if goal_reached(s, goal, position_tol, speed_tol):
            return float(t)
    return None


def eval_connectivity(model: Optional[FkdModel], ikd: Optional[IkdModel], racing_line: PathMap, cfg: EvalConfig,
                      runtime: RuntimeConfig, sim_params: SimParams, spec: WindowSpec, out_dir: Union[str, Path],
                      lm_cfg: LMConfig = LMConfig(), seed: Optional[int] = None) -> ExperimentReport:
    """
    Connectivity experiment from (0, 0) heading north to (-5, 0) heading south, at rest at both ends.

    The forward-model arm plans time-optimal steering towards the goal state;
    the inverse-model arm tracks ``racing_line`` at its speed profile. Both
    stop at the first tick inside the goal tolerances or at ``cfg.timeout``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg.seed if seed is None else seed
    start = _start_state(CONNECT_START)
    goal = _start_state(CONNECT_GOAL)
    save_path(racing_line, out_dir / "racing_line.json")

    def stop(state, t):
        return goal_reached(state, goal, cfg.goal_position_tol, cfg.goal_speed_tol)

    report = ExperimentReport()
    manifest = {"experiment": "connectivity", "goal": goal.tolist(), "goal_position_tol": cfg.goal_position_tol,
                "goal_speed_tol": cfg.goal_speed_tol, "racing_line": "racing_line.json", "runs": []}
    traces = {}
    with OperationLogger(logger, "eval_connectivity", seed=seed):
        for method, controller in _methods(model, ikd):
            trace_file = f"trace_connect_{method}_{seed}.csv"
            failures = []
            try:
                if method == "fkd":
                    trace = run_closed_loop(sim_params, controller, "connect", goal, runtime, spec, seed,
                                            cfg.timeout, start, lm_cfg, None, stop)
                else:
                    trace = run_closed_loop(sim_params, controller, "path", racing_line, runtime, spec, seed,
                                            cfg.timeout, start, lm_cfg, 0, stop)
                write_trace(trace, out_dir / trace_file)
                traces[method] = trace
                result = ConnectivityResult(method, trace.goal_reached_at, trace.max_speed)
            except KinoctlError as e:
                failures.append(str(e))
                result = ConnectivityResult(method, None, 0.0, failures)
            if not result.success:
                logger.warning("Goal not reached", method=method, timeout=cfg.timeout)
            logger.info("Connectivity run finished", method=method, time_to_goal=result.time_to_goal,
                        max_speed=result.max_speed)
            report.connectivity.append(result)
            manifest["runs"].append({"method": method, "seed": seed, "trace": trace_file,
                                     "error": failures[0] if failures else None})

    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    write_report(report, out_dir / "report.csv")
    if cfg.plots and traces:
        plot_path_overlay(racing_line, {m: t.positions for m, t in traces.items()}, out_dir / "connectivity.svg",
                          goal=goal)
    return report


def recompute_report(in_dir: Union[str, Path]) -> ExperimentReport:
    """Rebuild an experiment report from ``manifest.json`` and the trace files alone."""
    in_dir = Path(in_dir)
    try:
        manifest = json.loads((in_dir / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        logger.error("Failed to read manifest", path=str(in_dir), error=str(e))
        raise ConfigError(f"cannot read {in_dir / 'manifest.json'}: {e}") from e
    report = ExperimentReport()
    if manifest["experiment"] == "path_following":
        step = manifest["sample_step"]
        desired = {name: closed_polyline(load_path(in_dir / meta["file"], meta["closed"]))
                   for name, meta in manifest["paths"].items()}
        cells: Dict[Tuple[str, str, float], CellResult] = {}
        for run in manifest["runs"]:
            key = (run["method"], run["path"], run["speed"])
            cell = cells.setdefault(key, CellResult(*key))
            if run["error"] is not None:
                cell.hausdorff.append(math.nan)
                cell.failures.append(run["error"])
                continue
            rows = read_trace(in_dir / run["trace"])
            cell.hausdorff.append(_trace_hausdorff(rows[:, 1:3], desired[run["path"]], step))
        report.cells.extend(cells.values())
    else:
        goal = np.asarray(manifest["goal"])
        for run in manifest["runs"]:
            if run["error"] is not None:
                report.connectivity.append(ConnectivityResult(run["method"], None, 0.0, [run["error"]]))
                continue
            rows = read_trace(in_dir / run["trace"])
            states = rows[:, 1:7]
            t_goal = time_to_goal(states, rows[:, 0], goal, manifest["goal_position_tol"], manifest["goal_speed_tol"])
            max_speed = float(np.max(np.hypot(states[:, 3], states[:, 4]))) if len(states) else 0.0
            report.connectivity.append(ConnectivityResult(run["method"], t_goal, max_speed))
    return report


# ------------------------------------------------------------------ charts

def _save_svg(fig, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context({"svg.hashsalt": "kinoctl"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_hausdorff_vs_speed(report: ExperimentReport, path: Union[str, Path]) -> None:
    """Mean Hausdorff distance against commanded speed, one line per (method, path)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    groups: Dict[Tuple[str, str], List[CellResult]] = {}
    for c in report.cells:
        groups.setdefault((c.method, c.path), []).append(c)
    for (method, name), cells in sorted(groups.items()):
        cells = sorted(cells, key=lambda c: c.speed)
        ax.plot([c.speed for c in cells], [c.mean_hausdorff for c in cells], marker="o", label=f"{method} / {name}")
    ax.set_xlabel("speed [m/s]")
    ax.set_ylabel("mean Hausdorff distance [m]")
    ax.grid(True, alpha=0.3)
    ax.legend()
    _save_svg(fig, path)


def plot_path_overlay(desired: PathMap, executed: Dict[str, np.ndarray], path: Union[str, Path],
                      goal: Optional[np.ndarray] = None) -> None:
    """Executed positions of each run drawn over the desired path."""
    fig, ax = plt.subplots(figsize=(6, 6))
    line = closed_polyline(desired)
    ax.plot(line[:, 0], line[:, 1], color="gold", linewidth=3, label="desired")
    for label, positions in sorted(executed.items()):
        ax.plot(positions[:, 0], positions[:, 1], linewidth=1.2, label=label)
    if goal is not None:
        ax.plot([goal[0]], [goal[1]], marker="o", color="red", label="goal")
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend()
    _save_svg(fig, path)
