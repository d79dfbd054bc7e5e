"""Control Runtime

The four cooperating actors of the closed loop and their shared buffers:

* estimator: writes latency-delayed observations into a :class:`StateBuffer`
* optimizer: time-synchronizes the buffer, localizes on the path and solves
  for a control sequence (forward-model least squares or inverse-model step)
* updater: drops the stale head of a fresh solution and replaces the
  :class:`ControlBuffer` contents
* executor: applies one control per tick to the simulated plant

Actors run on a deterministic virtual clock (integer microseconds); events at
the same instant fire in the order executor, estimator, updater, optimizer.
"""

import csv
import heapq
import json
import math
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from kinoctl.exceptions import (
    ConfigError,
    DimensionError,
    HistoryGap,
    NumericalFailure,
    SimulationError,
    StaleSolution,
    StampOrderError,
)
from kinoctl.fkd_model import FkdModel
from kinoctl.geometry import wrap_angle
from kinoctl.ikd_baseline import IkdModel, ikd_track_step
from kinoctl.logging import OperationLogger, get_logger
from kinoctl.nlls_opt import (
    LMConfig,
    PathFollowingProblem,
    SquashMap,
    control_squash,
    control_unsquash,
    lm_solve,
    solve_optimal_connectivity,
)
from kinoctl.traj_data import WindowSpec
from kinoctl.vehicle_sim import (
    STAMP_TOL,
    RobotState,
    SimParams,
    TimedState,
    observe_delayed,
    sim_step_array,
    state_at,
)

logger = get_logger(__name__)

US_PER_S = 1_000_000

PRIORITY_EXECUTOR = 0
PRIORITY_ESTIMATOR = 1
PRIORITY_DELIVERY = 2
PRIORITY_OPTIMIZER = 3

OBJECTIVES = ("path", "connect")
LATENCY_MODES = ("instant", "fixed", "measured")
TRACE_COLUMNS = ("t", "x", "y", "theta", "v_x", "v_y", "omega", "delta_exec", "psi_exec", "plan_id", "gamma", "dropped")


def to_us(seconds: float) -> int:
    return int(round(seconds * US_PER_S))


# ------------------------------------------------------------------ buffers

class StateBuffer:
    """Fixed-capacity ring of timestamped state estimates; stamps strictly increase."""

    def __init__(self, capacity: int):
        if capacity < 2:
            raise ConfigError(f"state buffer capacity must be >= 2, got {capacity}")
        self._items: deque = deque(maxlen=capacity)
        self._lock = threading.Lock()

    @property
    def capacity(self) -> int:
        return self._items.maxlen

    def __len__(self) -> int:
        return len(self._items)

    def push(self, item: TimedState) -> None:
        with self._lock:
            if self._items and item.stamp <= self._items[-1].stamp + STAMP_TOL:
                raise StampOrderError(f"stamp {item.stamp} does not follow {self._items[-1].stamp}")
            self._items.append(item)

    def latest(self) -> TimedState:
        with self._lock:
            if not self._items:
                raise HistoryGap("state buffer is empty")
            return self._items[-1]

    def snapshot(self) -> List[TimedState]:
        with self._lock:
            return list(self._items)


@dataclass(frozen=True, eq=False)
class ScheduledControl:
    control: np.ndarray
    stamp: float
    plan_id: int


class ControlBuffer:
    """Queue of controls with tau-spaced execution stamps; contents are replaced atomically."""

    def __init__(self):
        self._items: deque = deque()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._items)

    def replace(self, controls: np.ndarray, start_stamp: float, tau: float, plan_id: int = 0) -> None:
        controls = np.asarray(controls, dtype=float).reshape(-1, 2)
        items = deque(ScheduledControl(u.copy(), start_stamp + k * tau, plan_id) for k, u in enumerate(controls))
        with self._lock:
            self._items = items

    def pop_due(self, now: float) -> Optional[ScheduledControl]:
        """
        Remove and return the latest control stamped at or before ``now``.

        Every earlier due control is removed without being executed; after a
        missed tick only the newest overdue command is applied.
        """
        with self._lock:
            due = None
            popped = 0
            while self._items and self._items[0].stamp <= now + STAMP_TOL:
                due = self._items.popleft()
                popped += 1
        if popped > 1:
            logger.debug("Discarded overdue controls", count=popped - 1, now=now, executed_stamp=due.stamp)
        return due

    def snapshot(self) -> List[ScheduledControl]:
        with self._lock:
            return list(self._items)


# ------------------------------------------------------------------ paths

@dataclass(frozen=True, eq=False)
class PathMap:
    """
    Ordered path poses (x, y, theta) with cumulative arc length.

    A closed path wraps from its last vertex back to the first; ``speeds``
    optionally carries a per-vertex speed profile (racing lines).
    """

    positions: np.ndarray
    closed: bool = False
    speeds: Optional[np.ndarray] = None
    cumulative: np.ndarray = field(init=False, repr=False)
    length: float = field(init=False)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 3 or len(pos) == 0 or not np.all(np.isfinite(pos)):
            raise ConfigError(f"path positions must be a finite non-empty (N, 3) array, got {pos.shape}")
        seg = np.hypot(np.diff(pos[:, 0]), np.diff(pos[:, 1]))
        if np.any(seg <= 0):
            raise ConfigError("consecutive path positions must be distinct")
        cumulative = np.concatenate([[0.0], np.cumsum(seg)])
        length = float(cumulative[-1])
        if self.closed and len(pos) > 1:
            length += float(np.hypot(*(pos[0, :2] - pos[-1, :2])))
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "cumulative", cumulative)
        object.__setattr__(self, "length", length)
        if self.speeds is not None:
            speeds = np.asarray(self.speeds, dtype=float)
            if speeds.shape != (len(pos),):
                raise ConfigError(f"speed profile must have {len(pos)} entries")
            object.__setattr__(self, "speeds", speeds)
        speeds = self.speeds if self.speeds is not None else np.zeros(len(pos))
        if self.closed:
            extended = (np.vstack([pos, pos[:1]]), np.append(cumulative, length), np.append(speeds, speeds[0]))
        else:
            extended = (pos, cumulative, speeds)
        object.__setattr__(self, "_extended", extended)

    def __len__(self) -> int:
        return len(self.positions)

    def _locate(self, arc: float) -> Tuple[int, float, np.ndarray, np.ndarray, np.ndarray]:
        pos, cum, speeds = self._extended
        arc = arc % self.length if self.closed else min(max(arc, 0.0), self.length)
        i = int(np.clip(np.searchsorted(cum, arc, side="right") - 1, 0, len(cum) - 2))
        seg = cum[i + 1] - cum[i]
        frac = (arc - cum[i]) / seg if seg > 0 else 0.0
        return i, frac, pos, cum, speeds

    def pose_at(self, arc: float) -> np.ndarray:
        """Pose at arc length ``arc`` (wrapped on closed paths, clamped on open ones)."""
        if len(self) == 1 or self.length <= 0:
            return self.positions[0].copy()
        i, frac, pos, _, _ = self._locate(arc)
        p0, p1 = pos[i], pos[i + 1]
        out = p0 + frac * (p1 - p0)
        out[2] = wrap_angle(p0[2] + frac * wrap_angle(p1[2] - p0[2]))
        return out

    def speed_at(self, arc: float, default: float) -> float:
        if self.speeds is None:
            return default
        if len(self) == 1 or self.length <= 0:
            return float(self.speeds[0])
        i, frac, _, _, speeds = self._locate(arc)
        return float(speeds[i] + frac * (speeds[i + 1] - speeds[i]))

    def curvature_at(self, arc: float, half_span: float = 0.05) -> float:
        lo, hi = arc - half_span, arc + half_span
        if not self.closed:
            lo, hi = max(lo, 0.0), min(hi, self.length)
        if hi - lo <= 0:
            return 0.0
        return float(wrap_angle(self.pose_at(hi)[2] - self.pose_at(lo)[2]) / (hi - lo))


def save_path(path: PathMap, out: Union[str, Path]) -> None:
    """Write the path as a JSON array of [x, y, theta]."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(path.positions.tolist()) + "\n")


def load_path(src: Union[str, Path], closed: Optional[bool] = None) -> PathMap:
    """Read a path file; ``closed`` defaults to whether the ends lie within one vertex spacing."""
    try:
        positions = np.asarray(json.loads(Path(src).read_text()), dtype=float)
    except (OSError, ValueError) as e:
        logger.error("Failed to read path", path=str(src), error=str(e))
        raise ConfigError(f"cannot read path file {src}: {e}") from e
    if closed is None and len(positions) > 2:
        spacing = float(np.median(np.hypot(*np.diff(positions[:, :2], axis=0).T)))
        closed = bool(np.hypot(*(positions[0, :2] - positions[-1, :2])) <= 1.5 * spacing)
    return PathMap(positions, bool(closed))


def localize_on_path(path: PathMap, xi: Union[RobotState, np.ndarray], hint: Optional[int] = None,
                     window: Optional[int] = None) -> int:
    """
    Index of the path vertex closest to ``xi`` in the plane; ties go to the lowest index.

    With ``hint`` and ``window`` the search is restricted to vertices within
    ``window`` indices of ``hint`` (circularly on closed paths).
    """
    xy = xi.pose[:2] if isinstance(xi, RobotState) else np.asarray(xi, dtype=float)[:2]
    n = len(path)
    if hint is None or window is None or 2 * window + 1 >= n:
        candidates = np.arange(n)
    elif path.closed:
        candidates = np.unique((hint + np.arange(-window, window + 1)) % n)
    else:
        candidates = np.arange(max(0, hint - window), min(n, hint + window + 1))
    d2 = np.sum((path.positions[candidates, :2] - xy) ** 2, axis=1)
    return int(candidates[int(np.argmin(d2))])


def lookahead(path: PathMap, s: int, d: float) -> np.ndarray:
    """Pose reached by walking ``d`` metres of arc length from vertex ``s``."""
    if d < 0:
        raise ValueError(f"lookahead distance must be >= 0, got {d}")
    return path.pose_at(path.cumulative[s] + d)


def path_target_window(path: PathMap, s: int, n: int, tau: float, d: float) -> np.ndarray:
    """
    Desired states evenly spaced in arc length from vertex ``s`` to the lookahead goal.

    The last pose is ``lookahead(path, s, d)``; speed is ``d / (n * tau)``,
    v_y is zero and omega is speed times curvature.

    Returns:
        (n, 6) world-frame states
    """
    if n < 1:
        raise ConfigError(f"target window needs n >= 1, got {n}")
    v = d / (n * tau)
    out = np.zeros((n, 6))
    arc0 = float(path.cumulative[s])
    for k in range(n - 1):
        arc = arc0 + d * (k + 1) / n
        out[k, :3] = path.pose_at(arc)
        out[k, 5] = v * path.curvature_at(arc)
    out[-1, :3] = lookahead(path, s, d)
    out[-1, 5] = v * path.curvature_at(arc0 + d)
    out[:, 3] = v
    return out


def desired_states_along_path(path: PathMap, s: int, n: int, tau: float, v_desired: float,
                              v_now: Optional[float] = None, accel: Optional[float] = None) -> np.ndarray:
    """
    Desired states at tau spacing ahead of vertex ``s``.

    Speed follows the path's profile (or ``v_desired``), optionally limited by a
    ramp ``v_now + accel * t``; v_y is zero and omega is speed times curvature.

    Returns:
        (n, 6) world-frame states
    """
    out = np.zeros((n, 6))
    arc = float(path.cumulative[s])
    for k in range(n):
        v = path.speed_at(arc, v_desired)
        if accel is not None and v_now is not None:
            v = min(v, max(v_now, 0.0) + accel * (k + 1) * tau)
        arc += v * tau
        out[k, :3] = path.pose_at(arc)
        out[k, 3] = v
        out[k, 5] = v * path.curvature_at(arc)
    return out


def time_sync_states(buf: StateBuffer, t_end: float, spec: WindowSpec) -> np.ndarray:
    """
    Interpolate the buffer onto the W grid times ending at ``t_end``.

    Raises:
        HistoryGap: the buffer does not span [t_end - (W - 1) tau, t_end]
    """
    history = buf.snapshot()
    w = spec.steps_per_window
    grid = t_end - (w - 1 - np.arange(w)) * spec.tau
    return np.stack([state_at(history, float(t)).as_array() for t in grid])


# ------------------------------------------------------------------ configuration

@dataclass(frozen=True)
class RuntimeConfig:
    delta_t: float = 1.0
    epsilon: float = 0.05
    v_desired: float = 1.0
    optimizer_period: Optional[float] = None
    estimator_period: float = 0.02
    ikd_period: float = 0.1
    latency_mode: str = "fixed"
    optimizer_compute_time: float = 0.05
    ikd_compute_time: float = 0.0
    compensate_latency: bool = True
    starvation_hold_ticks: int = 5
    buffer_margin: float = 0.5
    localize_window: int = 80
    target_accel: Optional[float] = 3.0
    path_weights: Tuple[float, ...] = (1.0, 1.0, 0.5)
    connect_weights: Tuple[float, ...] = (1.0, 1.0, 0.5, 0.3, 0.3, 0.1)
    alpha: float = 0.3
    n_range: Tuple[int, int] = (40, 160)
    connect_initial_speed: float = 1.0
    start_jitter: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        for name in ("path_weights", "connect_weights", "n_range", "start_jitter"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.latency_mode not in LATENCY_MODES:
            raise ConfigError(f"runtime.latency_mode must be one of {LATENCY_MODES}, got {self.latency_mode!r}")
        if not (self.delta_t > 0 and self.estimator_period > 0 and self.ikd_period > 0 and self.period > 0):
            raise ConfigError("runtime horizon and periods must be > 0")
        if self.epsilon < 0 or self.optimizer_compute_time < 0 or self.ikd_compute_time < 0:
            raise ConfigError("runtime.epsilon and compute times must be >= 0")
        if len(self.path_weights) != 3 or len(self.connect_weights) != 6:
            raise ConfigError("runtime.path_weights needs 3 entries, runtime.connect_weights 6")
        if len(self.n_range) != 2 or self.n_range[0] > self.n_range[1]:
            raise ConfigError(f"runtime.n_range must be [lo, hi], got {self.n_range}")

    @property
    def period(self) -> float:
        return self.optimizer_period if self.optimizer_period is not None else self.delta_t / 2.0

    def validate(self, spec: WindowSpec) -> None:
        """Raise ConfigError unless the horizon is a whole number of model windows."""
        spec.steps_for(self.delta_t)

    def buffer_capacity(self, spec: WindowSpec) -> int:
        return int(math.ceil((spec.t_model + self.epsilon + self.buffer_margin) / self.estimator_period)) + 2


# ------------------------------------------------------------------ optimizer

@dataclass
class PlanResult:
    controls: np.ndarray
    xi_used: TimedState
    path_index: Optional[int] = None
    z: Optional[np.ndarray] = None
    n: int = 0
    cost: float = 0.0
    iterations: int = 0
    reason: str = ""


def _shifted(z: np.ndarray, steps: int, n: int) -> np.ndarray:
    zz = z.reshape(-1, 2)[max(steps, 0):]
    if len(zz) == 0:
        zz = z.reshape(-1, 2)[-1:]
    if len(zz) < n:
        zz = np.vstack([zz, np.repeat(zz[-1:], n - len(zz), axis=0)])
    return zz[:n].ravel().copy()


def plan_once(objective: str, model: FkdModel, buf: StateBuffer, target: Union[PathMap, np.ndarray],
              cfg: RuntimeConfig, spec: WindowSpec, lm_cfg: LMConfig, squash: SquashMap,
              previous: Optional[PlanResult] = None, hint: Optional[int] = None) -> PlanResult:
    """
    One optimizer cycle on the newest buffered estimate.

    Path following localizes on the path, samples the target states up to the
    lookahead goal at ``v_desired * delta_t`` and solves the tracking problem.
    Connectivity searches the step count and controls towards the goal state.
    Both warm-start from ``previous`` shifted by the time elapsed since it.

    Returns:
        PlanResult whose controls start at ``xi_used.stamp``

    Raises:
        HistoryGap: the buffer does not span the model window
        NumericalFailure: the solver failed
    """
    if objective not in OBJECTIVES:
        raise ConfigError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    xi = buf.latest()
    history = time_sync_states(buf, xi.stamp, spec)
    w = spec.steps_per_window
    shift = int(round((xi.stamp - previous.xi_used.stamp) / spec.tau)) if previous is not None else 0

    if objective == "path":
        n = spec.steps_for(cfg.delta_t)
        s = localize_on_path(target, xi.state, hint, cfg.localize_window if hint is not None else None)
        targets = path_target_window(target, s, n, spec.tau, cfg.v_desired * cfg.delta_t)
        if previous is not None and previous.z is not None:
            z0 = _shifted(previous.z, shift, n)
        else:
            z0 = control_unsquash(squash, np.tile([cfg.v_desired, 0.0], n))
        problem = PathFollowingProblem(model, history, targets, squash, cfg.path_weights)
        result = lm_solve(problem, z0, lm_cfg)
        controls, _ = control_squash(squash, result.x)
        return PlanResult(controls.reshape(n, 2), xi, s, result.x, n, result.cost, result.iterations, result.reason)

    # the upper bound is always the configured one; only the lower bound follows the previous plan down
    n_lo, n_hi = cfg.n_range
    warm = None
    if previous is not None and previous.z is not None:
        remaining = previous.n - shift
        n_lo = min(max(w, min(n_lo, remaining)), n_hi)
        warm = _shifted(previous.z, shift, max(remaining, 1))
    controls, n, table = solve_optimal_connectivity(
        model, history, np.asarray(target, dtype=float), cfg.alpha, (n_lo, n_hi), lm_cfg, squash,
        cfg.connect_weights, cfg.connect_initial_speed, warm,
    )
    best = next(row for row in table if row.n == n)
    return PlanResult(controls, xi, None, control_unsquash(squash, controls.ravel()), n,
                      best.cost, best.iters, best.reason)


def ikd_plan_once(model: IkdModel, buf: StateBuffer, path: PathMap, cfg: RuntimeConfig, spec: WindowSpec,
                  hint: Optional[int] = None) -> PlanResult:
    """Inverse-model cycle: track the next window of desired states along ``path``."""
    xi = buf.latest()
    history = time_sync_states(buf, xi.stamp, spec)
    w = spec.steps_per_window
    s = localize_on_path(path, xi.state, hint, cfg.localize_window if hint is not None else None)
    desired = desired_states_along_path(path, s, w, spec.tau, cfg.v_desired,
                                        v_now=xi.state.v_x, accel=cfg.target_accel)
    controls = ikd_track_step(model, history, desired)
    return PlanResult(controls, xi, s, None, w)


# ------------------------------------------------------------------ updater / executor

def updater_apply(controls: np.ndarray, xi_stamp: float, now: float, epsilon: float, cbuf: ControlBuffer,
                  tau: float, plan_id: int = 0, compensate: bool = True) -> Tuple[int, float]:
    """
    Install a fresh solution, discarding the part that is already in the past.

    gamma = now - xi_stamp; the first ceil((gamma + epsilon) / tau) controls are
    dropped and the rest are stamped from ``now`` onward.

    Returns:
        (dropped count, gamma)

    Raises:
        StaleSolution: gamma + epsilon reaches the solution horizon; the
            buffer is left unchanged
    """
    controls = np.asarray(controls, dtype=float).reshape(-1, 2)
    gamma = now - xi_stamp
    horizon = len(controls) * tau
    age = gamma + epsilon
    if age >= horizon - STAMP_TOL:
        logger.warning("Discarding stale solution", plan_id=plan_id, age=age, horizon=horizon)
        raise StaleSolution(f"solution aged {age:.3f} s of a {horizon:.3f} s horizon", age=age, horizon=horizon)
    dropped = int(math.ceil(age / tau - 1e-9)) if compensate else 0
    cbuf.replace(controls[max(dropped, 0):], now, tau, plan_id)
    return dropped, gamma


class Executor:
    """Applies the due control each tick; holds the last one briefly when starved, then commands zero."""

    def __init__(self, cbuf: ControlBuffer, hold_ticks: int = 5):
        self.cbuf = cbuf
        self.hold_ticks = hold_ticks
        self.last = np.zeros(2)
        self.last_plan = -1
        self.starved = 0

    def step(self, now: float) -> Tuple[np.ndarray, int]:
        due = self.cbuf.pop_due(now)
        if due is not None:
            self.last = due.control
            self.last_plan = due.plan_id
            self.starved = 0
            return due.control.copy(), due.plan_id
        self.starved += 1
        if self.starved <= self.hold_ticks:
            return self.last.copy(), self.last_plan
        if self.starved == self.hold_ticks + 1:
            logger.warning("Executor starved, commanding zero", now=now)
        return np.zeros(2), -1


def executor_step(executor: Executor, now: float) -> np.ndarray:
    """Control to apply at ``now``."""
    return executor.step(now)[0]


# ------------------------------------------------------------------ virtual clock

@dataclass(order=True)
class _Event:
    t_us: int
    priority: int
    seq: int
    actor: str = field(compare=False)
    payload: Any = field(compare=False, default=None)


class VirtualScheduler:
    """Deterministic event queue ordered by (time, priority, submission order)."""

    def __init__(self, start_us: int = 0):
        self._now_us = start_us
        self._queue: List[_Event] = []
        self._seq = 0

    @property
    def now_us(self) -> int:
        return self._now_us

    @property
    def now(self) -> float:
        return self._now_us / US_PER_S

    def schedule(self, t_us: int, priority: int, actor: str, payload: Any = None) -> None:
        if t_us < self._now_us:
            raise ValueError("cannot schedule in the past")
        self._seq += 1
        heapq.heappush(self._queue, _Event(t_us, priority, self._seq, actor, payload))

    def has_pending(self) -> bool:
        return bool(self._queue)

    def pop(self) -> _Event:
        event = heapq.heappop(self._queue)
        self._now_us = event.t_us
        return event


# ------------------------------------------------------------------ closed loop

@dataclass
class PlanRecord:
    plan_id: int
    computed_at: float
    xi_stamp: float
    delivered_at: float
    gamma: float
    dropped: int
    n: int
    cost: float
    iterations: int
    reason: str


@dataclass
class ExecutionTrace:
    """Everything a closed-loop run produced, in time order."""

    method: str
    objective: str
    seed: int
    times: List[float] = field(default_factory=list)
    states: List[np.ndarray] = field(default_factory=list)
    controls: List[np.ndarray] = field(default_factory=list)
    plan_ids: List[int] = field(default_factory=list)
    observations: List[TimedState] = field(default_factory=list)
    plans: List[PlanRecord] = field(default_factory=list)
    errors: List[Tuple[float, str, str]] = field(default_factory=list)
    goal_reached_at: Optional[float] = None

    @property
    def state_array(self) -> np.ndarray:
        return np.array(self.states).reshape(-1, 6)

    @property
    def positions(self) -> np.ndarray:
        return self.state_array[:, :2]

    @property
    def max_speed(self) -> float:
        s = self.state_array
        return float(np.max(np.hypot(s[:, 3], s[:, 4]))) if len(s) else 0.0

    def rows(self) -> List[list]:
        plans = {p.plan_id: p for p in self.plans}
        out = []
        for t, s, u, pid in zip(self.times, self.states, self.controls, self.plan_ids):
            rec = plans.get(pid)
            out.append([t, *s.tolist(), *u.tolist(), pid,
                        rec.gamma if rec else math.nan, rec.dropped if rec else -1])
        return out


def write_trace(trace: ExecutionTrace, path: Union[str, Path]) -> None:
    """Write the trace CSV; floats use repr so identical runs give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_COLUMNS)
        for row in trace.rows():
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def read_trace(path: Union[str, Path]) -> np.ndarray:
    """Trace CSV as a float array with the columns of ``TRACE_COLUMNS``."""
    try:
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            rows = [[float(v) for v in row] for row in reader if row]
    except (OSError, StopIteration, ValueError) as e:
        logger.error("Failed to read trace", path=str(path), error=str(e))
        raise
    if tuple(header) != TRACE_COLUMNS:
        raise ValueError(f"{path}: unexpected trace columns {header}")
    return np.array(rows, dtype=float).reshape(-1, len(TRACE_COLUMNS))


def _prefill_history(start: np.ndarray, span: float, tau: float) -> List[TimedState]:
    """Straight-line past ending at ``start`` at t = 0, stamped on the tau grid."""
    steps = int(math.ceil(span / tau)) + 1
    th = start[2]
    vel = np.array([math.cos(th) * start[3] - math.sin(th) * start[4],
                    math.sin(th) * start[3] + math.cos(th) * start[4]])
    out = []
    for k in range(steps, 0, -1):
        s = start.copy()
        s[:2] = start[:2] - vel * k * tau
        out.append(TimedState(RobotState.from_array(s), round(-k * tau, 9)))
    out.append(TimedState(RobotState.from_array(start), 0.0))
    return out


def run_closed_loop(sim_params: SimParams, controller: Union[FkdModel, IkdModel], objective: str,
                    target: Union[PathMap, np.ndarray], cfg: RuntimeConfig, spec: WindowSpec, seed: int,
                    duration: float, start: Union[RobotState, np.ndarray],
                    lm_cfg: LMConfig = LMConfig(), start_index: Optional[int] = 0,
                    stop_when: Optional[Callable[[np.ndarray, float], bool]] = None) -> ExecutionTrace:
    """
    Run estimator, optimizer, updater and executor against the simulator on the virtual clock.

    Args:
        sim_params: Plant constants; ``noise_std`` drives process noise from ``seed``
        controller: Forward model (least-squares planning) or inverse model (tracking)
        objective: "path" (target is a PathMap) or "connect" (target is a goal state)
        cfg: Runtime settings
        spec: Window configuration shared with the model
        seed: Seeds process noise and start jitter
        duration: Simulated seconds
        start: Nominal start state, jittered by ``cfg.start_jitter``
        lm_cfg: Solver settings
        start_index: Path vertex the robot starts at; seeds windowed localization
        stop_when: Optional ``(state, t) -> bool`` ending the run early (goal reached)

    Returns:
        ExecutionTrace; errors raised by actors are recorded in ``trace.errors``
    """
    cfg.validate(spec)
    sim_params.check_tau(spec.tau)
    is_ikd = isinstance(controller, IkdModel)
    if is_ikd and objective != "path":
        raise ConfigError("the inverse model can only track a path")
    method = "ikd" if is_ikd else "fkd"
    trace = ExecutionTrace(method, objective, seed)
    rng = np.random.default_rng(seed)
    squash = SquashMap.for_sim(sim_params)

    s0 = start.as_array() if isinstance(start, RobotState) else np.asarray(start, dtype=float).copy()
    pos_jit, head_jit = cfg.start_jitter
    if pos_jit > 0 or head_jit > 0:
        s0[:3] += rng.normal(0.0, 1.0, 3) * np.array([pos_jit, pos_jit, head_jit])
        s0[2] = wrap_angle(s0[2])

    tau = spec.tau
    tau_us = to_us(tau)
    lead = spec.t_model + cfg.epsilon + cfg.buffer_margin
    truth = _prefill_history(s0, lead + cfg.epsilon, tau)
    buf = StateBuffer(cfg.buffer_capacity(spec))
    est_us = to_us(cfg.estimator_period)
    t_us = -int(math.ceil(to_us(lead) / est_us)) * est_us
    while t_us <= 0:
        obs = observe_delayed(truth, t_us / US_PER_S, cfg.epsilon)
        buf.push(TimedState(obs.state, t_us / US_PER_S))
        t_us += est_us

    cbuf = ControlBuffer()
    executor = Executor(cbuf, cfg.starvation_hold_ticks)
    sched = VirtualScheduler()
    sched.schedule(tau_us, PRIORITY_EXECUTOR, "executor")
    sched.schedule(t_us, PRIORITY_ESTIMATOR, "estimator")
    sched.schedule(0, PRIORITY_OPTIMIZER, "optimizer")
    end_us = to_us(duration)
    plan_period_us = to_us(cfg.ikd_period if is_ikd else cfg.period)
    fixed_us = to_us(cfg.ikd_compute_time if is_ikd else cfg.optimizer_compute_time)

    previous: Optional[PlanResult] = None
    hint = start_index if objective == "path" else None
    next_plan_id = 0
    log = logger.bind(method=method, objective=objective, seed=seed)

    def execute(now: float) -> bool:
        state = truth[-1].state.as_array()
        control, plan_id = executor.step(now)
        trace.times.append(now)
        trace.states.append(state)
        trace.controls.append(control)
        trace.plan_ids.append(plan_id)
        if stop_when is not None and stop_when(state, now):
            trace.goal_reached_at = now
            return False
        try:
            nxt = sim_step_array(state, control, tau, sim_params, rng)
        except SimulationError as e:
            trace.errors.append((now, "executor", str(e)))
            log.error("Simulation failed", t=now, error=str(e))
            return False
        truth.append(TimedState(RobotState.from_array(nxt), now + tau))
        return True

    # The executor at t=0 applies the first tick before anything is planned.
    running = execute(0.0)
    while running and sched.has_pending():
        event = sched.pop()
        if event.t_us > end_us:
            break
        now = sched.now
        if event.actor == "executor":
            running = execute(now)
            sched.schedule(event.t_us + tau_us, PRIORITY_EXECUTOR, "executor")
        elif event.actor == "estimator":
            try:
                obs = observe_delayed(truth, now, cfg.epsilon)
                stamped = TimedState(obs.state, now)
                buf.push(stamped)
                trace.observations.append(stamped)
            except HistoryGap as e:
                trace.errors.append((now, "estimator", str(e)))
            sched.schedule(event.t_us + est_us, PRIORITY_ESTIMATOR, "estimator")
        elif event.actor == "optimizer":
            started = time.perf_counter()
            try:
                if is_ikd:
                    plan = ikd_plan_once(controller, buf, target, cfg, spec, hint)
                else:
                    plan = plan_once(objective, controller, buf, target, cfg, spec, lm_cfg, squash, previous, hint)
            except (HistoryGap, NumericalFailure, DimensionError) as e:
                trace.errors.append((now, "optimizer", str(e)))
                log.warning("Planning failed", t=now, error=str(e))
                sched.schedule(event.t_us + plan_period_us, PRIORITY_OPTIMIZER, "optimizer")
                continue
            if cfg.latency_mode == "instant":
                compute_us = 0
            elif cfg.latency_mode == "fixed":
                compute_us = fixed_us
            else:
                compute_us = to_us(time.perf_counter() - started)
            previous = plan
            if plan.path_index is not None:
                hint = plan.path_index
            deliver_us = event.t_us + compute_us
            sched.schedule(deliver_us, PRIORITY_DELIVERY, "delivery", (next_plan_id, now, plan))
            next_plan_id += 1
            sched.schedule(max(event.t_us + plan_period_us, deliver_us), PRIORITY_OPTIMIZER, "optimizer")
        elif event.actor == "delivery":
            plan_id, computed_at, plan = event.payload
            try:
                dropped, gamma = updater_apply(plan.controls, plan.xi_used.stamp, now, cfg.epsilon, cbuf, tau,
                                               plan_id, cfg.compensate_latency)
            except StaleSolution as e:
                trace.errors.append((now, "updater", str(e)))
                continue
            trace.plans.append(PlanRecord(plan_id, computed_at, plan.xi_used.stamp, now, gamma, dropped,
                                          plan.n, plan.cost, plan.iterations, plan.reason))
    return trace


def measure_plan_budget(model: FkdModel, path: PathMap, cfg: RuntimeConfig, spec: WindowSpec,
                        lm_cfg: LMConfig, sim_params: SimParams, repeats: int = 10) -> Dict[str, float]:
    """
    Wall-clock cost of cold-started path-following cycles against the real-time budget 0.5 * delta_t.

    The buffer holds a straight run at ``v_desired`` along the first path vertex heading.
    """
    start = path.positions[0]
    s0 = np.array([start[0], start[1], start[2], cfg.v_desired, 0.0, 0.0])
    truth = _prefill_history(s0, spec.t_model + cfg.epsilon + cfg.buffer_margin, spec.tau)
    buf = StateBuffer(cfg.buffer_capacity(spec))
    for item in truth:
        buf.push(item)
    squash = SquashMap.for_sim(sim_params)
    durations = []
    with OperationLogger(logger, "measure_plan_budget", repeats=repeats):
        for cycle in range(repeats):
            with OperationLogger(logger, "plan_cycle", level="debug", cycle=cycle) as op:
                plan_once("path", model, buf, path, cfg, spec, lm_cfg, squash, None, 0)
            durations.append(op.elapsed)
    d = np.asarray(durations)
    budget = 0.5 * cfg.delta_t
    report = {
        "cycles": float(len(d)),
        "mean": float(d.mean()),
        "p95": float(np.percentile(d, 95)),
        "max": float(d.max()),
        "budget": budget,
        "within_budget": float(d.max() < budget),
    }
    logger.info("Plan budget", **report)
    return report
