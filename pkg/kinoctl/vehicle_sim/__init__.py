"""Vehicle Simulator

Ground-truth kinodynamic plant used as data source and evaluation environment:
first-order velocity and yaw-rate tracking, a speed-dependent yaw-rate limit
and first-order lateral slip, integrated with fixed-step RK4. Also provides
latency-delayed observation of a recorded state history.
"""

import bisect
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from kinoctl.exceptions import ConfigError, HistoryGap, SimulationError
from kinoctl.geometry import STATE_FIELDS, wrap_angle

# Two stamps closer than this are the same instant.
STAMP_TOL = 1e-9
_BOUND_TOL = 1e-9


@dataclass(frozen=True)
class RobotState:
    """Planar vehicle state; ``theta`` is wrapped into (-pi, pi] on construction."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0
    v_x: float = 0.0
    v_y: float = 0.0
    omega: float = 0.0

    def __post_init__(self):
        if math.isfinite(self.theta):
            object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v_x, self.v_y, self.omega], dtype=float)

    @classmethod
    def from_array(cls, values) -> "RobotState":
        v = np.asarray(values, dtype=float)
        return cls(*(float(c) for c in v[:6]))

    @property
    def pose(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=float)

    @property
    def speed(self) -> float:
        return math.hypot(self.v_x, self.v_y)

    def is_finite(self) -> bool:
        return all(math.isfinite(getattr(self, name)) for name in STATE_FIELDS)


@dataclass(frozen=True)
class Control:
    """Piecewise-constant command: forward velocity ``delta`` and angular velocity ``psi``."""

    delta: float = 0.0
    psi: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.delta, self.psi], dtype=float)

    @classmethod
    def from_array(cls, values) -> "Control":
        v = np.asarray(values, dtype=float)
        return cls(float(v[0]), float(v[1]))


@dataclass(frozen=True)
class TimedState:
    state: RobotState
    stamp: float


@dataclass(frozen=True)
class SimParams:
    """Plant constants. Defaults make 3 m/s cornering saturate the yaw-rate limit."""

    T_v: float = 0.3
    T_w: float = 0.2
    T_slip: float = 0.15
    k_slip: float = 0.25
    mu_g: float = 4.0
    a_max: float = 4.0
    v_max: float = 4.0
    psi_max: float = 4.0
    dt_sub: float = 0.005
    noise_std: float = 0.0

    def __post_init__(self):
        for name in ("T_v", "T_w", "T_slip", "dt_sub", "mu_g", "a_max", "v_max", "psi_max"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"sim.{name} must be > 0, got {getattr(self, name)}")
        if self.noise_std < 0:
            raise ConfigError("sim.noise_std must be >= 0")

    def substeps(self, tau: float) -> int:
        return max(1, int(round(tau / self.dt_sub)))

    def check_tau(self, tau: float) -> None:
        """Raise ConfigError unless dt_sub divides tau exactly."""
        n = tau / self.dt_sub
        if abs(n - round(n)) > 1e-9 or round(n) < 1:
            raise ConfigError(f"sim.dt_sub={self.dt_sub} does not divide tau={tau}")

    @property
    def control_lo(self) -> np.ndarray:
        return np.array([0.0, -self.psi_max])

    @property
    def control_hi(self) -> np.ndarray:
        return np.array([self.v_max, self.psi_max])


def yaw_rate_target(v_x: float, psi: float, params: SimParams) -> float:
    """Commanded yaw rate after the lateral-acceleration limit mu_g / max(v_x, 0.1)."""
    limit = params.mu_g / max(v_x, 0.1)
    return min(max(psi, -limit), limit)


def _derivative(s, delta, psi, p: SimParams, n_v, n_w):
    _, _, th, vx, vy, w = s
    acc = (delta - vx) / p.T_v
    acc = min(max(acc, -p.a_max), p.a_max) + n_v
    dw = (yaw_rate_target(vx, psi, p) - w) / p.T_w + n_w
    dvy = (-p.k_slip * vx * w - vy) / p.T_slip
    c = math.cos(th)
    sn = math.sin(th)
    return (vx * c - vy * sn, vx * sn + vy * c, w, acc, dvy, dw)


def _advance(s, k, h):
    return tuple(si + h * ki for si, ki in zip(s, k))


def _rk4(s, delta, psi, h, p, n_v, n_w):
    k1 = _derivative(s, delta, psi, p, n_v, n_w)
    k2 = _derivative(_advance(s, k1, 0.5 * h), delta, psi, p, n_v, n_w)
    k3 = _derivative(_advance(s, k2, 0.5 * h), delta, psi, p, n_v, n_w)
    k4 = _derivative(_advance(s, k3, h), delta, psi, p, n_v, n_w)
    return tuple(
        si + (h / 6.0) * (a + 2.0 * b + 2.0 * c + d)
        for si, a, b, c, d in zip(s, k1, k2, k3, k4)
    )


def _check_inputs(state: np.ndarray, u: np.ndarray, tau: float, params: SimParams) -> None:
    if not tau > 0:
        raise SimulationError(f"tau must be > 0, got {tau}")
    if not np.all(np.isfinite(state)):
        raise SimulationError(f"non-finite state: {state.tolist()}")
    delta, psi = float(u[0]), float(u[1])
    if not (math.isfinite(delta) and math.isfinite(psi)):
        raise SimulationError(f"non-finite control: {u.tolist()}")
    if delta < -_BOUND_TOL or delta > params.v_max + _BOUND_TOL or abs(psi) > params.psi_max + _BOUND_TOL:
        raise SimulationError(f"control out of bounds: delta={delta}, psi={psi}")


def sim_step_array(state: np.ndarray, u: np.ndarray, tau: float, params: SimParams,
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Array form of :func:`sim_step` on ``(x, y, theta, v_x, v_y, omega)`` vectors."""
    state = np.asarray(state, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_inputs(state, u, tau, params)
    delta, psi = float(u[0]), float(u[1])
    n = params.substeps(tau)
    h = tau / n
    s = tuple(float(v) for v in state[:6])
    noisy = rng is not None and params.noise_std > 0
    for _ in range(n):
        if noisy:
            n_v, n_w = (float(z) for z in rng.normal(0.0, params.noise_std, 2))
        else:
            n_v = n_w = 0.0
        s = _rk4(s, delta, psi, h, params, n_v, n_w)
    out = np.array(s, dtype=float)
    out[2] = wrap_angle(out[2])
    return out


def sim_step(state: RobotState, u: Control, tau: float, params: SimParams,
             rng: Optional[np.random.Generator] = None) -> RobotState:
    """
    Advance the plant by ``tau`` seconds under a constant command.

    Args:
        state: Start state
        u: Command held for the whole step
        tau: Step duration in seconds
        params: Plant constants
        rng: Generator for process noise, only used when ``params.noise_std > 0``

    Returns:
        State after the step

    Raises:
        SimulationError: non-finite state or command outside the bounds
    """
    return RobotState.from_array(sim_step_array(state.as_array(), u.as_array(), tau, params, rng))


def sim_rollout_array(state: np.ndarray, controls: np.ndarray, tau: float, params: SimParams,
                      rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Array form of :func:`sim_rollout`; returns (n, 6)."""
    controls = np.asarray(controls, dtype=float).reshape(-1, 2)
    out = np.empty((len(controls), 6), dtype=float)
    s = np.asarray(state, dtype=float)
    for i, u in enumerate(controls):
        s = sim_step_array(s, u, tau, params, rng)
        out[i] = s
    return out


def sim_rollout(state: RobotState, controls: Sequence[Control], tau: float, params: SimParams,
                rng: Optional[np.random.Generator] = None) -> List[RobotState]:
    """Iterate :func:`sim_step`; element i is the state after i + 1 steps."""
    out = []
    s = state
    for u in controls:
        s = sim_step(s, u, tau, params, rng)
        out.append(s)
    return out


def interpolate_state(a: RobotState, b: RobotState, frac: float) -> RobotState:
    """Linear interpolation between two states; heading along the shorter arc."""
    va = a.as_array()
    vb = b.as_array()
    out = va + frac * (vb - va)
    out[2] = wrap_angle(va[2] + frac * wrap_angle(vb[2] - va[2]))
    return RobotState.from_array(out)


def state_at(history: Sequence[TimedState], t: float) -> RobotState:
    """
    Interpolate a stamp-ordered history at time ``t``.

    Raises:
        HistoryGap: ``t`` lies outside the history
    """
    if not history:
        raise HistoryGap("empty state history")
    first, last = history[0].stamp, history[-1].stamp
    if t < first - STAMP_TOL or t > last + STAMP_TOL:
        raise HistoryGap(f"history [{first:.6f}, {last:.6f}] does not cover t={t:.6f}")
    i = bisect.bisect_left(history, t - STAMP_TOL, key=lambda ts: ts.stamp)
    i = min(i, len(history) - 1)
    if abs(history[i].stamp - t) <= STAMP_TOL:
        return history[i].state
    lo, hi = history[i - 1], history[i]
    frac = (t - lo.stamp) / (hi.stamp - lo.stamp)
    return interpolate_state(lo.state, hi.state, frac)


def observe_delayed(history: Sequence[TimedState], now: float, epsilon: float) -> TimedState:
    """
    Observe the plant through an estimator with latency ``epsilon``.

    Args:
        history: Ground-truth states with strictly increasing stamps
        now: Current time
        epsilon: Estimator latency in seconds

    Returns:
        The state at ``now - epsilon`` stamped ``now - epsilon``

    Raises:
        HistoryGap: history does not cover ``now - epsilon``
    """
    t = now - epsilon
    return TimedState(state_at(history, t), t)
