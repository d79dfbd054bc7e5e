"""Nonlinear Least Squares

Levenberg-Marquardt on dense normal equations, the bounded-control
reparameterization, the path-following and optimal-connectivity residual
problems built on the forward model, and the outer search over the step count
of a connectivity solve.
"""

import csv
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from kinoctl.exceptions import ConfigError, DimensionError, KinoctlError, NumericalFailure
from kinoctl.fkd_model import FkdModel, fkd_rollout, fkd_rollout_jacobian
from kinoctl.geometry import wrap_angle
from kinoctl.logging import OperationLogger, get_logger

logger = get_logger(__name__)

_ZERO_COST = 1e-30
_DIAG_FLOOR = 1e-12
_ATANH_CLIP = 1.0 - 1e-12

COST_TABLE_COLUMNS = ("n", "cost", "terminal_err", "time_term", "iters", "reason")


@dataclass(frozen=True)
class LMConfig:
    max_iters: int = 50
    lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 3.0
    lambda_max: float = 1e16
    grad_tol: float = 1e-8
    step_tol: float = 1e-8
    cost_tol: float = 1e-8

    def __post_init__(self):
        if self.max_iters < 0:
            raise ConfigError("solver.max_iters must be >= 0")
        if not (self.lambda0 > 0 and self.lambda_max > self.lambda0):
            raise ConfigError("solver.lambda0 must be > 0 and below solver.lambda_max")
        if not (self.lambda_up > 1 and self.lambda_down > 1):
            raise ConfigError("solver.lambda_up and solver.lambda_down must be > 1")
        if not (self.grad_tol > 0 and self.step_tol > 0 and self.cost_tol > 0):
            raise ConfigError("solver tolerances must be > 0")


@dataclass
class LMResult:
    x: np.ndarray
    cost: float
    iterations: int
    reason: str
    cost_history: List[float] = field(default_factory=list)
    residuals: Optional[np.ndarray] = None


class ResidualProblem(ABC):
    """Residual vector and Jacobian of a least-squares objective 0.5 * ||r(x)||^2."""

    num_residuals: int
    num_params: int

    @abstractmethod
    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Residual vector at ``x``."""

    @abstractmethod
    def linearize(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Residuals and Jacobian (num_residuals x num_params) at ``x``."""

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return self.linearize(x)[1]


class FunctionProblem(ResidualProblem):
    """Residual problem from plain callables."""

    def __init__(self, residual_fn, jacobian_fn, num_residuals: int, num_params: int):
        self.residual_fn = residual_fn
        self.jacobian_fn = jacobian_fn
        self.num_residuals = num_residuals
        self.num_params = num_params

    def evaluate(self, x):
        return np.asarray(self.residual_fn(x), dtype=float)

    def linearize(self, x):
        return self.evaluate(x), np.asarray(self.jacobian_fn(x), dtype=float)


def _half_sq(r: np.ndarray) -> float:
    return 0.5 * float(r @ r)


def lm_solve(problem: ResidualProblem, x0: np.ndarray, cfg: LMConfig = LMConfig()) -> LMResult:
    """
    Minimize 0.5 * ||r(x)||^2 by Levenberg-Marquardt.

    Each iteration solves (J^T J + lambda * diag(J^T J)) delta = -J^T r. A step is
    accepted when the cost decreases (lambda divided by ``lambda_down``),
    otherwise lambda is multiplied by ``lambda_up`` and the step is retried.

    Args:
        problem: Residual problem
        x0: Start point
        cfg: Damping schedule and tolerances

    Returns:
        LMResult whose ``reason`` is one of gradient, step, cost, max_iters

    Raises:
        NumericalFailure: non-finite start cost, or the damped system stays
            unsolvable while lambda escalates past ``lambda_max``
    """
    x = np.array(x0, dtype=float)
    if x.shape != (problem.num_params,):
        raise DimensionError(f"x0 has shape {x.shape}, problem expects ({problem.num_params},)")
    r, jac = problem.linearize(x)
    if r.shape != (problem.num_residuals,) or jac.shape != (problem.num_residuals, problem.num_params):
        raise DimensionError(f"problem returned r {r.shape} and J {jac.shape}")
    cost = _half_sq(r)
    if not math.isfinite(cost):
        raise NumericalFailure(f"non-finite cost {cost} at the start point")
    history = [cost]
    lam = cfg.lambda0
    iteration = 0
    reason = "max_iters"

    if cost <= _ZERO_COST:
        return LMResult(x, cost, 0, "cost", history, r)

    while iteration < cfg.max_iters:
        grad = jac.T @ r
        if float(np.max(np.abs(grad))) <= cfg.grad_tol:
            reason = "gradient"
            break
        jtj = jac.T @ jac
        diag = np.maximum(np.diag(jtj), _DIAG_FLOOR * (1.0 + float(np.max(np.diag(jtj)))))
        iteration += 1
        try:
            delta = np.linalg.solve(jtj + lam * np.diag(diag), -grad)
        except np.linalg.LinAlgError:
            delta = None
        if delta is None or not np.all(np.isfinite(delta)):
            lam *= cfg.lambda_up
            if lam > cfg.lambda_max:
                raise NumericalFailure(f"damped normal equations unsolvable up to lambda={cfg.lambda_max:g}")
            continue

        step_small = float(np.linalg.norm(delta)) <= cfg.step_tol * (float(np.linalg.norm(x)) + cfg.step_tol)
        x_trial = x + delta
        r_trial = problem.evaluate(x_trial)
        cost_trial = _half_sq(r_trial)
        if math.isfinite(cost_trial) and cost_trial < cost:
            decrease = (cost - cost_trial) / cost
            x = x_trial
            cost = cost_trial
            history.append(cost)
            lam = max(lam / cfg.lambda_down, 1e-15)
            if cost <= _ZERO_COST or decrease <= cfg.cost_tol:
                r = r_trial
                reason = "cost"
                break
            if step_small:
                r = r_trial
                reason = "step"
                break
            r, jac = problem.linearize(x)
        else:
            if step_small:
                reason = "step"
                break
            lam *= cfg.lambda_up
            if lam > cfg.lambda_max:
                reason = "step"
                break

    logger.debug("lm_solve finished", iterations=iteration, cost=cost, reason=reason)
    return LMResult(x, cost, iteration, reason, history, r)


@dataclass(frozen=True, eq=False)
class SquashMap:
    """Per-channel bounds mapping unbounded variables onto the open box (lo, hi)."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ConfigError(f"squash bounds need lo < hi per channel, got {lo} and {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def for_sim(cls, sim_params) -> "SquashMap":
        return cls(sim_params.control_lo, sim_params.control_hi)

    @property
    def channels(self) -> int:
        return self.lo.size


def control_squash(squash: SquashMap, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Map unbounded ``z`` (flat, channel-minor) to bounded controls.

    Returns:
        (controls, dc/dz) both shaped like ``z``
    """
    z = np.asarray(z, dtype=float)
    zz = z.reshape(-1, squash.channels)
    t = np.tanh(zz)
    half = 0.5 * (squash.hi - squash.lo)
    controls = squash.lo + half * (t + 1.0)
    factors = half * (1.0 - t * t)
    return controls.reshape(z.shape), factors.reshape(z.shape)


def control_unsquash(squash: SquashMap, controls: np.ndarray) -> np.ndarray:
    """Inverse of :func:`control_squash`; values on or past a bound map to a large finite z."""
    c = np.asarray(controls, dtype=float)
    cc = c.reshape(-1, squash.channels)
    y = 2.0 * (cc - squash.lo) / (squash.hi - squash.lo) - 1.0
    return np.arctanh(np.clip(y, -_ATANH_CLIP, _ATANH_CLIP)).reshape(c.shape)


class _SquashedProblem(ResidualProblem):
    """Residual problem over squashed variables; subclasses define residuals of controls."""

    def __init__(self, model: FkdModel, history: np.ndarray, n: int, squash: SquashMap):
        w = model.steps_per_window
        if n < 1 or n % w:
            raise DimensionError(f"step count {n} is not a positive multiple of the {w}-step model window")
        self.model = model
        self.history = np.asarray(history, dtype=float)
        self.n = n
        self.squash = squash
        self.num_params = n * 2

    @abstractmethod
    def residuals(self, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Residuals and their Jacobian with respect to the flattened controls."""

    @abstractmethod
    def residuals_only(self, u: np.ndarray) -> np.ndarray:
        """Residuals of the flattened controls."""

    def evaluate(self, z):
        controls, _ = control_squash(self.squash, z)
        return self.residuals_only(controls)

    def linearize(self, z):
        controls, factors = control_squash(self.squash, z)
        r, jac_u = self.residuals(controls)
        return r, jac_u * factors[None, :]


class PathFollowingProblem(_SquashedProblem):
    """Track pose targets at tau spacing over the optimization horizon."""

    def __init__(self, model: FkdModel, history: np.ndarray, targets: np.ndarray, squash: SquashMap,
                 weights: Sequence[float] = (1.0, 1.0, 0.5)):
        targets = np.asarray(targets, dtype=float)
        if targets.ndim != 2 or targets.shape[1] < 3:
            raise DimensionError(f"targets must be (n, >=3), got {targets.shape}")
        super().__init__(model, history, len(targets), squash)
        self.targets = targets[:, :3]
        self.weights = np.asarray(weights, dtype=float)
        self.num_residuals = self.n * 3

    def _pose_residuals(self, predicted: np.ndarray) -> np.ndarray:
        err = self.targets - predicted[:, :3]
        err[:, 2] = wrap_angle(err[:, 2])
        return (self.weights * err).ravel()

    def residuals_only(self, u):
        return self._pose_residuals(fkd_rollout(self.model, self.history, u.reshape(-1, 2)).states)

    def residuals(self, u):
        return path_following_residuals(self, u)


def path_following_residuals(p: PathFollowingProblem, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Weighted pose errors of the predicted rollout against the targets.

    Args:
        p: Problem definition
        u: Flat controls, length n * 2

    Returns:
        (residuals of length n * 3, Jacobian w.r.t. ``u``)
    """
    u = np.asarray(u, dtype=float)
    if u.size != p.n * 2:
        raise DimensionError(f"expected {p.n * 2} control values, got {u.size}")
    rollout, jac = fkd_rollout_jacobian(p.model, p.history, u.reshape(-1, 2))
    r = p._pose_residuals(rollout.states)
    pose_rows = jac.reshape(p.n, 6, -1)[:, :3, :]
    return r, -(p.weights[None, :, None] * pose_rows).reshape(p.n * 3, -1)


class ConnectivityProblem(_SquashedProblem):
    """Reach a full goal state in n steps; the last residual is the time cost alpha * n * tau."""

    def __init__(self, model: FkdModel, history: np.ndarray, goal: np.ndarray, n: int, alpha: float,
                 squash: SquashMap, weights: Sequence[float] = (1.0, 1.0, 0.5, 0.3, 0.3, 0.1)):
        super().__init__(model, history, n, squash)
        self.goal = np.asarray(goal, dtype=float)
        self.alpha = float(alpha)
        self.weights = np.asarray(weights, dtype=float)
        self.num_residuals = 7
        if self.goal.shape != (6,) or self.weights.shape != (6,):
            raise DimensionError("goal and connectivity weights must have 6 components")

    @property
    def time_term(self) -> float:
        return self.alpha * self.n * self.model.spec.tau

    def _terminal_residuals(self, final: np.ndarray) -> np.ndarray:
        err = self.goal - final
        err[2] = wrap_angle(err[2])
        return np.append(self.weights * err, self.time_term)

    def residuals_only(self, u):
        return self._terminal_residuals(fkd_rollout(self.model, self.history, u.reshape(-1, 2)).final_state)

    def residuals(self, u):
        return connectivity_residuals(self, u)


def connectivity_residuals(p: ConnectivityProblem, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Weighted terminal-state errors plus the time term.

    Returns:
        (residuals of length 7, Jacobian w.r.t. ``u``; the time row is zero)
    """
    u = np.asarray(u, dtype=float)
    if u.size != p.n * 2:
        raise DimensionError(f"expected {p.n * 2} control values, got {u.size}")
    rollout, jac = fkd_rollout_jacobian(p.model, p.history, u.reshape(-1, 2))
    r = p._terminal_residuals(rollout.final_state)
    jac_r = np.zeros((7, u.size))
    jac_r[:6] = -p.weights[:, None] * jac[-6:]
    return r, jac_r


@dataclass
class CostRow:
    n: int
    cost: float
    terminal_err: float
    time_term: float
    iters: int
    reason: str


def _resize(z: np.ndarray, n: int) -> np.ndarray:
    """Truncate or pad (repeating the last control) a flat two-channel variable vector to n steps."""
    zz = z.reshape(-1, 2)
    if len(zz) >= n:
        return zz[:n].ravel().copy()
    pad = np.repeat(zz[-1:], n - len(zz), axis=0)
    return np.vstack([zz, pad]).ravel()


def connectivity_candidates(n_range: Tuple[int, int], steps_per_window: int) -> List[int]:
    lo, hi = int(n_range[0]), int(n_range[1])
    first = -(-max(lo, 1) // steps_per_window) * steps_per_window
    candidates = list(range(first, hi + 1, steps_per_window))
    if not candidates:
        raise ConfigError(f"n_range {n_range} holds no multiple of {steps_per_window}")
    return candidates


def solve_optimal_connectivity(model: FkdModel, history: np.ndarray, x_f: np.ndarray, alpha: float,
                               n_range: Tuple[int, int], cfg: LMConfig, squash: SquashMap,
                               weights: Sequence[float] = (1.0, 1.0, 0.5, 0.3, 0.3, 0.1),
                               initial_speed: float = 1.0,
                               warm_start: Optional[np.ndarray] = None) -> Tuple[np.ndarray, int, List[CostRow]]:
    """
    Time-optimal steering: search the step count n and the controls jointly.

    Candidates are the multiples of the model window inside ``n_range``. Every
    second candidate is solved first (coarse pass, ascending, each warm-started
    from the previous solution, the first from ``warm_start`` when given), then
    the unsolved neighbours of the best
    coarse n are refined. The winner minimizes ||r||^2, terminal error plus
    (alpha * n * tau)^2.

    Returns:
        (controls (n*, 2), n*, one CostRow per evaluated n in evaluation order)

    Raises:
        NumericalFailure: every candidate failed
    """
    w = model.steps_per_window
    candidates = connectivity_candidates(n_range, w)
    coarse = candidates[::2]
    if candidates[-1] not in coarse:
        coarse.append(candidates[-1])
    if warm_start is not None:
        z_init = np.asarray(warm_start, dtype=float).ravel()
    else:
        z_init = control_unsquash(squash, np.tile([initial_speed, 0.0], candidates[0]))
    table: List[CostRow] = []
    solutions = {}

    def solve(n: int, z0: np.ndarray) -> Optional[np.ndarray]:
        problem = ConnectivityProblem(model, history, x_f, n, alpha, squash, weights)
        try:
            result = lm_solve(problem, _resize(z0, n), cfg)
        except (KinoctlError, FloatingPointError) as e:
            logger.warning("Connectivity candidate failed", n=n, error=str(e))
            table.append(CostRow(n, math.inf, math.inf, problem.time_term ** 2, 0, f"failed: {e}"))
            return None
        r = result.residuals
        terminal = float(r[:6] @ r[:6])
        table.append(CostRow(n, terminal + problem.time_term ** 2, terminal, problem.time_term ** 2,
                             result.iterations, result.reason))
        solutions[n] = (result.x, table[-1].cost)
        return result.x

    with OperationLogger(logger, "solve_optimal_connectivity", level="debug", alpha=alpha, candidates=len(candidates)):
        z = z_init
        for n in coarse:
            solved = solve(n, z)
            if solved is not None:
                z = solved
        if not solutions:
            raise NumericalFailure(f"all {len(coarse)} connectivity candidates failed")
        best_coarse = min(solutions, key=lambda k: solutions[k][1])
        evaluated = {row.n for row in table}
        for n in (best_coarse - w, best_coarse + w):
            if n in candidates and n not in evaluated:
                solve(n, solutions[best_coarse][0])

    n_best = min(solutions, key=lambda k: (solutions[k][1], k))
    controls, _ = control_squash(squash, solutions[n_best][0])
    return controls.reshape(-1, 2), n_best, table


def write_cost_table(table: Sequence[CostRow], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(COST_TABLE_COLUMNS)
        for row in table:
            writer.writerow([row.n, repr(row.cost), repr(row.terminal_err), repr(row.time_term), row.iters, row.reason])
