"""Forward Kinodynamic Model

Window-level state prediction, the recurrent multi-window rollout, its exact
Jacobian with respect to every control, backprop-through-time training and the
model file format.

Network input layout (fixed contract): the past window flattened row-major
(W x 6, body frame of its first state) followed by the control window flattened
row-major (W x 2). Output: the next W states in the same frame.
"""

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from kinoctl.dense_net import (
    AdamState,
    GradBundle,
    NetParams,
    adam_step,
    dumps_json,
    net_backward,
    net_forward,
    net_init,
    net_input_jacobian,
    params_from_dict,
    params_to_dict,
)
from kinoctl.exceptions import ConfigError, DatasetError, DimensionError
from kinoctl.geometry import (
    compose_pose,
    compose_pose_tangent,
    relative_pose,
    relative_pose_tangent,
    relative_pose_vjp,
)
from kinoctl.logging import OperationLogger, get_logger
from kinoctl.traj_data import (
    Dataset,
    Trajectory,
    WindowSpec,
    sample_window_starts,
    stack_windows,
    windows_from_trajectory,
)
from kinoctl.vehicle_sim import SimParams, sim_rollout_array

logger = get_logger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    """Optimizer and architecture settings shared by the FKD and IKD trainers."""

    seed: int = 0
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 80
    hidden_layers: int = 6
    hidden_units: int = 256
    windows_per_trajectory: int = 64
    loss_weights: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))
        if self.epochs < 0 or self.batch_size < 1 or self.windows_per_trajectory < 1:
            raise ConfigError("train.epochs >= 0, train.batch_size >= 1 and train.windows_per_trajectory >= 1 required")
        if not self.lr > 0 or not 0 < self.lr_decay <= 1 or self.lr_decay_every < 1:
            raise ConfigError("train.lr > 0, 0 < train.lr_decay <= 1 and train.lr_decay_every >= 1 required")
        if self.hidden_layers < 0 or self.hidden_units < 1:
            raise ConfigError("train.hidden_layers >= 0 and train.hidden_units >= 1 required")
        if len(self.loss_weights) != 6 or min(self.loss_weights) < 0:
            raise ConfigError("train.loss_weights must be 6 non-negative numbers")

    def layer_sizes(self, n_in: int, n_out: int) -> List[int]:
        return [n_in] + [self.hidden_units] * self.hidden_layers + [n_out]

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)


@dataclass
class TrainingSummary:
    """Per-epoch record written into model files."""

    epochs: int = 0
    iterations: int = 0
    train_loss: List[float] = field(default_factory=list)
    validation_loss: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "epochs": self.epochs,
            "iterations": self.iterations,
            "train_loss": [float(v) for v in self.train_loss],
            "validation_loss": [float(v) for v in self.validation_loss],
        }

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> Optional["TrainingSummary"]:
        if data is None:
            return None
        return cls(int(data["epochs"]), int(data["iterations"]),
                   list(data.get("train_loss", [])), list(data.get("validation_loss", [])))


@dataclass(frozen=True, eq=False)
class RolloutResult:
    """World-frame predictions at tau spacing plus the per-chunk body-frame outputs and anchors."""

    states: np.ndarray
    body_outputs: np.ndarray
    anchors: np.ndarray

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


class FkdModel:
    """Learned forward model: predicts W future states from W past states and W controls."""

    kind = "fkd"

    def __init__(self, params: NetParams, spec: WindowSpec, training: Optional[TrainingSummary] = None):
        w = spec.steps_per_window
        if params.input_size != w * 8 or params.output_size != w * 6:
            raise DimensionError(
                f"network {params.input_size}->{params.output_size} does not fit window of {w} steps "
                f"(expected {w * 8}->{w * 6})"
            )
        self.params = params
        self.spec = spec
        self.training = training

    @property
    def steps_per_window(self) -> int:
        return self.spec.steps_per_window

    def _check_window(self, past_body: np.ndarray, controls: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        w = self.steps_per_window
        past_body = np.asarray(past_body, dtype=float)
        controls = np.asarray(controls, dtype=float)
        if past_body.shape != (w, 6) or controls.shape != (w, 2):
            raise DimensionError(f"expected past ({w}, 6) and controls ({w}, 2), got {past_body.shape} and {controls.shape}")
        return past_body, controls

    def predict_window(self, past_body: np.ndarray, controls: np.ndarray) -> np.ndarray:
        """One network pass; returns (W, 6) states in the frame of ``past_body``."""
        past_body, controls = self._check_window(past_body, controls)
        out, _ = net_forward(self.params, np.concatenate([past_body.ravel(), controls.ravel()]))
        return out.reshape(self.steps_per_window, 6)

    def window_jacobian(self, past_body: np.ndarray, controls: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Prediction plus d output / d (past, controls) as a (W*6, W*8) matrix."""
        past_body, controls = self._check_window(past_body, controls)
        out, cache = net_forward(self.params, np.concatenate([past_body.ravel(), controls.ravel()]))
        return out.reshape(self.steps_per_window, 6), net_input_jacobian(self.params, cache)


class OracleFkdModel(FkdModel):
    """
    Simulator behind the model interface.

    Predicts by integrating the plant from the last past state, so rollouts
    reproduce ``sim_rollout`` up to rounding. Jacobians use central differences.
    """

    kind = "oracle"

    def __init__(self, sim_params: SimParams, spec: WindowSpec, fd_step: float = 1e-6):
        self.params = None
        self.spec = spec
        self.training = None
        self.sim_params = sim_params
        self.fd_step = fd_step

    def predict_window(self, past_body: np.ndarray, controls: np.ndarray) -> np.ndarray:
        past_body, controls = self._check_window(past_body, controls)
        lo, hi = self.sim_params.control_lo, self.sim_params.control_hi
        return sim_rollout_array(past_body[-1], np.clip(controls, lo, hi), self.spec.tau, self.sim_params)

    def window_jacobian(self, past_body: np.ndarray, controls: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        past_body, controls = self._check_window(past_body, controls)
        w = self.steps_per_window
        x = np.concatenate([past_body.ravel(), controls.ravel()])
        out = self.predict_window(past_body, controls)
        jac = np.zeros((w * 6, x.size))
        h = self.fd_step
        for k in range(x.size):
            xp = x.copy()
            xm = x.copy()
            xp[k] += h
            xm[k] -= h
            yp = self.predict_window(xp[:w * 6].reshape(w, 6), xp[w * 6:].reshape(w, 2))
            ym = self.predict_window(xm[:w * 6].reshape(w, 6), xm[w * 6:].reshape(w, 2))
            jac[:, k] = (yp - ym).ravel() / (2.0 * h)
        return out, jac


def fkd_predict_window(model: FkdModel, past_states_body: np.ndarray, controls: np.ndarray) -> np.ndarray:
    """
    Predict the next window of states from a body-frame past window.

    Args:
        model: Forward model
        past_states_body: (W, 6) past states in the body frame of the first one
        controls: (W, 2) controls applied from the last past state onward

    Returns:
        (W, 6) predicted states in the same body frame

    Raises:
        DimensionError: shapes differ from the model window
    """
    return model.predict_window(past_states_body, controls)


def _check_rollout_inputs(model: FkdModel, history: np.ndarray, controls: np.ndarray) -> Tuple[np.ndarray, np.ndarray, int]:
    w = model.steps_per_window
    history = np.asarray(history, dtype=float)
    controls = np.asarray(controls, dtype=float).reshape(-1, 2)
    if history.shape != (w, 6):
        raise DimensionError(f"history must be ({w}, 6), got {history.shape}")
    if len(controls) == 0 or len(controls) % w:
        raise DimensionError(f"{len(controls)} controls is not a positive multiple of the {w}-step model window")
    return history, controls, len(controls) // w


def fkd_rollout(model: FkdModel, history: np.ndarray, controls: np.ndarray) -> RolloutResult:
    """
    Chain window predictions over ``len(controls) * tau`` seconds.

    Chunk 0 conditions on ``history``; chunk j >= 1 conditions on chunk j-1's
    predicted states, re-framed to the first of them.

    Args:
        model: Forward model
        history: (W, 6) most recent world-frame states, the last one paired with controls[0]
        controls: (n, 2) controls, n a multiple of W

    Returns:
        RolloutResult with n world-frame states

    Raises:
        DimensionError: horizon is not a whole number of model windows
    """
    history, controls, chunks = _check_rollout_inputs(model, history, controls)
    w = model.steps_per_window
    window = history
    states, bodies, anchors = [], [], []
    for j in range(chunks):
        anchor = window[0]
        body = model.predict_window(relative_pose(anchor, window), controls[j * w:(j + 1) * w])
        window = compose_pose(anchor, body)
        anchors.append(anchor)
        bodies.append(body)
        states.append(window)
    return RolloutResult(np.concatenate(states), np.stack(bodies), np.stack(anchors))


def fkd_rollout_jacobian(model: FkdModel, history: np.ndarray, controls: np.ndarray) -> Tuple[RolloutResult, np.ndarray]:
    """
    Rollout plus the exact Jacobian of every predicted world state w.r.t. every control.

    Tangents are pushed forward chunk by chunk through the re-framing, the
    network input Jacobian and the composition back to world frame.

    Returns:
        (rollout, J) with J of shape (n * 6, n * 2); rows follow states
        row-major, columns follow controls row-major
    """
    history, controls, chunks = _check_rollout_inputs(model, history, controls)
    w = model.steps_per_window
    n = len(controls)
    cols = n * 2
    window = history
    d_window = np.zeros((w, 6, cols))
    jac = np.zeros((n * 6, cols))
    states, bodies, anchors = [], [], []
    for j in range(chunks):
        anchor = window[0]
        d_anchor = d_window[0]
        past_body = relative_pose(anchor, window)
        d_past = relative_pose_tangent(anchor, past_body, d_anchor, d_window)
        body, net_jac = model.window_jacobian(past_body, controls[j * w:(j + 1) * w])
        d_body = net_jac[:, :w * 6] @ d_past.reshape(w * 6, cols)
        d_body[:, 2 * j * w:2 * (j + 1) * w] += net_jac[:, w * 6:]
        world = compose_pose(anchor, body)
        d_world = compose_pose_tangent(anchor, world, d_anchor, d_body.reshape(w, 6, cols))
        jac[j * w * 6:(j + 1) * w * 6] = d_world.reshape(w * 6, cols)
        anchors.append(anchor)
        bodies.append(body)
        states.append(world)
        window, d_window = world, d_world
    return RolloutResult(np.concatenate(states), np.stack(bodies), np.stack(anchors)), jac


# ------------------------------------------------------------------ training

def _recurrent_loss(params: NetParams, past: np.ndarray, controls: np.ndarray, targets: np.ndarray,
                    weights: np.ndarray, with_grad: bool) -> Tuple[float, Optional[GradBundle]]:
    """Batch-mean recurrent sum of squares and, optionally, its gradient through every chunk."""
    batch, chunks, w, _ = controls.shape
    caches, outputs, frames = [], [], []
    window = past
    loss = 0.0
    for j in range(chunks):
        x = np.concatenate([window.reshape(batch, w * 6), controls[:, j].reshape(batch, w * 2)], axis=1)
        out, cache = net_forward(params, x)
        out = out.reshape(batch, w, 6)
        loss += float(np.sum(weights * (out - targets[:, j]) ** 2))
        caches.append(cache)
        outputs.append(out)
        frames.append(window)
        if j + 1 < chunks:
            window = relative_pose(out[:, None, 0], out)
    loss /= batch
    if not with_grad:
        return loss, None

    g_out = [2.0 * weights * (outputs[j] - targets[:, j]) / batch for j in range(chunks)]
    total = None
    for j in range(chunks - 1, -1, -1):
        grads = net_backward(params, caches[j], g_out[j].reshape(batch, w * 6))
        total = grads if total is None else total + grads
        if j > 0:
            g_past = grads.input[:, :w * 6].reshape(batch, w, 6)
            g_anchor, g_target = relative_pose_vjp(outputs[j - 1][:, 0], frames[j], g_past)
            g_out[j - 1] = g_out[j - 1] + g_target
            g_out[j - 1][:, 0] += g_anchor
    return loss, total


def _batched_loss(params: NetParams, arrays: Tuple[np.ndarray, ...], loss_fn, batch_size: int) -> float:
    n = len(arrays[0])
    if n == 0:
        return float("nan")
    total = 0.0
    for start in range(0, n, batch_size):
        part = tuple(a[start:start + batch_size] for a in arrays)
        total += loss_fn(params, part, False)[0] * len(part[0])
    return total / n


def run_training(params: NetParams, train: Tuple[np.ndarray, ...], validation: Tuple[np.ndarray, ...],
                 loss_fn, cfg: TrainingConfig, name: str) -> Tuple[NetParams, TrainingSummary]:
    """
    Minibatch Adam loop shared by the forward and inverse trainers.

    ``loss_fn(params, arrays, with_grad)`` returns the batch-mean loss and its
    gradient bundle.
    """
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.zeros_like(params, lr=cfg.lr)
    summary = TrainingSummary()
    n = len(train[0])
    for epoch in range(cfg.epochs):
        state = state.with_lr(cfg.lr_at(epoch))
        order = rng.permutation(n)
        started = time.perf_counter()
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_fn(params, tuple(a[idx] for a in train), True)
            params, state = adam_step(params, grads, state)
            running += loss * len(idx)
            summary.iterations += 1
        train_loss = running / n
        val_loss = _batched_loss(params, validation, loss_fn, cfg.batch_size)
        summary.epochs += 1
        summary.train_loss.append(train_loss)
        summary.validation_loss.append(val_loss)
        logger.info(f"{name} epoch", epoch=epoch + 1, train_loss=train_loss, validation_loss=val_loss,
                    lr=state.lr, seconds=round(time.perf_counter() - started, 3))
        if not params.is_finite():
            raise DatasetError(f"{name} training diverged at epoch {epoch + 1}")
    return params, summary


def fkd_training_arrays(trajectories: Sequence[Trajectory], spec: WindowSpec,
                        windows_per_trajectory: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    windows = []
    for traj in trajectories:
        windows.extend(windows_from_trajectory(traj, windows_per_trajectory, spec))
    return stack_windows(windows, spec)


def train_fkd(dataset: Dataset, spec: WindowSpec, cfg: TrainingConfig = TrainingConfig()) -> FkdModel:
    """
    Fit the forward model under the recurrent multi-window objective.

    Each training window is rolled out over ``spec.chunks`` model windows with
    the model consuming its own predictions; gradients flow through the whole
    chain.

    Args:
        dataset: Recorded trajectories
        spec: Window configuration
        cfg: Optimizer and architecture settings

    Returns:
        Trained model carrying its training summary

    Raises:
        DatasetError: no training windows
    """
    if not dataset.train:
        raise DatasetError("train_fkd needs at least one training trajectory")
    train = fkd_training_arrays(dataset.train, spec, cfg.windows_per_trajectory)
    if dataset.validation:
        validation = fkd_training_arrays(dataset.validation, spec, cfg.windows_per_trajectory)
    else:
        validation = tuple(a[:0] for a in train)
    w = spec.steps_per_window
    weights = np.asarray(cfg.loss_weights)

    def loss_fn(params, arrays, with_grad):
        return _recurrent_loss(params, *arrays, weights, with_grad)

    params = net_init(cfg.seed, cfg.layer_sizes(w * 8, w * 6))
    with OperationLogger(logger, "train_fkd", windows=len(train[0]), chunks=spec.chunks, epochs=cfg.epochs):
        params, summary = run_training(params, train, validation, loss_fn, cfg, "fkd")
    return FkdModel(params, spec, summary)


def open_loop_position_rmse(model: FkdModel, trajectories: Sequence[Trajectory], spec: WindowSpec,
                            windows_per_trajectory: int = 16) -> float:
    """Position RMSE (m) of t_pred-second open-loop rollouts started from recorded histories."""
    w = spec.steps_per_window
    n = spec.pred_steps
    errors = []
    for traj in trajectories:
        for t_a in sample_window_starts(traj, windows_per_trajectory, spec):
            a = int(round(t_a / traj.tau))
            rollout = fkd_rollout(model, traj.states[a - w + 1:a + 1], traj.controls[a:a + n])
            errors.append(rollout.states[:, :2] - traj.states[a + 1:a + n + 1, :2])
    if not errors:
        raise DatasetError("no evaluation windows")
    err = np.concatenate(errors)
    return float(np.sqrt(np.mean(np.sum(err ** 2, axis=1))))


# ------------------------------------------------------------------ model files

def model_to_dict(params: NetParams, spec: WindowSpec, kind: str,
                  training: Optional[TrainingSummary]) -> Dict[str, Any]:
    data = params_to_dict(params)
    data["kind"] = kind
    data["spec"] = spec.to_dict()
    data["training"] = training.to_dict() if training is not None else None
    return data


def read_model_file(path: Union[str, Path], kind: str) -> Tuple[NetParams, WindowSpec, Optional[TrainingSummary]]:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        logger.error("Failed to read model file", path=str(path), error=str(e))
        raise DatasetError(f"cannot read model file {path}: {e}") from e
    if data.get("kind", "fkd") != kind:
        raise DatasetError(f"{path} holds a {data.get('kind')!r} model, expected {kind!r}")
    spec = WindowSpec(**data["spec"])
    return params_from_dict(data), spec, TrainingSummary.from_dict(data.get("training"))


def write_model_file(data: Dict[str, Any], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(data))
    logger.info("Saved model", path=str(path), kind=data["kind"])


def save_fkd_model(model: FkdModel, path: Union[str, Path]) -> None:
    if model.params is None:
        raise DimensionError("an oracle model has no weights to save")
    write_model_file(model_to_dict(model.params, model.spec, "fkd", model.training), path)


def load_fkd_model(path: Union[str, Path]) -> FkdModel:
    params, spec, training = read_model_file(path, "fkd")
    return FkdModel(params, spec, training)
