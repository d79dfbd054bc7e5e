"""Inverse Kinodynamic Baseline

A network mapping (past window, desired next window) to the controls that
produce it, trained on the same data, architecture and iteration budget as the
forward model, plus the single tracking step used by the runtime.

Input layout: past W states then desired W states, both in the body frame of
the current pose (the last past state), each flattened row-major. Output: W
controls flattened row-major.
"""

from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from kinoctl.dense_net import NetParams, net_backward, net_forward, net_init
from kinoctl.exceptions import DatasetError, DimensionError
from kinoctl.fkd_model import (
    TrainingConfig,
    TrainingSummary,
    model_to_dict,
    read_model_file,
    run_training,
    write_model_file,
)
from kinoctl.geometry import relative_pose
from kinoctl.logging import OperationLogger, get_logger
from kinoctl.traj_data import Dataset, Trajectory, WindowSpec, sample_window_starts
from kinoctl.vehicle_sim import SimParams

logger = get_logger(__name__)


class IkdModel:
    """Inverse model with the control bounds its outputs are clamped to."""

    kind = "ikd"

    def __init__(self, params: NetParams, spec: WindowSpec, training: Optional[TrainingSummary] = None,
                 sim_params: Optional[SimParams] = None):
        w = spec.steps_per_window
        if params.input_size != w * 12 or params.output_size != w * 2:
            raise DimensionError(
                f"network {params.input_size}->{params.output_size} does not fit window of {w} steps "
                f"(expected {w * 12}->{w * 2})"
            )
        bounds = sim_params or SimParams()
        self.params = params
        self.spec = spec
        self.training = training
        self.control_lo = bounds.control_lo
        self.control_hi = bounds.control_hi

    @property
    def steps_per_window(self) -> int:
        return self.spec.steps_per_window


def ikd_training_arrays(trajectories: Sequence[Trajectory], spec: WindowSpec,
                        windows_per_trajectory: int) -> Tuple[np.ndarray, np.ndarray]:
    """Inputs (B, W*12) and logged-control targets (B, W*2) cut at the forward model's window starts."""
    w = spec.steps_per_window
    inputs, targets = [], []
    for traj in trajectories:
        for t_a in sample_window_starts(traj, windows_per_trajectory, spec):
            a = int(round(t_a / traj.tau))
            frame = traj.states[a]
            past = relative_pose(frame, traj.states[a - w + 1:a + 1])
            desired = relative_pose(frame, traj.states[a + 1:a + w + 1])
            inputs.append(np.concatenate([past.ravel(), desired.ravel()]))
            targets.append(traj.controls[a:a + w].ravel())
    if not inputs:
        raise DatasetError("no IKD training windows")
    return np.stack(inputs), np.stack(targets)


def _regression_loss(params: NetParams, inputs: np.ndarray, targets: np.ndarray, with_grad: bool):
    out, cache = net_forward(params, inputs)
    diff = out - targets
    batch = len(inputs)
    loss = float(np.sum(diff ** 2)) / batch
    if not with_grad:
        return loss, None
    return loss, net_backward(params, cache, 2.0 * diff / batch)


def train_ikd(dataset: Dataset, spec: WindowSpec, cfg: TrainingConfig = TrainingConfig(),
              sim_params: Optional[SimParams] = None) -> IkdModel:
    """
    Supervised regression from (past, desired next window) to the logged controls.

    Uses the forward trainer's loop, architecture and window sampling so both
    models see the same data and iteration count.

    Raises:
        DatasetError: empty dataset
    """
    if not dataset.train:
        raise DatasetError("train_ikd needs at least one training trajectory")
    train = ikd_training_arrays(dataset.train, spec, cfg.windows_per_trajectory)
    if dataset.validation:
        validation = ikd_training_arrays(dataset.validation, spec, cfg.windows_per_trajectory)
    else:
        validation = tuple(a[:0] for a in train)
    w = spec.steps_per_window
    params = net_init(cfg.seed, cfg.layer_sizes(w * 12, w * 2))

    def loss_fn(p, arrays, with_grad):
        return _regression_loss(p, *arrays, with_grad)

    with OperationLogger(logger, "train_ikd", windows=len(train[0]), epochs=cfg.epochs):
        params, summary = run_training(params, train, validation, loss_fn, cfg, "ikd")
    return IkdModel(params, spec, summary, sim_params)


def ikd_track_step(model: IkdModel, history: np.ndarray, desired: np.ndarray) -> np.ndarray:
    """
    Controls for the next window given the recent history and the desired states.

    Args:
        model: Inverse model
        history: (W, 6) most recent world-frame states, the last one is the current pose
        desired: (W, 6) world-frame desired states at tau spacing after the current pose

    Returns:
        (W, 2) controls clamped to the control bounds
    """
    w = model.steps_per_window
    history = np.asarray(history, dtype=float)
    desired = np.asarray(desired, dtype=float)
    if history.shape != (w, 6) or desired.shape != (w, 6):
        raise DimensionError(f"history and desired must be ({w}, 6), got {history.shape} and {desired.shape}")
    frame = history[-1]
    x = np.concatenate([relative_pose(frame, history).ravel(), relative_pose(frame, desired).ravel()])
    out, _ = net_forward(model.params, x)
    return np.clip(out.reshape(w, 2), model.control_lo, model.control_hi)


def save_ikd_model(model: IkdModel, path: Union[str, Path]) -> None:
    write_model_file(model_to_dict(model.params, model.spec, "ikd", model.training), path)


def load_ikd_model(path: Union[str, Path], sim_params: Optional[SimParams] = None) -> IkdModel:
    params, spec, training = read_model_file(path, "ikd")
    return IkdModel(params, spec, training, sim_params)
