"""Trajectory Data Utilities

Excitation-driven data collection on the simulated plant, the trajectory file
codec, dataset directories with a manifest, and the cutting of trajectories
into the (past states, control blocks, target blocks) training windows used by
the recurrent model.

Window convention: the past block holds the ``t_model / tau`` states ending at
the state paired with the first control (a sample pairs a state with the
control applied from it). Every block is expressed in the body frame of the
first state of its conditioning window.
"""

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from kinoctl.exceptions import ConfigError, DatasetError, WindowRange
from kinoctl.geometry import compose_pose, relative_pose
from kinoctl.logging import OperationLogger, get_logger
from kinoctl.vehicle_sim import Control, RobotState, SimParams, sim_rollout_array

logger = get_logger(__name__)

FILE_VERSION = 1
_GRID_TOL = 1e-6


def _exact_ratio(num: float, den: float, what: str) -> int:
    ratio = num / den
    n = int(round(ratio))
    if n < 1 or abs(ratio - n) > 1e-9:
        raise ConfigError(f"{what} must be a positive integer, got {ratio}")
    return n


@dataclass(frozen=True)
class WindowSpec:
    """Sample spacing, single-pass model horizon and recurrent training horizon."""

    tau: float = 0.05
    t_model: float = 0.5
    t_pred: float = 3.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        _exact_ratio(self.t_model, self.tau, "t_model / tau")
        _exact_ratio(self.t_pred, self.t_model, "t_pred / t_model")

    @property
    def steps_per_window(self) -> int:
        return _exact_ratio(self.t_model, self.tau, "t_model / tau")

    @property
    def chunks(self) -> int:
        return _exact_ratio(self.t_pred, self.t_model, "t_pred / t_model")

    @property
    def pred_steps(self) -> int:
        return self.steps_per_window * self.chunks

    def steps_for(self, horizon: float) -> int:
        """Number of tau steps in ``horizon``; horizon must be a multiple of t_model."""
        _exact_ratio(horizon, self.t_model, "horizon / t_model")
        return _exact_ratio(horizon, self.tau, "horizon / tau")

    def to_dict(self) -> dict:
        return {"tau": self.tau, "t_model": self.t_model, "t_pred": self.t_pred}


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Recorded run: ``states[i]`` is paired with ``controls[i]``, spaced ``tau`` apart."""

    tau: float
    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        controls = np.asarray(self.controls, dtype=float)
        if states.ndim != 2 or states.shape[1] != 6 or len(states) == 0:
            raise DatasetError(f"states must be a non-empty (n, 6) array, got {states.shape}")
        if controls.shape != (len(states), 2):
            raise DatasetError(f"controls must be ({len(states)}, 2), got {controls.shape}")
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(controls))):
            raise DatasetError("trajectory contains non-finite values")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "controls", controls)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def t_f(self) -> float:
        return (len(self.states) - 1) * self.tau

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.states)) * self.tau

    @property
    def samples(self) -> Iterator[Tuple[RobotState, Control]]:
        for s, u in zip(self.states, self.controls):
            yield RobotState.from_array(s), Control.from_array(u)

    def transformed(self, pose: Sequence[float]) -> "Trajectory":
        """Copy of the trajectory with every state rigidly moved by ``pose`` (x, y, theta)."""
        return Trajectory(self.tau, compose_pose(np.asarray(pose, dtype=float), self.states), self.controls)


@dataclass(frozen=True, eq=False)
class TrainingWindow:
    """One training example; ``controls`` and ``target_states`` are chunk-major flat blocks."""

    t_a: float
    past_states: np.ndarray
    controls: np.ndarray
    target_states: np.ndarray
    anchors: np.ndarray


@dataclass(frozen=True)
class ExcitationConfig:
    """Speed-sweep plateaus plus band-limited sum-of-sinusoids on both channels."""

    seed: int = 0
    duration: float = 60.0
    tau: float = 0.05
    delta_sines: int = 4
    delta_band: Tuple[float, float] = (0.05, 0.3)
    delta_amplitude: float = 0.6
    psi_sines: int = 5
    psi_band: Tuple[float, float] = (0.05, 0.6)
    psi_amplitude: float = 2.5
    smoothing: float = 0.5
    speed_plateaus: Tuple[float, ...] = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5)
    shuffle_plateaus: bool = True

    def __post_init__(self):
        object.__setattr__(self, "delta_band", tuple(self.delta_band))
        object.__setattr__(self, "psi_band", tuple(self.psi_band))
        object.__setattr__(self, "speed_plateaus", tuple(self.speed_plateaus))
        if not (self.duration > 0 and self.tau > 0):
            raise ConfigError("excitation duration and tau must be > 0")
        for band in (self.delta_band, self.psi_band):
            if len(band) != 2 or not 0 < band[0] <= band[1]:
                raise ConfigError(f"frequency band must be 0 < lo <= hi, got {band}")
        if self.delta_amplitude < 0 or self.psi_amplitude < 0 or self.smoothing < 0:
            raise ConfigError("amplitudes and smoothing must be >= 0")
        if not self.speed_plateaus or min(self.speed_plateaus) < 0:
            raise ConfigError("speed_plateaus must be a non-empty list of speeds >= 0")


@dataclass(frozen=True)
class DataConfig:
    seed: int = 0
    n_train: int = 20
    n_validation: int = 5
    duration: float = 60.0
    workers: int = 1
    excitation: ExcitationConfig = field(default_factory=ExcitationConfig)

    def __post_init__(self):
        if isinstance(self.excitation, dict):
            object.__setattr__(self, "excitation", ExcitationConfig(**self.excitation))
        if self.n_train < 1 or self.n_validation < 0:
            raise ConfigError("data.n_train must be >= 1 and data.n_validation >= 0")


@dataclass
class Dataset:
    tau: float
    train: List[Trajectory]
    validation: List[Trajectory]


def _sum_of_sines(rng: np.random.Generator, t: np.ndarray, count: int, band, amplitude: float) -> np.ndarray:
    freqs = rng.uniform(band[0], band[1], count)
    phases = rng.uniform(0.0, 2.0 * np.pi, count)
    if count == 0:
        return np.zeros_like(t)
    per = amplitude / count
    return (per * np.sin(2.0 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])).sum(axis=0)


def generate_excitation_controls(cfg: ExcitationConfig, params: SimParams = SimParams()) -> np.ndarray:
    """
    Build a teleoperation-like command sequence.

    Args:
        cfg: Excitation settings; ``cfg.seed`` fixes every random draw
        params: Plant constants supplying the command bounds

    Returns:
        Array (duration / tau, 2) of (delta, psi) commands within the bounds
    """
    rng = np.random.default_rng(cfg.seed)
    n = int(round(cfg.duration / cfg.tau))
    t = np.arange(n) * cfg.tau
    plateaus = np.asarray(cfg.speed_plateaus, dtype=float)
    if cfg.shuffle_plateaus:
        plateaus = rng.permutation(plateaus)
    slot = np.minimum((t / (cfg.duration / len(plateaus))).astype(int), len(plateaus) - 1)
    raw = plateaus[slot]
    alpha = cfg.tau / (cfg.smoothing + cfg.tau)
    sweep = np.empty(n)
    level = raw[0] if n else 0.0
    for i in range(n):
        level = level + alpha * (raw[i] - level)
        sweep[i] = level
    delta = sweep + _sum_of_sines(rng, t, cfg.delta_sines, cfg.delta_band, cfg.delta_amplitude)
    psi = _sum_of_sines(rng, t, cfg.psi_sines, cfg.psi_band, cfg.psi_amplitude)
    controls = np.empty((n, 2))
    controls[:, 0] = np.clip(delta, 0.0, params.v_max)
    controls[:, 1] = np.clip(psi, -params.psi_max, params.psi_max)
    return controls


def record_trajectory(start: Union[RobotState, np.ndarray], controls: np.ndarray, params: SimParams,
                      tau: float = 0.05, rng: Optional[np.random.Generator] = None) -> Trajectory:
    """
    Drive the simulator with ``controls`` and record the paired samples.

    The terminal state is appended with a repeated last control, so n controls
    yield n + 1 samples.

    Raises:
        DatasetError: empty control sequence
    """
    controls = np.asarray(controls, dtype=float).reshape(-1, 2)
    if len(controls) == 0:
        raise DatasetError("record_trajectory needs at least one control")
    s0 = start.as_array() if isinstance(start, RobotState) else np.asarray(start, dtype=float)
    states = np.vstack([s0[None, :], sim_rollout_array(s0, controls, tau, params, rng)])
    return Trajectory(tau, states, np.vstack([controls, controls[-1:]]))


def sample_window_starts(traj: Trajectory, k: int, spec: WindowSpec) -> np.ndarray:
    """
    Evenly spaced window start times over [t_model, t_f - t_pred], snapped to the tau grid.

    Raises:
        WindowRange: the trajectory is shorter than t_model + t_pred
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    lo, hi = spec.t_model, traj.t_f - spec.t_pred
    if hi < lo - 1e-9:
        raise WindowRange(f"t_f={traj.t_f:.3f} shorter than t_model + t_pred = {spec.t_model + spec.t_pred:.3f}")
    times = np.array([lo]) if k == 1 else np.linspace(lo, max(lo, hi), k)
    return np.round(times / traj.tau) * traj.tau


def extract_training_window(traj: Trajectory, t_a: float, spec: WindowSpec) -> TrainingWindow:
    """
    Slice the window starting at ``t_a`` and express every block in its own body frame.

    Raises:
        WindowRange: ``t_a`` off the tau grid or outside [t_model, t_f - t_pred]
    """
    w, c = spec.steps_per_window, spec.chunks
    a = int(round(t_a / traj.tau))
    if abs(t_a / traj.tau - a) > _GRID_TOL:
        raise WindowRange(f"t_a={t_a} is not on the tau grid")
    if a < w or a + c * w > len(traj) - 1:
        raise WindowRange(f"t_a={t_a} outside [{spec.t_model}, {traj.t_f - spec.t_pred:.3f}]")
    states = traj.states
    past_world = states[a - w + 1:a + 1]
    anchors = states[a + (np.arange(c) - 1) * w + 1]
    blocks = states[a + 1:a + c * w + 1].reshape(c, w, 6)
    return TrainingWindow(
        t_a=a * traj.tau,
        past_states=relative_pose(past_world[0], past_world),
        controls=traj.controls[a:a + c * w].copy(),
        target_states=relative_pose(anchors[:, None, :], blocks).reshape(c * w, 6),
        anchors=anchors.copy(),
    )


def windows_from_trajectory(traj: Trajectory, k: int, spec: WindowSpec) -> List[TrainingWindow]:
    return [extract_training_window(traj, t, spec) for t in sample_window_starts(traj, k, spec)]


def stack_windows(windows: Sequence[TrainingWindow], spec: WindowSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch windows into (past (B, W, 6), controls (B, C, W, 2), targets (B, C, W, 6))."""
    if not windows:
        raise DatasetError("no training windows")
    w, c = spec.steps_per_window, spec.chunks
    past = np.stack([win.past_states for win in windows])
    controls = np.stack([win.controls for win in windows]).reshape(-1, c, w, 2)
    targets = np.stack([win.target_states for win in windows]).reshape(-1, c, w, 6)
    return past, controls, targets


# ---------------------------------------------------------------- file codec

def save_trajectory(traj: Trajectory, path: Union[str, Path]) -> None:
    """Write one header line then one JSON object per sample."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"tau": traj.tau, "version": FILE_VERSION})]
    for i, (s, u) in enumerate(zip(traj.states, traj.controls)):
        lines.append(json.dumps({
            "t": round(i * traj.tau, 9),
            "x": float(s[0]), "y": float(s[1]), "theta": float(s[2]),
            "v_x": float(s[3]), "v_y": float(s[4]), "omega": float(s[5]),
            "delta": float(u[0]), "psi": float(u[1]),
        }))
    path.write_text("\n".join(lines) + "\n")


def load_trajectory(path: Union[str, Path]) -> Trajectory:
    try:
        with open(path, "r") as f:
            header = json.loads(f.readline())
            rows = [json.loads(line) for line in f if line.strip()]
    except (OSError, json.JSONDecodeError) as e:
        logger.error("Failed to read trajectory", path=str(path), error=str(e))
        raise DatasetError(f"cannot read trajectory {path}: {e}") from e
    if header.get("version") != FILE_VERSION or "tau" not in header:
        raise DatasetError(f"{path}: unsupported trajectory header {header}")
    states = np.array([[r["x"], r["y"], r["theta"], r["v_x"], r["v_y"], r["omega"]] for r in rows])
    controls = np.array([[r["delta"], r["psi"]] for r in rows])
    return Trajectory(float(header["tau"]), states.reshape(-1, 6), controls.reshape(-1, 2))


def _build_trajectory(args) -> Trajectory:
    excitation, params, tau = args
    controls = generate_excitation_controls(excitation, params)
    return record_trajectory(RobotState(), controls, params, tau)


def generate_dataset(cfg: DataConfig, params: SimParams, spec: WindowSpec,
                     out_dir: Union[str, Path]) -> Path:
    """
    Generate train/validation trajectories and write them with a manifest.

    Trajectory i uses excitation seed ``cfg.seed * 10007 + i`` so the output is a
    pure function of the configuration.

    Returns:
        Path of the written manifest
    """
    params.check_tau(spec.tau)
    out_dir = Path(out_dir)
    total = cfg.n_train + cfg.n_validation
    jobs = [
        (replace(cfg.excitation, seed=cfg.seed * 10007 + i, tau=spec.tau, duration=cfg.duration), params, spec.tau)
        for i in range(total)
    ]
    with OperationLogger(logger, "generate_dataset", trajectories=total, out_dir=str(out_dir)):
        if cfg.workers > 1:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                trajectories = list(pool.map(_build_trajectory, jobs))
        else:
            trajectories = [_build_trajectory(job) for job in jobs]
        names = [f"traj_{i:03d}.jsonl" for i in range(total)]
        for name, traj in zip(names, trajectories):
            save_trajectory(traj, out_dir / name)
        manifest = {
            "version": FILE_VERSION,
            "tau": spec.tau,
            "seed": cfg.seed,
            "files": names,
            "split": {"train": names[:cfg.n_train], "validation": names[cfg.n_train:]},
        }
        manifest_path = out_dir / "manifest.json"
        manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest_path


def load_dataset(data_dir: Union[str, Path]) -> Dataset:
    """
    Load a dataset directory written by :func:`generate_dataset`.

    Raises:
        DatasetError: missing/malformed manifest or empty training split
    """
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if not os.path.exists(manifest_path):
        raise DatasetError(f"no manifest.json in {data_dir}")
    manifest = json.loads(manifest_path.read_text())
    split = manifest.get("split", {})
    train = [load_trajectory(data_dir / name) for name in split.get("train", [])]
    validation = [load_trajectory(data_dir / name) for name in split.get("validation", [])]
    if not train:
        raise DatasetError(f"{data_dir}: empty training split")
    logger.info("Loaded dataset", path=str(data_dir), train=len(train), validation=len(validation))
    return Dataset(float(manifest["tau"]), train, validation)
