"""
Tests for excitation data, window slicing and dataset files.
"""

import json

import numpy as np
import pytest

from kinoctl.exceptions import ConfigError, DatasetError, WindowRange
from kinoctl.geometry import compose_pose
from kinoctl.traj_data import (
    DataConfig,
    ExcitationConfig,
    Trajectory,
    WindowSpec,
    extract_training_window,
    generate_dataset,
    generate_excitation_controls,
    load_dataset,
    load_trajectory,
    record_trajectory,
    sample_window_starts,
    save_trajectory,
    stack_windows,
    windows_from_trajectory,
)
from kinoctl.vehicle_sim import RobotState


class TestWindowSpec:
    """Tests for window arithmetic."""

    def test_defaults(self):
        """0.5 s windows of 0.05 s steps, six chunks over 3 s."""
        spec = WindowSpec()
        assert spec.steps_per_window == 10
        assert spec.chunks == 6
        assert spec.pred_steps == 60
        assert spec.steps_for(1.0) == 20

    def test_rejects_fractional_window(self):
        """t_model must be a whole number of steps."""
        with pytest.raises(ConfigError):
            WindowSpec(t_model=0.52)

    def test_horizon_must_be_whole_windows(self):
        """Planning horizons are multiples of t_model."""
        with pytest.raises(ConfigError):
            WindowSpec().steps_for(0.75)


class TestExcitation:
    """Tests for the excitation command generator."""

    def test_shape_and_bounds(self, sim_params):
        """Commands cover the duration and respect the bounds."""
        controls = generate_excitation_controls(ExcitationConfig(seed=1, duration=10.0), sim_params)
        assert controls.shape == (200, 2)
        assert controls[:, 0].min() >= 0.0
        assert controls[:, 0].max() <= sim_params.v_max
        assert np.abs(controls[:, 1]).max() <= sim_params.psi_max

    def test_seeded(self):
        """The seed fixes the sequence."""
        a = generate_excitation_controls(ExcitationConfig(seed=3, duration=5.0))
        b = generate_excitation_controls(ExcitationConfig(seed=3, duration=5.0))
        c = generate_excitation_controls(ExcitationConfig(seed=4, duration=5.0))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_invalid_band(self):
        """Frequency bands must be ordered and positive."""
        with pytest.raises(ConfigError):
            ExcitationConfig(delta_band=(0.5, 0.1))


class TestRecording:
    """Tests for trajectory recording."""

    def test_pairs_states_and_controls(self, cruise_trajectory, cruise_controls):
        """n controls give n + 1 samples; the last control is repeated."""
        assert len(cruise_trajectory) == len(cruise_controls) + 1
        assert np.array_equal(cruise_trajectory.states[0], np.zeros(6))
        assert np.array_equal(cruise_trajectory.controls[-1], cruise_trajectory.controls[-2])
        assert cruise_trajectory.t_f == pytest.approx(3.0)

    def test_empty_controls_raise(self, sim_params):
        """Recording needs at least one control."""
        with pytest.raises(DatasetError):
            record_trajectory(RobotState(), np.zeros((0, 2)), sim_params)

    def test_rejects_non_finite(self):
        """Trajectories must be finite."""
        states = np.zeros((3, 6))
        states[1, 0] = np.nan
        with pytest.raises(DatasetError):
            Trajectory(0.05, states, np.zeros((3, 2)))

    def test_file_round_trip(self, cruise_trajectory, tmp_path):
        """A saved trajectory loads back unchanged."""
        path = tmp_path / "traj.jsonl"
        save_trajectory(cruise_trajectory, path)
        loaded = load_trajectory(path)
        assert loaded.tau == cruise_trajectory.tau
        assert np.array_equal(loaded.states, cruise_trajectory.states)
        assert np.array_equal(loaded.controls, cruise_trajectory.controls)

    def test_bad_header_raises(self, tmp_path):
        """Unknown file versions are rejected."""
        path = tmp_path / "traj.jsonl"
        path.write_text(json.dumps({"tau": 0.05, "version": 99}) + "\n")
        with pytest.raises(DatasetError):
            load_trajectory(path)


class TestWindows:
    """Tests for training-window slicing."""

    def test_window_starts_span_valid_range(self, cruise_trajectory, small_spec):
        """Starts run from t_model to t_f - t_pred on the tau grid."""
        starts = sample_window_starts(cruise_trajectory, 5, small_spec)
        assert starts[0] == pytest.approx(small_spec.t_model)
        assert starts[-1] == pytest.approx(cruise_trajectory.t_f - small_spec.t_pred)
        assert np.allclose(starts / 0.05, np.round(starts / 0.05))

    def test_short_trajectory_raises(self, sim_params):
        """A trajectory shorter than t_model + t_pred has no windows."""
        short = record_trajectory(RobotState(), np.ones((10, 2)), sim_params)
        with pytest.raises(WindowRange):
            sample_window_starts(short, 3, WindowSpec())

    def test_blocks_map_back_to_world(self, cruise_trajectory, small_spec):
        """Every target block composed with its anchor reproduces the recorded states."""
        window = extract_training_window(cruise_trajectory, 1.0, small_spec)
        w, c = small_spec.steps_per_window, small_spec.chunks
        a = 20
        blocks = window.target_states.reshape(c, w, 6)
        for j in range(c):
            world = compose_pose(window.anchors[j], blocks[j])
            assert np.allclose(world, cruise_trajectory.states[a + j * w + 1:a + (j + 1) * w + 1], atol=1e-12)
        assert np.allclose(window.past_states[0, :3], 0.0)
        assert np.array_equal(window.controls, cruise_trajectory.controls[a:a + c * w])

    def test_first_anchor_is_first_past_state(self, cruise_trajectory, small_spec):
        """Chunk 0 is framed on the first state of the past window."""
        window = extract_training_window(cruise_trajectory, 1.0, small_spec)
        w = small_spec.steps_per_window
        assert np.array_equal(window.anchors[0], cruise_trajectory.states[20 - w + 1])

    def test_off_grid_start_raises(self, cruise_trajectory, small_spec):
        """Start times must lie on the tau grid."""
        with pytest.raises(WindowRange):
            extract_training_window(cruise_trajectory, 1.01, small_spec)

    def test_stack_shapes(self, cruise_trajectory, small_spec):
        """Stacked windows have batch, chunk and step axes."""
        windows = windows_from_trajectory(cruise_trajectory, 4, small_spec)
        past, controls, targets = stack_windows(windows, small_spec)
        assert past.shape == (4, 2, 6)
        assert controls.shape == (4, 2, 2, 2)
        assert targets.shape == (4, 2, 2, 6)

    def test_stack_empty_raises(self, small_spec):
        """No windows is a dataset error."""
        with pytest.raises(DatasetError):
            stack_windows([], small_spec)


class TestDataset:
    """Tests for dataset directories."""

    def _config(self):
        return DataConfig(seed=2, n_train=2, n_validation=1, duration=4.0)

    def test_generate_and_load(self, sim_params, small_spec, tmp_path):
        """The manifest splits trajectories and the directory loads back."""
        manifest = generate_dataset(self._config(), sim_params, small_spec, tmp_path / "data")
        data = json.loads(manifest.read_text())
        assert len(data["split"]["train"]) == 2
        assert len(data["split"]["validation"]) == 1
        dataset = load_dataset(tmp_path / "data")
        assert len(dataset.train) == 2
        assert len(dataset.validation) == 1
        assert len(dataset.train[0]) == 81

    def test_deterministic_bytes(self, sim_params, small_spec, tmp_path):
        """The same configuration writes identical files."""
        generate_dataset(self._config(), sim_params, small_spec, tmp_path / "a")
        generate_dataset(self._config(), sim_params, small_spec, tmp_path / "b")
        for name in ("traj_000.jsonl", "traj_002.jsonl", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_missing_manifest_raises(self, tmp_path):
        """A directory without a manifest is not a dataset."""
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)

    def test_invalid_counts(self):
        """At least one training trajectory is required."""
        with pytest.raises(ConfigError):
            DataConfig(n_train=0)
