"""
Tests for the ground-truth simulator and delayed observation.
"""

import math

import numpy as np
import pytest

from kinoctl.exceptions import ConfigError, HistoryGap, SimulationError
from kinoctl.vehicle_sim import (
    Control,
    RobotState,
    SimParams,
    TimedState,
    interpolate_state,
    observe_delayed,
    sim_rollout,
    sim_rollout_array,
    sim_step,
    sim_step_array,
    state_at,
    yaw_rate_target,
)


class TestSimParams:
    """Tests for plant constants."""

    def test_defaults_divide_tau(self):
        """The default sub-step divides the default control period."""
        SimParams().check_tau(0.05)
        assert SimParams().substeps(0.05) == 10

    def test_rejects_non_dividing_tau(self):
        """A control period that is not a multiple of dt_sub is a config error."""
        with pytest.raises(ConfigError):
            SimParams().check_tau(0.0525)

    def test_rejects_non_positive_constants(self):
        """Time constants must be positive."""
        with pytest.raises(ConfigError):
            SimParams(T_v=0.0)

    def test_control_bounds(self):
        """Bounds come from v_max and psi_max."""
        p = SimParams(v_max=3.0, psi_max=2.0)
        assert p.control_lo.tolist() == [0.0, -2.0]
        assert p.control_hi.tolist() == [3.0, 2.0]


class TestSimStep:
    """Tests for one integration step."""

    def test_rest_stays_at_rest(self, sim_params):
        """Zero command from rest leaves the state unchanged."""
        out = sim_step(RobotState(), Control(), 0.05, sim_params)
        assert out == RobotState()

    def test_straight_line_converges_to_command(self, sim_params):
        """A constant forward command drives v_x to delta without lateral motion."""
        states = sim_rollout_array(np.zeros(6), np.tile([2.0, 0.0], (100, 1)), 0.05, sim_params)
        final = states[-1]
        assert final[3] == pytest.approx(2.0, abs=1e-3)
        assert final[1] == 0.0
        assert final[2] == 0.0
        assert final[4] == 0.0

    def test_steady_motion(self, sim_params):
        """Holding the current speed straight ahead moves v_x * tau along the heading."""
        out = sim_step_array(np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0]), np.array([1.0, 0.0]), 0.05, sim_params)
        assert out == pytest.approx([0.05, 0.0, 0.0, 1.0, 0.0, 0.0], abs=1e-12)

    def test_mirror_symmetry(self, sim_params):
        """Negating the steering mirrors y, heading, lateral velocity and yaw rate."""
        controls = np.column_stack([np.linspace(0.5, 2.5, 40), 0.8 * np.sin(np.linspace(0.0, 3.0, 40))])
        left = sim_rollout_array(np.zeros(6), controls, 0.05, sim_params)
        right = sim_rollout_array(np.zeros(6), controls * [1.0, -1.0], 0.05, sim_params)
        mirror = np.array([1.0, -1.0, -1.0, 1.0, -1.0, -1.0])
        assert np.allclose(right, left * mirror, atol=1e-12)

    def test_substep_convergence(self):
        """Halving the integration sub-step changes a three second rollout by less than 1e-6."""
        controls = np.column_stack([np.full(60, 1.0), 0.5 * np.cos(np.linspace(0.0, 6.0, 60))])
        coarse = sim_rollout_array(np.zeros(6), controls, 0.05, SimParams())
        fine = sim_rollout_array(np.zeros(6), controls, 0.05, SimParams(dt_sub=0.0025))
        assert np.max(np.abs(coarse - fine)) < 1e-6

    def test_empty_rollout(self, sim_params):
        """No controls give no states."""
        assert sim_rollout(RobotState(), [], 0.05, sim_params) == []
        assert sim_rollout_array(np.zeros(6), np.zeros((0, 2)), 0.05, sim_params).shape == (0, 6)

    def test_acceleration_is_limited(self, sim_params):
        """Speed cannot rise faster than a_max."""
        out = sim_step_array(np.zeros(6), np.array([4.0, 0.0]), 0.05, sim_params)
        assert out[3] <= sim_params.a_max * 0.05 + 1e-12

    def test_steady_turn_slips(self, sim_params):
        """A steady turn settles at omega = psi with lateral velocity -k_slip * v_x * omega."""
        states = sim_rollout_array(np.zeros(6), np.tile([1.0, 1.0], (200, 1)), 0.05, sim_params)
        final = states[-1]
        assert final[5] == pytest.approx(1.0, abs=1e-3)
        assert final[4] == pytest.approx(-sim_params.k_slip * final[3] * final[5], abs=1e-3)

    def test_yaw_rate_target_saturates(self, sim_params):
        """At 3 m/s the yaw-rate command is capped at mu_g / v_x."""
        assert yaw_rate_target(3.0, 4.0, sim_params) == pytest.approx(4.0 / 3.0)
        assert yaw_rate_target(0.0, 4.0, sim_params) == 4.0

    def test_heading_is_wrapped(self, sim_params):
        """Headings stay inside (-pi, pi]."""
        start = RobotState(theta=math.pi - 0.01, v_x=1.0, omega=2.0)
        out = sim_step(start, Control(1.0, 2.0), 0.05, sim_params)
        assert -math.pi < out.theta <= math.pi
        assert out.theta < 0

    @pytest.mark.parametrize("control", [(4.5, 0.0), (-0.1, 0.0), (1.0, 4.2), (math.nan, 0.0)])
    def test_rejects_bad_controls(self, sim_params, control):
        """Commands outside the bounds raise SimulationError."""
        with pytest.raises(SimulationError):
            sim_step(RobotState(), Control(*control), 0.05, sim_params)

    def test_rejects_non_finite_state(self, sim_params):
        """A non-finite state raises SimulationError."""
        with pytest.raises(SimulationError):
            sim_step_array(np.array([0.0, np.inf, 0.0, 0.0, 0.0, 0.0]), np.zeros(2), 0.05, sim_params)

    def test_deterministic(self, sim_params):
        """Identical inputs give identical outputs."""
        s = RobotState(1.0, 2.0, 0.3, 1.2, 0.0, 0.1)
        assert sim_step(s, Control(1.5, 0.5), 0.05, sim_params) == sim_step(s, Control(1.5, 0.5), 0.05, sim_params)

    def test_noise_is_seeded(self):
        """Process noise follows the generator seed and is off without a generator."""
        p = SimParams(noise_std=0.5)
        s = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0])
        u = np.array([1.0, 0.2])
        a = sim_step_array(s, u, 0.05, p, np.random.default_rng(7))
        b = sim_step_array(s, u, 0.05, p, np.random.default_rng(7))
        quiet = sim_step_array(s, u, 0.05, p)
        assert np.array_equal(a, b)
        assert not np.allclose(a, quiet)
        assert np.array_equal(quiet, sim_step_array(s, u, 0.05, SimParams()))

    def test_rollout_matches_array_form(self, sim_params):
        """The object and array rollouts agree."""
        controls = [Control(1.0, 0.3), Control(1.5, -0.2), Control(2.0, 0.0)]
        objs = sim_rollout(RobotState(), controls, 0.05, sim_params)
        arr = sim_rollout_array(np.zeros(6), np.array([c.as_array() for c in controls]), 0.05, sim_params)
        assert len(objs) == 3
        assert np.allclose(np.array([s.as_array() for s in objs]), arr, atol=1e-15)


class TestDelayedObservation:
    """Tests for history interpolation and latency."""

    def _history(self):
        return [
            TimedState(RobotState(x=0.0), 0.0),
            TimedState(RobotState(x=1.0), 0.1),
            TimedState(RobotState(x=3.0), 0.2),
        ]

    def test_state_at_interpolates(self):
        """Between stamps the state is interpolated linearly."""
        assert state_at(self._history(), 0.15).x == pytest.approx(2.0)
        assert state_at(self._history(), 0.1).x == 1.0

    def test_state_at_outside_raises(self):
        """Times outside the history raise HistoryGap."""
        with pytest.raises(HistoryGap):
            state_at(self._history(), 0.25)
        with pytest.raises(HistoryGap):
            state_at([], 0.0)

    def test_observe_delayed_stamp(self):
        """The observation is the state epsilon ago, stamped then."""
        obs = observe_delayed(self._history(), 0.2, 0.05)
        assert obs.stamp == pytest.approx(0.15)
        assert obs.state.x == pytest.approx(2.0)

    def test_observe_before_history_raises(self):
        """Latency reaching before the first stamp raises HistoryGap."""
        with pytest.raises(HistoryGap):
            observe_delayed(self._history(), 0.02, 0.05)

    def test_heading_interpolates_across_pi(self):
        """Interpolation takes the short way round the wrap point."""
        mid = interpolate_state(RobotState(theta=3.1), RobotState(theta=-3.1), 0.5)
        assert abs(mid.theta) > 3.1
