"""
Tests for buffers, path helpers, the updater and executor, and closed-loop runs.
"""

import numpy as np
import pytest

import kinoctl.control_runtime
from kinoctl.control_runtime import (
    PRIORITY_ESTIMATOR,
    PRIORITY_EXECUTOR,
    PRIORITY_OPTIMIZER,
    TRACE_COLUMNS,
    ControlBuffer,
    Executor,
    PathMap,
    PlanResult,
    RuntimeConfig,
    StateBuffer,
    VirtualScheduler,
    _prefill_history,
    desired_states_along_path,
    executor_step,
    ikd_plan_once,
    load_path,
    localize_on_path,
    lookahead,
    measure_plan_budget,
    path_target_window,
    plan_once,
    read_trace,
    run_closed_loop,
    save_path,
    time_sync_states,
    to_us,
    updater_apply,
    write_trace,
)
from kinoctl.exceptions import ConfigError, HistoryGap, KinoctlError, StaleSolution, StampOrderError
from kinoctl.nlls_opt import LMConfig, SquashMap
from kinoctl.traj_data import WindowSpec
from kinoctl.vehicle_sim import RobotState, TimedState


def _straight(length=5.0, step=0.05):
    n = int(round(length / step)) + 1
    pos = np.zeros((n, 3))
    pos[:, 0] = np.arange(n) * step
    return PathMap(pos)


def _square():
    return PathMap(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]]), closed=True)


def _cruise_buffer(spec, cfg, speed=1.0):
    buf = StateBuffer(cfg.buffer_capacity(spec))
    for item in _prefill_history(np.array([0.0, 0.0, 0.0, speed, 0.0, 0.0]), 0.5, spec.tau):
        buf.push(item)
    return buf


class TestStateBuffer:
    """Tests for the estimate ring buffer."""

    def test_capacity(self):
        """Old entries fall off once the buffer is full."""
        buf = StateBuffer(3)
        for k in range(5):
            buf.push(TimedState(RobotState(x=float(k)), 0.1 * k))
        assert len(buf) == 3
        assert [item.state.x for item in buf.snapshot()] == [2.0, 3.0, 4.0]
        assert buf.latest().state.x == 4.0

    def test_rejects_small_capacity(self):
        """A buffer must hold at least two entries."""
        with pytest.raises(ConfigError):
            StateBuffer(1)

    def test_stamps_must_increase(self):
        """Repeated or older stamps are rejected."""
        buf = StateBuffer(4)
        buf.push(TimedState(RobotState(), 1.0))
        with pytest.raises(StampOrderError):
            buf.push(TimedState(RobotState(), 1.0))
        with pytest.raises(KinoctlError):
            buf.push(TimedState(RobotState(), 0.5))
        assert len(buf) == 1

    def test_empty_latest(self):
        """Reading an empty buffer raises HistoryGap."""
        with pytest.raises(HistoryGap):
            StateBuffer(2).latest()


class TestControlBuffer:
    """Tests for the stamped control queue."""

    def test_pop_due_discards_older(self):
        """The latest due control wins; earlier due ones are dropped."""
        cbuf = ControlBuffer()
        cbuf.replace(np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]]), 1.0, 0.05, plan_id=4)
        assert cbuf.pop_due(0.99) is None
        due = cbuf.pop_due(1.06)
        assert due.control.tolist() == [2.0, 0.0]
        assert due.plan_id == 4
        assert len(cbuf) == 1

    def test_pop_due_logs_discarded_count(self, mocker):
        """Skipped overdue controls are counted in a debug event."""
        log = mocker.patch("kinoctl.control_runtime.logger")
        cbuf = ControlBuffer()
        cbuf.replace(np.zeros((5, 2)), 0.0, 0.05)
        cbuf.pop_due(0.0)
        log.debug.assert_not_called()
        due = cbuf.pop_due(0.16)
        assert due.stamp == pytest.approx(0.15)
        log.debug.assert_called_once()
        assert log.debug.call_args.kwargs["count"] == 2

    def test_replace_is_total(self):
        """A new solution replaces everything queued."""
        cbuf = ControlBuffer()
        cbuf.replace(np.ones((5, 2)), 0.0, 0.05)
        cbuf.replace(np.zeros((2, 2)), 0.3, 0.05)
        stamps = [item.stamp for item in cbuf.snapshot()]
        assert stamps == pytest.approx([0.3, 0.35])


class TestUpdater:
    """Tests for latency compensation."""

    def test_drops_elapsed_controls(self):
        """ceil((gamma + epsilon) / tau) controls are dropped and the rest start now."""
        cbuf = ControlBuffer()
        controls = np.column_stack([np.arange(20.0), np.zeros(20)])
        dropped, gamma = updater_apply(controls, 1.0, 1.12, 0.05, cbuf, 0.05, plan_id=2)
        assert gamma == pytest.approx(0.12)
        assert dropped == 4
        items = cbuf.snapshot()
        assert len(items) == 16
        assert items[0].control[0] == 4.0
        assert items[0].stamp == pytest.approx(1.12)

    def test_exact_multiple_is_not_rounded_up(self):
        """An age that is a whole number of steps drops exactly that many."""
        cbuf = ControlBuffer()
        dropped, _ = updater_apply(np.ones((20, 2)), 1.0, 1.1, 0.05, cbuf, 0.05)
        assert dropped == 3

    def test_stale_solution(self):
        """A solution older than its horizon is refused and the buffer kept."""
        cbuf = ControlBuffer()
        cbuf.replace(np.ones((3, 2)), 0.0, 0.05)
        with pytest.raises(StaleSolution) as info:
            updater_apply(np.ones((4, 2)), 0.0, 0.2, 0.05, cbuf, 0.05)
        assert info.value.horizon == pytest.approx(0.2)
        assert len(cbuf) == 3

    def test_without_compensation(self):
        """With compensation off nothing is dropped."""
        cbuf = ControlBuffer()
        dropped, _ = updater_apply(np.ones((20, 2)), 1.0, 1.12, 0.05, cbuf, 0.05, compensate=False)
        assert dropped == 0
        assert len(cbuf) == 20


class TestExecutor:
    """Tests for the per-tick executor."""

    def test_hold_then_zero(self):
        """A starved executor repeats the last control, then commands zero."""
        cbuf = ControlBuffer()
        cbuf.replace(np.array([[1.0, 0.2]]), 0.0, 0.05, plan_id=7)
        executor = Executor(cbuf, hold_ticks=2)
        assert executor.step(0.0)[0].tolist() == [1.0, 0.2]
        held, plan_id = executor.step(0.05)
        assert held.tolist() == [1.0, 0.2]
        assert plan_id == 7
        assert executor_step(executor, 0.1).tolist() == [1.0, 0.2]
        control, plan_id = executor.step(0.15)
        assert control.tolist() == [0.0, 0.0]
        assert plan_id == -1


class TestScheduler:
    """Tests for the virtual clock."""

    def test_ordering(self):
        """Events fire by time, then priority, then submission order."""
        sched = VirtualScheduler()
        sched.schedule(10, PRIORITY_OPTIMIZER, "optimizer")
        sched.schedule(10, PRIORITY_EXECUTOR, "executor")
        sched.schedule(5, PRIORITY_OPTIMIZER, "early")
        sched.schedule(10, PRIORITY_ESTIMATOR, "estimator")
        order = [sched.pop().actor for _ in range(4)]
        assert order == ["early", "executor", "estimator", "optimizer"]
        assert sched.now_us == 10

    def test_no_scheduling_in_the_past(self):
        """Events before the current time are rejected."""
        sched = VirtualScheduler()
        sched.schedule(10, 0, "a")
        sched.pop()
        with pytest.raises(ValueError):
            sched.schedule(5, 0, "b")

    def test_to_us(self):
        """Seconds round to whole microseconds."""
        assert to_us(0.05) == 50_000
        assert to_us(0.1 + 0.2) == 300_000


class TestPaths:
    """Tests for path geometry and localization."""

    def test_lengths(self):
        """Closed paths include the closing segment."""
        assert _square().length == pytest.approx(4.0)
        assert _straight().length == pytest.approx(5.0)

    def test_rejects_duplicates(self):
        """Consecutive duplicate vertices are a config error."""
        with pytest.raises(ConfigError):
            PathMap(np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]))

    def test_pose_at_wraps_and_clamps(self):
        """Arc length wraps on closed paths and clamps on open ones."""
        assert _square().pose_at(4.5)[:2] == pytest.approx([0.5, 0.0])
        assert _straight().pose_at(9.0)[:2] == pytest.approx([5.0, 0.0])
        assert _straight().pose_at(-1.0)[:2] == pytest.approx([0.0, 0.0])

    def test_localize(self):
        """The nearest vertex is found, with windowed search around a hint."""
        path = _straight()
        assert localize_on_path(path, RobotState(x=1.01, y=0.3)) == 20
        assert localize_on_path(path, np.array([1.01, 0.3]), hint=60, window=5) == 55

    def test_localize_ties_go_low(self):
        """Equidistant vertices resolve to the lowest index."""
        assert localize_on_path(_straight(), np.array([0.025, 0.0])) == 0

    def test_lookahead(self):
        """Walking d metres from vertex s."""
        assert lookahead(_straight(), 10, 1.0)[:2] == pytest.approx([1.5, 0.0])
        with pytest.raises(ValueError):
            lookahead(_straight(), 0, -0.1)

    def test_target_window_ends_at_lookahead(self):
        """The last target is the lookahead goal and the window is evenly spaced."""
        path = _straight()
        states = path_target_window(path, 10, 4, 0.05, 0.2)
        assert states[-1, :3] == pytest.approx(lookahead(path, 10, 0.2))
        assert states[:, 0] == pytest.approx([0.55, 0.6, 0.65, 0.7])
        assert states[:, 3] == pytest.approx(1.0)

    def test_target_window_on_closed_path(self):
        """The lookahead goal wraps past the closing segment."""
        path = _square()
        states = path_target_window(path, 3, 5, 0.05, 1.5)
        assert states[-1, :3] == pytest.approx(lookahead(path, 3, 1.5))
        assert states[-1, :2] == pytest.approx([0.5, 0.0])

    def test_desired_states_ramp(self):
        """Speed ramps from v_now at the target acceleration up to v_desired."""
        states = desired_states_along_path(_straight(), 0, 10, 0.05, 1.0, v_now=0.0, accel=4.0)
        speeds = np.minimum(1.0, 4.0 * 0.05 * np.arange(1, 11))
        assert states[:, 3] == pytest.approx(speeds)
        assert states[:, 0] == pytest.approx(np.cumsum(speeds) * 0.05)
        assert np.all(states[:, 5] == 0.0)

    def test_speed_profile(self):
        """A path speed profile overrides v_desired."""
        pos = _straight().positions
        path = PathMap(pos, speeds=np.full(len(pos), 2.0))
        states = desired_states_along_path(path, 0, 4, 0.05, 1.0)
        assert states[:, 3] == pytest.approx(2.0)

    def test_file_round_trip(self, tmp_path):
        """Saved paths reload, and closure is inferred from the endpoints."""
        save_path(_straight(), tmp_path / "line.json")
        loaded = load_path(tmp_path / "line.json")
        assert not loaded.closed
        assert np.array_equal(loaded.positions, _straight().positions)

    def test_unreadable_path(self, tmp_path):
        """A broken file is a config error."""
        (tmp_path / "bad.json").write_text("not json")
        with pytest.raises(ConfigError):
            load_path(tmp_path / "bad.json")


class TestTimeSync:
    """Tests for interpolating the buffer onto the model grid."""

    def test_grid(self, small_spec):
        """States are interpolated at t_end - (W - 1 - k) * tau."""
        buf = StateBuffer(16)
        for k in range(10):
            buf.push(TimedState(RobotState(x=0.02 * k), 0.02 * k))
        out = time_sync_states(buf, 0.1, small_spec)
        assert out[:, 0] == pytest.approx([0.05, 0.1])

    def test_gap(self, small_spec):
        """A window reaching past the buffer raises HistoryGap."""
        buf = StateBuffer(4)
        buf.push(TimedState(RobotState(), 0.0))
        buf.push(TimedState(RobotState(), 0.02))
        with pytest.raises(HistoryGap):
            time_sync_states(buf, 0.02, small_spec)


class TestRuntimeConfig:
    """Tests for runtime settings."""

    def test_period_defaults_to_half_horizon(self):
        """Without an explicit period the optimizer runs twice per horizon."""
        assert RuntimeConfig(delta_t=1.0).period == 0.5
        assert RuntimeConfig(optimizer_period=0.2).period == 0.2

    @pytest.mark.parametrize("overrides", [{"latency_mode": "psychic"}, {"delta_t": 0.0},
                                           {"epsilon": -0.1}, {"n_range": (10, 5)}, {"path_weights": (1.0,)}])
    def test_invalid(self, overrides):
        """Bad runtime settings raise ConfigError."""
        with pytest.raises(ConfigError):
            RuntimeConfig(**overrides)

    def test_horizon_must_fit_windows(self):
        """delta_t must be a multiple of t_model."""
        with pytest.raises(ConfigError):
            RuntimeConfig(delta_t=0.75).validate(WindowSpec())

    def test_buffer_capacity_covers_window(self, small_spec):
        """The ring holds the model window plus latency and margin."""
        cfg = RuntimeConfig(epsilon=0.05, buffer_margin=0.5, estimator_period=0.02)
        assert cfg.buffer_capacity(small_spec) * 0.02 >= 0.1 + 0.05 + 0.5


class TestPlanning:
    """Tests for single optimizer cycles."""

    def test_path_plan_on_straight_line(self, oracle, small_spec, sim_params):
        """Cruising along a straight path keeps the cruise command."""
        cfg = RuntimeConfig(delta_t=0.2)
        buf = _cruise_buffer(small_spec, cfg)
        plan = plan_once("path", oracle, buf, _straight(), cfg, small_spec, LMConfig(max_iters=20),
                         SquashMap.for_sim(sim_params), hint=0)
        assert plan.controls.shape == (4, 2)
        assert plan.path_index == 0
        assert plan.xi_used.stamp == 0.0
        assert np.allclose(plan.controls, [[1.0, 0.0]] * 4, atol=1e-3)

    def test_path_plan_targets_the_lookahead_goal(self, mocker, oracle, small_spec, sim_params):
        """The last tracking target is the pose v_desired * delta_t ahead on the path."""
        cfg = RuntimeConfig(delta_t=0.2, v_desired=1.5)
        problem = mocker.spy(kinoctl.control_runtime, "PathFollowingProblem")
        path = _straight()
        plan_once("path", oracle, _cruise_buffer(small_spec, cfg), path, cfg, small_spec, LMConfig(max_iters=3),
                  SquashMap.for_sim(sim_params), hint=0)
        targets = problem.call_args[0][2]
        assert targets.shape == (4, 6)
        assert targets[-1, :3] == pytest.approx(lookahead(path, 0, 0.3))

    def test_connect_plan_searches_the_full_range(self, mocker, oracle, small_spec, sim_params):
        """A short previous plan does not cap the horizon of the next cycle."""
        cfg = RuntimeConfig(delta_t=0.2, n_range=(4, 12), alpha=0.1)
        buf = _cruise_buffer(small_spec, cfg)
        search = mocker.spy(kinoctl.control_runtime, "solve_optimal_connectivity")
        previous = PlanResult(np.zeros((2, 2)), buf.latest(), z=np.zeros(4), n=2)
        goal = np.array([0.5, 0.0, 0.0, 0.0, 0.0, 0.0])
        plan = plan_once("connect", oracle, buf, goal, cfg, small_spec, LMConfig(max_iters=5),
                         SquashMap.for_sim(sim_params), previous=previous)
        assert search.call_args[0][4] == (2, 12)
        _, n_star, table = search.spy_return
        assert max(row.n for row in table) == 12
        assert plan.n == n_star

    def test_connect_plan(self, oracle, small_spec, sim_params):
        """A connectivity cycle returns a whole number of windows."""
        cfg = RuntimeConfig(delta_t=0.2, n_range=(4, 8), alpha=0.1)
        buf = _cruise_buffer(small_spec, cfg)
        goal = np.array([0.5, 0.1, 0.2, 1.0, 0.0, 0.0])
        plan = plan_once("connect", oracle, buf, goal, cfg, small_spec, LMConfig(max_iters=5),
                         SquashMap.for_sim(sim_params))
        assert plan.n in (4, 6, 8)
        assert plan.controls.shape == (plan.n, 2)
        assert plan.path_index is None

    def test_unknown_objective(self, oracle, small_spec, sim_params):
        """Objectives other than path and connect are rejected."""
        cfg = RuntimeConfig(delta_t=0.2)
        with pytest.raises(ConfigError):
            plan_once("drift", oracle, _cruise_buffer(small_spec, cfg), _straight(), cfg, small_spec,
                      LMConfig(), SquashMap.for_sim(sim_params))

    def test_ikd_plan(self, tiny_ikd, small_spec, sim_params):
        """The inverse model plans one window within the bounds."""
        cfg = RuntimeConfig(delta_t=0.2)
        plan = ikd_plan_once(tiny_ikd, _cruise_buffer(small_spec, cfg), _straight(), cfg, small_spec, 0)
        assert plan.controls.shape == (2, 2)
        assert np.all(plan.controls >= sim_params.control_lo)
        assert np.all(plan.controls <= sim_params.control_hi)


class TestClosedLoop:
    """Tests for the four-actor loop on the virtual clock."""

    def _run(self, controller, sim_params, spec, cfg, seed=3, duration=1.0):
        start = RobotState(v_x=1.0)
        return run_closed_loop(sim_params, controller, "path", _straight(), cfg, spec, seed, duration, start,
                               LMConfig(max_iters=5))

    def test_fkd_run_is_deterministic(self, oracle, sim_params, small_spec, tmp_path):
        """Two identical runs write identical trace files."""
        cfg = RuntimeConfig(delta_t=0.2, optimizer_compute_time=0.05)
        write_trace(self._run(oracle, sim_params, small_spec, cfg), tmp_path / "a.csv")
        write_trace(self._run(oracle, sim_params, small_spec, cfg), tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        rows = read_trace(tmp_path / "a.csv")
        assert rows.shape[1] == len(TRACE_COLUMNS)
        assert np.allclose(np.diff(rows[:, 0]), 0.05)

    def test_fkd_run_compensates_latency(self, oracle, sim_params, small_spec):
        """Every plan drops the steps its compute time and latency consumed."""
        cfg = RuntimeConfig(delta_t=0.2, optimizer_compute_time=0.05)
        trace = self._run(oracle, sim_params, small_spec, cfg)
        assert not trace.errors
        assert len(trace.plans) >= 9
        assert all(p.dropped == 2 for p in trace.plans)
        assert all(p.gamma == pytest.approx(0.05) for p in trace.plans)
        assert trace.positions[-1, 0] > 0.5
        assert abs(trace.positions[-1, 1]) < 0.05

    def test_controls_never_run_early(self, mocker, oracle, sim_params, small_spec):
        """Executed stamps strictly increase and never lie after the tick that runs them."""
        executed = []
        original = ControlBuffer.pop_due

        def recording(cbuf, now):
            due = original(cbuf, now)
            if due is not None:
                executed.append((now, due.stamp))
            return due

        mocker.patch.object(ControlBuffer, "pop_due", recording)
        cfg = RuntimeConfig(delta_t=0.2, optimizer_compute_time=0.05)
        self._run(oracle, sim_params, small_spec, cfg)
        assert len(executed) > 10
        nows, stamps = np.array(executed).T
        assert np.all(stamps <= nows + 1e-9)
        assert np.all(np.diff(stamps) > 0)

    def test_ikd_run(self, tiny_ikd, sim_params, small_spec):
        """The inverse controller replans every ikd_period with no compute delay."""
        cfg = RuntimeConfig(delta_t=0.2, ikd_period=0.1, ikd_compute_time=0.0)
        trace = self._run(tiny_ikd, sim_params, small_spec, cfg)
        assert trace.method == "ikd"
        assert trace.plans
        assert all(p.dropped == 1 for p in trace.plans)

    def test_stale_plans_starve_executor(self, oracle, sim_params, small_spec):
        """Plans slower than their horizon are refused and the executor falls back to zero."""
        cfg = RuntimeConfig(delta_t=0.2, optimizer_compute_time=0.2, starvation_hold_ticks=2)
        trace = self._run(oracle, sim_params, small_spec, cfg, duration=0.6)
        assert not trace.plans
        assert trace.errors and {actor for _, actor, _ in trace.errors} == {"updater"}
        assert trace.plan_ids[-1] == -1
        assert trace.controls[-1].tolist() == [0.0, 0.0]

    def test_ikd_cannot_connect(self, tiny_ikd, sim_params, small_spec):
        """The inverse model has no connectivity objective."""
        with pytest.raises(ConfigError):
            run_closed_loop(sim_params, tiny_ikd, "connect", np.zeros(6), RuntimeConfig(delta_t=0.2),
                            small_spec, 0, 0.5, RobotState())

    def test_stop_when(self, oracle, sim_params, small_spec):
        """A stop predicate ends the run and records the time."""
        cfg = RuntimeConfig(delta_t=0.2)
        trace = run_closed_loop(sim_params, oracle, "path", _straight(), cfg, small_spec, 0, 2.0,
                                RobotState(v_x=1.0), LMConfig(max_iters=5),
                                stop_when=lambda state, t: state[0] > 0.3)
        assert trace.goal_reached_at is not None
        assert trace.goal_reached_at == trace.times[-1]
        assert trace.states[-1][0] > 0.3


class TestBudget:
    """Tests for the planning-time measurement."""

    def test_report_keys(self, oracle, small_spec, sim_params):
        """The report covers every cycle and compares against half the horizon."""
        cfg = RuntimeConfig(delta_t=0.2)
        report = measure_plan_budget(oracle, _straight(), cfg, small_spec, LMConfig(max_iters=3), sim_params, 2)
        assert report["cycles"] == 2.0
        assert report["budget"] == pytest.approx(0.1)
        assert set(report) == {"cycles", "mean", "p95", "max", "budget", "within_budget"}
