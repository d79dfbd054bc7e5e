"""Shared fixtures: small windows, tiny networks, the simulator-backed model."""

import os

import numpy as np
import pytest

from kinoctl.config import reset_config_manager
from kinoctl.dense_net import NetParams, net_init
from kinoctl.fkd_model import FkdModel, OracleFkdModel
from kinoctl.ikd_baseline import IkdModel
from kinoctl.traj_data import WindowSpec, record_trajectory
from kinoctl.vehicle_sim import RobotState, SimParams

SLOW_TESTS = os.getenv("KINOCTL_SLOW_TESTS") == "1"
slow = pytest.mark.skipif(not SLOW_TESTS, reason="Set KINOCTL_SLOW_TESTS=1 to run long acceptance checks")


def small_net(seed: int, sizes, out_scale: float = 0.05) -> NetParams:
    """He-initialized network with a damped output layer so predictions stay near zero."""
    params = net_init(seed, sizes)
    layers = list(params.layers)
    w, b = layers[-1]
    layers[-1] = (w * out_scale, b)
    return NetParams(tuple(layers), seed)


@pytest.fixture(autouse=True)
def _fresh_config_manager():
    reset_config_manager()
    yield
    reset_config_manager()


@pytest.fixture
def sim_params():
    return SimParams()


@pytest.fixture
def small_spec():
    """Two-step windows, two chunks per training example."""
    return WindowSpec(tau=0.05, t_model=0.1, t_pred=0.2)


@pytest.fixture
def tiny_fkd(small_spec):
    w = small_spec.steps_per_window
    return FkdModel(small_net(3, [w * 8, 12, 12, w * 6]), small_spec)


@pytest.fixture
def tiny_ikd(small_spec, sim_params):
    w = small_spec.steps_per_window
    return IkdModel(small_net(4, [w * 12, 10, w * 2], out_scale=1.0), small_spec, sim_params=sim_params)


@pytest.fixture
def oracle(sim_params, small_spec):
    return OracleFkdModel(sim_params, small_spec)


@pytest.fixture
def cruise_controls():
    """Three seconds of a gentle left turn at 1.5 m/s."""
    controls = np.zeros((60, 2))
    controls[:, 0] = 1.5
    controls[:, 1] = 0.4
    return controls


@pytest.fixture
def cruise_trajectory(sim_params, cruise_controls):
    return record_trajectory(RobotState(), cruise_controls, sim_params, 0.05)
