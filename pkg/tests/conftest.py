"""
Shared fixtures for the liftmesh test suite.
"""

import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from liftmesh.body_model import make_desk_model
from liftmesh.config import LifterConfig, PseConfig
from liftmesh.lifter import init_lifter_params
from liftmesh.pose_shape_estimator import init_pse_params
from liftmesh.skeleton import H36M17
from liftmesh.utils import make_rng


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks")


@pytest.fixture(scope="session")
def desk_model():
    """120-vertex synthetic body model."""
    return make_desk_model()


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def lifter_config():
    return LifterConfig()


@pytest.fixture
def pse_config():
    return PseConfig()


@pytest.fixture
def small_lifter_config():
    return LifterConfig(dim=16, branches=2, blocks=1, heads=2)


@pytest.fixture
def small_pse_config():
    return PseConfig(dim=16, tokens=8, blocks=1, heads=2, hidden=32, n_iter=2)


@pytest.fixture
def desk_params(desk_model, lifter_config, pse_config):
    """Seeded default-size lifter and estimator."""
    rng = make_rng(7)
    lifter = init_lifter_params(lifter_config, H36M17, rng)
    pse = init_pse_params(pse_config, H36M17.num_joints, lifter_config.dim, desk_model, rng)
    return lifter, pse


@pytest.fixture
def small_params(desk_model, small_lifter_config, small_pse_config):
    rng = make_rng(11)
    lifter = init_lifter_params(small_lifter_config, H36M17, rng)
    pse = init_pse_params(
        small_pse_config, H36M17.num_joints, small_lifter_config.dim, desk_model, rng
    )
    return lifter, pse


@pytest.fixture
def pose_coords(rng):
    """A random h36m17 pose in normalized image units."""
    return rng.normal(0.0, 0.3, size=(H36M17.num_joints, 2))

