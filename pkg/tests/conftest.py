"""Shared fixtures and the --runslow switch"""
import numpy as np
import pytest

from plume_model import EnvParams


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full-scale acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def default_params():
    return EnvParams()


@pytest.fixture
def small_params():
    """5x5 grid, two fluxes: cheap enough for exhaustive checks"""
    return EnvParams(nx=5, ny=5, fluxes=(1.0, 3.0))


@pytest.fixture
def tiny_params():
    """3x3 grid with a single flux"""
    return EnvParams(nx=3, ny=3, fluxes=(1.0,))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
