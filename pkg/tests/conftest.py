import numpy as np
import pytest

from mixedctl.geometry import TimeGrid, build_geometry
from mixedctl.operators import assemble_mixed


@pytest.fixture
def unit16():
    return build_geometry(0.0, 1.0, 16, 0.5)


@pytest.fixture
def unit64():
    return build_geometry(0.0, 1.0, 64, 0.5)


@pytest.fixture
def stiff16(unit16):
    return assemble_mixed(unit16, 0.5)


@pytest.fixture
def stiff64(unit64):
    return assemble_mixed(unit64, 0.5)


@pytest.fixture
def grid8():
    return TimeGrid(0.5, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
