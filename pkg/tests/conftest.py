import numpy as np
import pytest

from thermofocus.phantom import Grid, rasterize
from thermofocus.scenario import Scenario
from thermofocus.tshape import run_pipeline

_PLANS = {}


def bundled_plan(name: str):
    """Scenario and pipeline result for a bundled scenario, computed once."""
    if name not in _PLANS:
        sc = Scenario.bundled(name)
        _PLANS[name] = (sc, run_pipeline(sc))
    return _PLANS[name]


@pytest.fixture(scope="session")
def simple_plan():
    return bundled_plan("simple_neck_2d")


@pytest.fixture(scope="session")
def realistic_plan():
    return bundled_plan("realistic_neck_2d")


@pytest.fixture(scope="session")
def simple_scenario():
    return Scenario.bundled("simple_neck_2d")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def box_phantom(shapes, dims=(20, 20), spacing=1e-3, **kw):
    origin = tuple(-(n - 1) / 2 * spacing for n in dims)
    return rasterize(shapes, Grid(dims, spacing, origin), **kw)
