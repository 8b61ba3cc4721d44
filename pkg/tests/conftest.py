import sys

import numpy as np
import pytest

from camdist import datagen, lifter as L
from camdist.skeleton import default_topology


@pytest.fixture(scope="session")
def topo():
    return default_topology()


@pytest.fixture(scope="session")
def small_clips():
    return datagen.gen_dataset(3, 40, seed=5)


@pytest.fixture(scope="session")
def tiny_lifter():
    return L.LifterConfig(frames=3, channels=16, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
