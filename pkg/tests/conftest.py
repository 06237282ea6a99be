import numpy as np
import pytest

from app.core.graph import Graph, build_shift
from app.ml.graphs import gen_graph


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def er20():
    """Connected ER(20, 0.3) graph and its spectrum."""
    return build_shift(gen_graph("er", {"n": 20, "p": 0.3}, seed=3))


@pytest.fixture(scope="session")
def er8():
    return build_shift(gen_graph("er", {"n": 8, "p": 0.5}, seed=11))


@pytest.fixture
def triangle():
    return Graph(adjacency=np.ones((3, 3)) - np.eye(3), name="k3")
