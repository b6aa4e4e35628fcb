import numpy as np
import pytest

from subgfn.env import HyperGrid
from subgfn.model import init_params, sample_batch, trajectory_streams


@pytest.fixture
def grid22():
    return HyperGrid(2, 2)


@pytest.fixture
def grid23():
    return HyperGrid(2, 3)


@pytest.fixture
def grid28():
    return HyperGrid(2, 8)


def random_params(env, seed, backward_mode="uniform"):
    return init_params(env, "normal", backward_mode, rng=np.random.default_rng(seed))


def random_batch(params, env, seed, size=8):
    return sample_batch(params, env, trajectory_streams(seed, 0, size))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
