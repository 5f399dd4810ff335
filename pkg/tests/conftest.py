import numpy as np
import pytest

from rastmpc.model import LinearSdeModel, load_scenario

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def double_integrator():
    return LinearSdeModel([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], 0.01 * np.eye(2), [[1.0, 0.0]])


@pytest.fixture(scope="session")
def danger():
    return load_scenario("danger.json")


@pytest.fixture(scope="session")
def safe():
    return load_scenario("safe.json")


@pytest.fixture(scope="session")
def deterministic():
    return load_scenario("deterministic.json")
