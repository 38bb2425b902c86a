import numpy as np
import pytest

from abcdr.sampler import SimulatorSpec, generate_table


@pytest.fixture(scope="session")
def gaussian_table():
    return generate_table(SimulatorSpec("gaussian-toy", seed=11), 10_000)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
