import numpy as np
import pytest

from outmpc import bundle as bundle_io
from outmpc.model import DESK1_Y0, desk1


@pytest.fixture(scope="session")
def desk_config():
    return desk1()


@pytest.fixture(scope="session")
def desk_bundle(desk_config):
    return bundle_io.synthesize(desk_config, np.array([DESK1_Y0]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
