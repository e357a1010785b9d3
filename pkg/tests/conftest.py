import sys
from pathlib import Path

import numpy as np
import pytest

from mesb.schedule import make_symmetric_beta

SERVERS = Path(__file__).parent / "servers"


@pytest.fixture(scope="session")
def schedule():
    return make_symmetric_beta()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def server_cmd(*args):
    return [sys.executable, *map(str, args)]


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
