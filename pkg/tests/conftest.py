import numpy as np
import pytest
from hypothesis import settings

from gspf.core import FunctionalSequence, Grid

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def make_seq(values, grid=None):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    g = Grid.equispaced(values.shape[1]) if grid is None else Grid(np.asarray(grid, dtype=float))
    return FunctionalSequence(values, g)


ACCEPTANCE_LINES = []


def record(criterion, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
