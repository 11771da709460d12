import numpy as np
import pytest

from fdelab import ModelParams, SpaceTimeGrid, barenblatt_field
from fdelab.grid import ScalarField


@pytest.fixture(scope="session")
def params2d():
    return ModelParams(n=2, m=0.5)


@pytest.fixture(scope="session")
def bb_grid(params2d):
    return SpaceTimeGrid(box=[(-4, 4)] * 2, t_range=(1.0, 2.0),
                         shape=(65, 65), nt=65)


@pytest.fixture(scope="session")
def bb_field(params2d, bb_grid):
    """Exact solution sampled on a medium grid; shared across test modules."""
    return barenblatt_field(bb_grid, params2d, 1.0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def random_field_small():
    grid = SpaceTimeGrid(box=[(-1, 1)] * 2, t_range=(0.0, 1.0),
                         shape=(17, 17), nt=17)
    vals = np.random.default_rng(7).uniform(0.0, 2.0, size=(17, 17, 17))
    return ScalarField(grid, vals, nonneg=True)


_ACCEPTANCE_LINES = []


def acceptance_record(criterion, passed, detail):
    _ACCEPTANCE_LINES.append(
        f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
