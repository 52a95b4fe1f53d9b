import numpy as np
import pytest

from surfcnn import shapes
from surfcnn.hierarchy import build_hierarchy


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def ico3():
    return shapes.icosphere(3)


@pytest.fixture(scope="session")
def small_h():
    """Three levels on a bumpy 150-vertex sphere."""
    from surfcnn.verify import random_mesh

    m = random_mesh(150, seed=3)
    return build_hierarchy(m, [150, 50, 17], N=4)


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion."""

    def add(criterion, ok, text):
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {text}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
