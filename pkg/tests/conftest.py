import numpy as np
import pytest

from bssd.geometry import ArrayGeometry, DoaGrid
from bssd.whitening import whitening_for


@pytest.fixture(scope="session")
def geometry():
    return ArrayGeometry.circular(6, 0.0926)


@pytest.fixture(scope="session")
def grid(geometry):
    return DoaGrid.fibonacci(100, geometry)


@pytest.fixture(scope="session")
def whitening(geometry):
    return whitening_for(geometry, 1024, 16000)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list = []


@pytest.fixture
def report():
    """Record (and print) one PASS/FAIL line for an acceptance criterion."""

    def _report(number, title, passed, detail):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
