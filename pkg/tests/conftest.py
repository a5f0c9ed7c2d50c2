import numpy as np
import pytest

from absdelab.forward import ForwardModel, MarkMeasureSpec, TimeGrid, simulate_paths


def brownian(T=1.0, N=100):
    return ForwardModel.constant(0.0, 1.0), TimeGrid.uniform(T, N), MarkMeasureSpec.empty()


def within_se(value, target, se, k=3.0):
    return abs(value - target) <= k * se


@pytest.fixture(scope="session")
def bm_bundle():
    model, grid, marks = brownian()
    return simulate_paths(model, grid, marks, (0.0, 0.0), 100_000, 11)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
