import numpy as np
import pytest

from rdtflab.field_core import GridSpec, MetricField, identity_field
from rdtflab.flow import run_flow
from rdtflab.weak_scalar import make_w1p_cone, smooth_bump_metric

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


def conformal_metric(grid: GridSpec, f: np.ndarray) -> MetricField:
    return MetricField(grid, np.exp(2 * f)[..., None, None] * identity_field(grid))


def gaussian_f(grid: GridSpec, amp: float = 0.1) -> np.ndarray:
    return amp * np.exp(-grid.radius() ** 2)


@pytest.fixture(scope="session")
def small_grid():
    return GridSpec(2, 1.0, 33)


@pytest.fixture(scope="session")
def bump_traj():
    """Smooth compact perturbation on a small grid, densely stored."""
    grid = GridSpec(2, 1.0, 41)
    g0 = smooth_bump_metric(grid, 0.08)
    return run_flow(g0, 0.02, snapshot_times=np.linspace(0.002, 0.02, 10), keep_every=2)


@pytest.fixture(scope="session")
def flat_traj():
    grid = GridSpec(2, 1.0, 33)
    return run_flow(MetricField.flat(grid), 0.01, snapshot_times=np.geomspace(1e-4, 1e-2, 12), keep_every=2)


@pytest.fixture(scope="session")
def cone_traj():
    """Cone datum n=2, p=4, sigma=0.6, a=0.05 at N=129 with snapshots over two decades."""
    grid = GridSpec(2, 1.0, 129)
    g0 = make_w1p_cone(grid)
    snaps = sorted(1e-2 * 2 ** (-k / 2) for k in range(14))
    return run_flow(g0, 1e-2, snapshot_times=snaps, keep_every=8)
