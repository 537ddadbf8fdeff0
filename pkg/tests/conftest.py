import math

import numpy as np
import pytest

from lidarvpr import simworld as sw


def square_room(r: int) -> sw.OccupancyGrid:
    """Empty bordered square of side 2r+1."""
    cells = np.zeros((2 * r + 1, 2 * r + 1), dtype=bool)
    cells[0, :] = cells[-1, :] = cells[:, 0] = cells[:, -1] = True
    return sw.OccupancyGrid(cells)


def contour_points(n: int, seed: int = 0) -> np.ndarray:
    """Random points on the outline of an irregular room (asymmetric, so ICP
    has a single well-defined optimum)."""
    rng = np.random.default_rng(seed)
    poly = np.array([[-30, -20], [25, -20], [25, 5], [10, 5], [10, 18], [-30, 18]], dtype=float)
    seg = np.roll(poly, -1, axis=0) - poly
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    pick = rng.choice(len(poly), size=n, p=lengths / lengths.sum())
    t = rng.uniform(0, 1, size=n)[:, None]
    return poly[pick] + t * seg[pick]


@pytest.fixture(scope="session")
def small_world():
    return sw.generate_environment(3, 128, 128, 0.12, min_block=4, max_block=16)


@pytest.fixture(scope="session")
def small_dataset(small_world):
    poses = sw.sample_trajectory(small_world, 160, seed=3, step_mean=2.4)
    return sw.build_dataset(small_world, poses, ray_count=64, max_range=96.0)


def rot(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s], [s, c]])


ACCEPTANCE_LINES: list[str] = []


def acceptance_line(number: int, passed: bool, detail: str) -> None:
    """Record one criterion verdict; all verdicts are echoed at the end of the session."""
    line = f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
