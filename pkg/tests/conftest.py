from __future__ import annotations

import numpy as np
import pytest

from topowarp.geometry import Keypoints, OrientedPointCloud

# acceptance lines collected by tests/test_acceptance.py, echoed in the summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def random_unit(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_cloud(rng, n=200, scale=0.1, keypoints=0, colors=True) -> OrientedPointCloud:
    pts = rng.uniform(-scale, scale, size=(n, 3))
    nrm = random_unit(rng, n)
    col = rng.uniform(0, 1, size=(n, 3)) if colors else None
    kp = None
    if keypoints:
        kp = Keypoints(rng.choice(n, keypoints, replace=False), rng.normal(size=(keypoints, 8)))
    return OrientedPointCloud(pts, nrm, col, keypoints=kp)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
