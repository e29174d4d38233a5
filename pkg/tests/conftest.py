import sys

import numpy as np
import pytest

from ldrnet import geometry


def random_convex_quad(rng, center=(0.5, 0.5), size=0.6, jitter=0.12):
    """Screen-ccw convex quad (TL, BL, BR, TR) around ``center``."""
    cx, cy = center
    h = size / 2
    base = np.array([[cx - h, cy - h], [cx - h, cy + h], [cx + h, cy + h], [cx + h, cy - h]])
    while True:
        q = base + rng.uniform(-jitter, jitter, (4, 2))
        if geometry.is_convex(q) and geometry.signed_area(q) > 0.05 * size * size:
            return q


def random_homography(rng, strength=0.3):
    """Mild projective map of the unit square neighbourhood (positive w there)."""
    h = np.eye(3)
    h[:2, :2] += rng.uniform(-strength, strength, (2, 2))
    h[:2, 2] = rng.uniform(-1, 1, 2)
    h[2, :2] = rng.uniform(-strength, strength, 2) * 0.5
    return h


def points_in_convex(pts, poly):
    """Vectorised inclusion test against a convex polygon of either orientation."""
    poly = np.asarray(poly, float)
    sign = np.sign(geometry.signed_area(poly))
    inside = np.ones(len(pts), dtype=bool)
    for k in range(len(poly)):
        a, b = poly[k], poly[(k + 1) % len(poly)]
        cross = (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0])
        inside &= cross * sign <= 0
    return inside


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
