import math

import numpy as np
import pytest

from planlab.geometry import (OrientedBox, Polyline, boxes_overlap,
                              separation_margin, swept_overlap_time)


def sampled_overlap(a: OrientedBox, b: OrientedBox, step: float = 0.01) -> bool:
    """Dense point-sampling oracle: grid + edge points of each box tested in the other."""
    # circumradius prescreen: farther apart than the two radii cannot overlap
    ra = 0.5 * math.hypot(a.length, a.width)
    rb = 0.5 * math.hypot(b.length, b.width)
    if np.linalg.norm(a.center - b.center) > ra + rb:
        return False
    for src, dst in ((a, b), (b, a)):
        u, v = src.axes()
        xs = np.arange(-0.5 * src.length, 0.5 * src.length + step / 2, step)
        ys = np.arange(-0.5 * src.width, 0.5 * src.width + step / 2, step)
        gx, gy = np.meshgrid(xs, ys)
        pts = src.center + gx.reshape(-1, 1) * u + gy.reshape(-1, 1) * v
        if dst.contains_points(pts).any():
            return True
    return False


def random_box(rng, span=5.0):
    return OrientedBox(
        x=float(rng.uniform(-span, span)),
        y=float(rng.uniform(-span, span)),
        heading=float(rng.uniform(-math.pi, math.pi)),
        length=float(rng.uniform(1.0, 5.5)),
        width=float(rng.uniform(0.8, 2.4)),
    )


def test_overlapping_cars_side_by_side():
    a = OrientedBox(0, 0, 0, 4.6, 1.85)
    b = OrientedBox(1, 0, 0, 4.6, 1.85)
    assert boxes_overlap(a, b)


def test_distant_boxes_disjoint():
    a = OrientedBox(0, 0, 0.3, 4.6, 1.85)
    b = OrientedBox(100, 0, -0.7, 4.6, 1.85)
    assert not boxes_overlap(a, b)


def test_rotated_corner_overlap():
    a = OrientedBox(0, 0, 0, 4, 2)
    b = OrientedBox(2.8, 1.3, math.pi / 4, 4, 2)
    assert boxes_overlap(a, b) == sampled_overlap(a, b)


def test_sat_matches_sampling_oracle():
    rng = np.random.default_rng(42)
    for _ in range(300):
        a, b = random_box(rng), random_box(rng)
        # skip razor-thin contacts the 1 cm grid cannot certify either way
        if abs(separation_margin(a, b)) < 0.02:
            continue
        assert boxes_overlap(a, b) == sampled_overlap(a, b)


def stepped_overlap_time(a, va, b, vb, horizon, dt=0.01):
    t = 0.0
    while t <= horizon + 1e-9:
        am = OrientedBox(a.x + va[0] * t, a.y + va[1] * t, a.heading, a.length, a.width)
        bm = OrientedBox(b.x + vb[0] * t, b.y + vb[1] * t, b.heading, b.length, b.width)
        if boxes_overlap(am, bm):
            return t
        t += dt
    return math.inf


def test_head_on_closing_time():
    # gap between centers 20 m, closing 10 m/s, half-lengths sum to 5 m
    a = OrientedBox(0, 0, 0, 5, 2)
    b = OrientedBox(20, 0, math.pi, 5, 2)
    t = swept_overlap_time(a, np.array([10.0, 0.0]), b, np.array([0.0, 0.0]), 3.0)
    assert t == pytest.approx(1.5, abs=1e-9)


def test_parallel_lanes_never_collide():
    a = OrientedBox(0, 0, 0, 4.6, 1.85)
    b = OrientedBox(-10, 3.6, 0, 4.6, 1.85)
    t = swept_overlap_time(a, np.array([5.0, 0.0]), b, np.array([9.0, 0.0]), 3.0)
    assert t == math.inf


def test_swept_time_matches_dense_stepping():
    rng = np.random.default_rng(9)
    for _ in range(120):
        a, b = random_box(rng), random_box(rng)
        va = rng.uniform(-8, 8, size=2)
        vb = rng.uniform(-8, 8, size=2)
        exact = swept_overlap_time(a, va, b, vb, 3.0)
        stepped = stepped_overlap_time(a, va, b, vb, 3.0)
        if math.isinf(exact) or math.isinf(stepped):
            # near-horizon or grazing contacts may fall either side of 3 s
            if not (math.isinf(exact) and math.isinf(stepped)):
                assert min(exact if math.isfinite(exact) else 3.0,
                           stepped if math.isfinite(stepped) else 3.0) > 2.95
            continue
        assert abs(exact - stepped) <= 0.0101


def test_already_overlapping_gives_zero():
    a = OrientedBox(0, 0, 0, 4, 2)
    b = OrientedBox(1, 0, 0.2, 4, 2)
    assert swept_overlap_time(a, np.zeros(2), b, np.zeros(2), 3.0) == 0.0


def test_polyline_projection():
    line = Polyline(np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]]))
    s, lat = line.project(np.array([3.0, 2.0]))
    assert s == pytest.approx(3.0)
    assert lat == pytest.approx(2.0)  # left of travel is positive
    s, lat = line.project(np.array([12.0, 5.0]))
    assert s == pytest.approx(15.0)
    assert lat == pytest.approx(-2.0)
    assert line.total_length == pytest.approx(20.0)
