"""Oriented-box geometry: overlap tests, swept time-to-collision, polylines."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class OrientedBox:
    """Rectangle with center (x, y), heading (rad) and size (length along heading)."""

    x: float
    y: float
    heading: float
    length: float
    width: float

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        c, s = math.cos(self.heading), math.sin(self.heading)
        return np.array([c, s]), np.array([-s, c])

    def corners(self) -> np.ndarray:
        u, v = self.axes()
        hl, hw = 0.5 * self.length, 0.5 * self.width
        c = self.center
        return np.array([c + hl * u + hw * v, c + hl * u - hw * v,
                         c - hl * u - hw * v, c - hl * u + hw * v])

    def contains_points(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points inside (or on) the box."""
        d = np.asarray(points) - self.center
        u, v = self.axes()
        return (np.abs(d @ u) <= 0.5 * self.length) & (np.abs(d @ v) <= 0.5 * self.width)


def _radius_on_axis(box: OrientedBox, axis: np.ndarray) -> float:
    u, v = box.axes()
    return 0.5 * box.length * abs(float(axis @ u)) + 0.5 * box.width * abs(float(axis @ v))


def _sat_axes(a: OrientedBox, b: OrientedBox) -> list[np.ndarray]:
    au, av = a.axes()
    bu, bv = b.axes()
    return [au, av, bu, bv]


def boxes_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis test for two oriented rectangles (touching counts)."""
    d = b.center - a.center
    for axis in _sat_axes(a, b):
        gap = abs(float(d @ axis)) - _radius_on_axis(a, axis) - _radius_on_axis(b, axis)
        if gap > 0.0:
            return False
    return True


def separation_margin(a: OrientedBox, b: OrientedBox) -> float:
    """Largest gap over the SAT axes; positive means disjoint.

    Not a true distance, but sign-correct: <= 0 iff the boxes overlap.
    """
    d = b.center - a.center
    best = -math.inf
    for axis in _sat_axes(a, b):
        gap = abs(float(d @ axis)) - _radius_on_axis(a, axis) - _radius_on_axis(b, axis)
        best = max(best, gap)
    return best


def swept_overlap_time(a: OrientedBox, vel_a: np.ndarray,
                       b: OrientedBox, vel_b: np.ndarray,
                       horizon: float) -> float:
    """Earliest t in [0, horizon] at which the constant-velocity boxes overlap.

    Boxes translate without rotating, so each SAT axis sees the projected
    center gap move linearly; intersecting the per-axis overlap windows
    gives the exact first contact time.  Returns inf when there is none.
    """
    d0 = b.center - a.center
    vrel = np.asarray(vel_b, dtype=float) - np.asarray(vel_a, dtype=float)
    t_lo, t_hi = 0.0, horizon
    for axis in _sat_axes(a, b):
        r = _radius_on_axis(a, axis) + _radius_on_axis(b, axis)
        p0 = float(d0 @ axis)
        v = float(vrel @ axis)
        if abs(v) < 1e-12:
            if abs(p0) > r:
                return math.inf
            continue
        lo, hi = sorted(((-r - p0) / v, (r - p0) / v))
        t_lo, t_hi = max(t_lo, lo), min(t_hi, hi)
        if t_lo > t_hi:
            return math.inf
    return t_lo


class Polyline:
    """Arc-length parametrized 2-d polyline with projection queries."""

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ValueError(f"polyline needs (N>=2, 2) points, got {pts.shape}")
        self.points = pts
        seg = np.diff(pts, axis=0)
        self._seg = seg
        self._len = np.linalg.norm(seg, axis=1)
        self._len[self._len < 1e-12] = 1e-12
        self.cum_s = np.concatenate([[0.0], np.cumsum(self._len)])

    @property
    def total_length(self) -> float:
        return float(self.cum_s[-1])

    def project(self, point: np.ndarray) -> tuple[float, float]:
        """(arc length, signed lateral offset) of the closest point on the line.

        Lateral sign follows the left-of-travel convention.
        """
        p = np.asarray(point, dtype=float)
        rel = p - self.points[:-1]
        t = np.clip((rel * self._seg).sum(axis=1) / (self._len ** 2), 0.0, 1.0)
        foot = self.points[:-1] + t[:, None] * self._seg
        d2 = ((p - foot) ** 2).sum(axis=1)
        i = int(np.argmin(d2))
        tangent = self._seg[i] / self._len[i]
        off = p - foot[i]
        lateral = float(tangent[0] * off[1] - tangent[1] * off[0])
        return float(self.cum_s[i] + t[i] * self._len[i]), lateral

    def point_at(self, s: float) -> tuple[np.ndarray, float]:
        """(position, tangent heading) at arc length s, clamped to the line."""
        s = float(np.clip(s, 0.0, self.total_length))
        i = int(np.searchsorted(self.cum_s, s, side="right") - 1)
        i = min(max(i, 0), len(self._seg) - 1)
        frac = (s - self.cum_s[i]) / self._len[i]
        pos = self.points[i] + frac * self._seg[i]
        tangent = self._seg[i]
        return pos, math.atan2(tangent[1], tangent[0])
