"""Driving scenario records and the synthetic long-tail dataset generator.

A record is one episode: 2 s of ego history and 8 s of ego future at
10 Hz, surrounding agent tracks, map polylines, static obstacles, a route
corridor, a speed limit, and a scenario-type label.  The generator scripts
six scenario families with a heavily imbalanced default mix (about 45%
near-static episodes) so that training sets exhibit the long-tail shape
that makes dominant-scenario over-fitting visible.

Scripted experts are built from jerk-limited speed ramps and are verified
at generation time to be collision-free, comfortable, inside the route
corridor, and under the speed limit.  All randomness derives from one
seed, so a dataset is a pure function of its config.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .geometry import OrientedBox, Polyline, separation_margin
from .rng import STREAM_RECORD, derived_rng

DT = 0.1
HISTORY_STEPS = 20
FUTURE_STEPS = 80
TOTAL_STEPS = HISTORY_STEPS + FUTURE_STEPS
CURRENT_INDEX = HISTORY_STEPS - 1

EGO_LENGTH = 4.6
EGO_WIDTH = 1.85

SCENARIO_TYPES = (
    "stationary",
    "lead_follow",
    "lead_brake",
    "intersection_turn",
    "lane_change",
    "yield_merge",
)

DEFAULT_FRACTIONS = {
    "stationary": 0.45,
    "lead_follow": 0.25,
    "lead_brake": 0.12,
    "intersection_turn": 0.08,
    "lane_change": 0.06,
    "yield_merge": 0.04,
}

SCHEMA_VERSION = 1

# expert compliance envelope, kept inside the harness comfort bounds
_A_MAX = 2.2
_JERK_MAX = 3.8


class GenerationError(RuntimeError):
    """A scripted scenario violated its own safety/comfort contract."""


class DatasetIOError(ValueError):
    """Malformed dataset file."""


class ConfigError(ValueError):
    """Invalid generation config."""


def wrap_angle(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


# ---------------------------------------------------------------------------
# record datatypes
# ---------------------------------------------------------------------------

@dataclass
class AgentTrack:
    history: np.ndarray        # (20, 4) x, y, heading, v
    future: np.ndarray         # (80, 4)
    valid_history: np.ndarray  # (20,) bool
    valid_future: np.ndarray   # (80,) bool
    length: float = EGO_LENGTH
    width: float = EGO_WIDTH

    def observed_now(self) -> bool:
        return bool(self.valid_history[-1])


@dataclass
class MapPolyline:
    points: np.ndarray  # (10, 2)
    is_boundary: bool


@dataclass
class RouteCorridor:
    centerline: np.ndarray  # (K, 2)
    half_width: float

    def polyline(self) -> Polyline:
        return Polyline(self.centerline)


@dataclass
class ScenarioRecord:
    record_id: str
    scenario_type: str
    ego_history: np.ndarray  # (20, 4)
    ego_future: np.ndarray   # (80, 4)
    agents: list[AgentTrack]
    map_polylines: list[MapPolyline]
    static_obstacles: list[OrientedBox]
    route: RouteCorridor
    speed_limit: float

    def current_state(self) -> np.ndarray:
        return self.ego_history[-1]

    def validate(self) -> None:
        if self.scenario_type not in SCENARIO_TYPES:
            raise ValueError(f"unknown scenario type {self.scenario_type!r}")
        if self.ego_history.shape != (HISTORY_STEPS, 4):
            raise ValueError(f"ego history shape {self.ego_history.shape}")
        if self.ego_future.shape != (FUTURE_STEPS, 4):
            raise ValueError(f"ego future shape {self.ego_future.shape}")
        ego = np.vstack([self.ego_history, self.ego_future])
        _check_kinematics(ego, np.ones(TOTAL_STEPS, dtype=bool), "ego")
        for i, a in enumerate(self.agents):
            valid = np.concatenate([a.valid_history, a.valid_future])
            on = np.flatnonzero(valid)
            if on.size and not np.array_equal(on, np.arange(on[0], on[-1] + 1)):
                raise ValueError(f"agent {i}: validity flags not contiguous")
            states = np.vstack([a.history, a.future])
            if not np.allclose(states[~valid], 0.0):
                raise ValueError(f"agent {i}: invalid steps must be zeroed")
            _check_kinematics(states, valid, f"agent {i}")


def _check_kinematics(states: np.ndarray, valid: np.ndarray, who: str) -> None:
    """Stored speeds must match finite-difference speeds within 5%."""
    idx = np.flatnonzero(valid)
    for t in idx[:-1]:
        if not valid[t + 1]:
            continue
        fd = float(np.hypot(*(states[t + 1, :2] - states[t, :2]))) / DT
        v = float(states[t, 3])
        if abs(fd - v) > max(0.05 * v, 0.02):
            raise ValueError(f"{who}: speed {v:.3f} vs finite-difference {fd:.3f} at step {t}")


@dataclass
class DatasetManifest:
    counts: dict[str, int]
    seed: int
    config: dict = field(default_factory=dict)

    @property
    def dominant_set(self) -> set[str]:
        return dominant_types(self.counts)


def dominant_types(counts: dict[str, int]) -> set[str]:
    """Types whose count strictly exceeds the mean count per type."""
    if not counts:
        return set()
    mean = sum(counts.values()) / len(counts)
    return {t for t, c in counts.items() if c > mean}


# ---------------------------------------------------------------------------
# generation config
# ---------------------------------------------------------------------------

@dataclass
class GenConfig:
    n_records: int = 1000
    fractions: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_FRACTIONS))
    seed: int = 0
    lane_width: float = 3.6
    corridor_half_width: float = 3.0

    def validate(self) -> None:
        if self.n_records < 1:
            raise ConfigError("n_records must be positive")
        unknown = set(self.fractions) - set(SCENARIO_TYPES)
        if unknown:
            raise ConfigError(f"unknown scenario types in fractions: {sorted(unknown)}")
        total = sum(self.fractions.values())
        if abs(total - 1.0) > 1e-6:
            raise ConfigError(f"fractions sum to {total}, expected 1")

    def to_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "fractions": dict(self.fractions),
            "seed": self.seed,
            "lane_width": self.lane_width,
            "corridor_half_width": self.corridor_half_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


def apportion_counts(n: int, fractions: dict[str, float]) -> dict[str, int]:
    """Largest-remainder apportionment so counts are deterministic."""
    items = [(t, fractions[t]) for t in SCENARIO_TYPES if t in fractions]
    base = {t: int(math.floor(f * n)) for t, f in items}
    leftover = n - sum(base.values())
    remainders = sorted(items, key=lambda tf: (-(tf[1] * n - math.floor(tf[1] * n)), tf[0]))
    for t, _ in remainders[:leftover]:
        base[t] += 1
    return base


# ---------------------------------------------------------------------------
# motion profile helpers
# ---------------------------------------------------------------------------

def _ramp_min_duration(dv: float) -> float:
    dv = abs(dv)
    if dv < 1e-9:
        return DT
    return max(1.5 * dv / _A_MAX, math.sqrt(6.0 * dv / _JERK_MAX))


class SpeedPlan:
    """Piecewise speed profile from holds and smoothstep ramps."""

    def __init__(self, v0: float):
        self.v = [float(v0)]

    @property
    def current(self) -> float:
        return self.v[-1]

    @property
    def duration(self) -> float:
        return len(self.v) * DT

    def hold(self, seconds: float) -> "SpeedPlan":
        self.v.extend([self.current] * max(0, round(seconds / DT)))
        return self

    def ramp_to(self, target: float, seconds: float | None = None) -> "SpeedPlan":
        v0 = self.current
        need = _ramp_min_duration(target - v0)
        seconds = need if seconds is None else max(seconds, need)
        n = max(1, round(seconds / DT))
        u = np.arange(1, n + 1) / n
        s = u * u * (3.0 - 2.0 * u)
        self.v.extend((v0 + (target - v0) * s).tolist())
        return self

    def sample(self, n: int) -> np.ndarray:
        out = np.array(self.v[:n])
        if out.size < n:
            out = np.concatenate([out, np.full(n - out.size, self.current)])
        return out


def yaw_bump(n: int, start: int, ramp: int, hold: int, peak: float) -> np.ndarray:
    """Yaw-rate bump: smoothstep up, plateau, smoothstep down.  Integral = peak*(ramp+hold)*DT."""
    w = np.zeros(n)
    u = np.arange(1, ramp + 1) / ramp
    s = u * u * (3.0 - 2.0 * u)
    up = slice(start, start + ramp)
    flat = slice(start + ramp, start + ramp + hold)
    down = slice(start + ramp + hold, start + 2 * ramp + hold)
    w[up] = peak * s[:len(range(*up.indices(n)))]
    w[flat] = peak
    w[down] = peak * s[::-1][:len(range(*down.indices(n)))]
    return w


def integrate_unicycle(v: np.ndarray, omega: np.ndarray,
                       x0: float = 0.0, y0: float = 0.0, h0: float = 0.0) -> np.ndarray:
    """States (N, 4) advanced by p += v*dt*u(heading); heading += omega*dt.

    Forward-difference speed of the positions equals the stored speed
    exactly, which is what the record validator checks.
    """
    n = len(v)
    out = np.zeros((n, 4))
    x, y, h = x0, y0, h0
    for t in range(n):
        out[t] = (x, y, h, v[t])
        x += v[t] * DT * math.cos(h)
        y += v[t] * DT * math.sin(h)
        h = wrap_angle(h + omega[t] * DT)
    return out


def _recentre(states: np.ndarray, x: float = 0.0, y: float = 0.0) -> np.ndarray:
    """Shift a trajectory so the current-time state sits at (x, y)."""
    out = states.copy()
    out[:, 0] += x - states[CURRENT_INDEX, 0]
    out[:, 1] += y - states[CURRENT_INDEX, 1]
    return out


def _const_velocity_track(x: float, y: float, heading: float, v: float) -> np.ndarray:
    return integrate_unicycle(np.full(TOTAL_STEPS, v), np.zeros(TOTAL_STEPS),
                              x0=x - v * CURRENT_INDEX * DT * math.cos(heading),
                              y0=y - v * CURRENT_INDEX * DT * math.sin(heading),
                              h0=heading)


def _track_from_states(states: np.ndarray, length=EGO_LENGTH, width=EGO_WIDTH,
                       appear_step: int = 0) -> AgentTrack:
    valid = np.zeros(TOTAL_STEPS, dtype=bool)
    valid[appear_step:] = True
    st = states.copy()
    st[~valid] = 0.0
    return AgentTrack(history=st[:HISTORY_STEPS], future=st[HISTORY_STEPS:],
                      valid_history=valid[:HISTORY_STEPS], valid_future=valid[HISTORY_STEPS:],
                      length=length, width=width)


def _route_from_path(path_xy: np.ndarray, half_width: float,
                     stride: int = 6, extend: float = 70.0) -> RouteCorridor:
    pts = [path_xy[0] - _unit(path_xy[1] - path_xy[0]) * 15.0]
    pts.extend(path_xy[::stride])
    if (len(path_xy) - 1) % stride:
        pts.append(path_xy[-1])
    tail = _unit(path_xy[-1] - path_xy[-min(4, len(path_xy) - 1)])
    pts.append(path_xy[-1] + tail * extend)
    center = np.array(pts)
    keep = np.concatenate([[True], np.linalg.norm(np.diff(center, axis=0), axis=1) > 0.05])
    return RouteCorridor(centerline=center[keep], half_width=half_width)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 1e-9 else np.array([1.0, 0.0])


def _offset_polyline(path_xy: np.ndarray, offset: float, n_points: int = 10) -> np.ndarray:
    """Points offset laterally (left positive) from a path, resampled to n_points."""
    idx = np.linspace(0, len(path_xy) - 1, n_points).astype(int)
    pts = []
    for i in idx:
        j = min(i, len(path_xy) - 2)
        t = _unit(path_xy[j + 1] - path_xy[j])
        normal = np.array([-t[1], t[0]])
        pts.append(path_xy[i] + offset * normal)
    return np.array(pts)


def _line_polyline(p0, p1, n_points: int = 10) -> np.ndarray:
    return np.linspace(np.asarray(p0, float), np.asarray(p1, float), n_points)


# ---------------------------------------------------------------------------
# per-type scenario scripts
# ---------------------------------------------------------------------------

def _straight_map(rng, lane_width: float, x_lo=-30.0, x_hi=90.0) -> list[MapPolyline]:
    """Lane boundaries and centerlines, split into segments so a scene
    carries a realistic dozen-plus map tokens."""
    half = lane_width / 2
    lines: list[MapPolyline] = []
    boundary_ys = (-half - lane_width, -half, half, half + lane_width,
                   half + 2 * lane_width)
    center_ys = (-lane_width, 0.0, lane_width)
    x_mid = 0.5 * (x_lo + x_hi) + float(rng.uniform(-8.0, 8.0))
    for y in boundary_ys:
        for a, b in ((x_lo, x_mid), (x_mid, x_hi)):
            lines.append(MapPolyline(_line_polyline((a, y), (b, y)), True))
    for y in center_ys:
        for a, b in ((x_lo, x_mid), (x_mid, x_hi)):
            lines.append(MapPolyline(_line_polyline((a, y), (b, y)), False))
    n = int(rng.integers(11, len(lines) + 1))
    order = rng.permutation(len(lines))[:n]
    return [lines[i] for i in sorted(order)]


def _background_agents(rng, avoid_paths: list[np.ndarray], n_min: int = 6,
                       n_max: int = 10, x_lo=-25.0, x_hi=70.0,
                       clearance: float = 6.5) -> list[AgentTrack]:
    """Parked vehicles well off the travelled lanes; scene filler that makes
    token pruning meaningful without ever interacting with the moving cast."""
    out = []
    for _ in range(int(rng.integers(n_min, n_max + 1))):
        for _attempt in range(40):
            side = 1.0 if rng.random() < 0.5 else -1.0
            pos = np.array([float(rng.uniform(x_lo, x_hi)),
                            float(side * rng.uniform(7.6, 11.0))])
            if all(np.linalg.norm(path - pos, axis=1).min() >= clearance
                   for path in avoid_paths if len(path)):
                out.append(_track_from_states(_const_velocity_track(
                    pos[0], pos[1], float(rng.uniform(-0.15, 0.15)), 0.0)))
                break
    return out


def _scatter_obstacles(rng, avoid_paths: list[np.ndarray], n_min: int = 2,
                       n_max: int = 6, x_lo=-20.0, x_hi=60.0,
                       clearance: float = 5.0) -> list[OrientedBox]:
    out = []
    for _ in range(int(rng.integers(n_min, n_max + 1))):
        for _attempt in range(40):
            side = 1.0 if rng.random() < 0.5 else -1.0
            pos = np.array([float(rng.uniform(x_lo, x_hi)),
                            float(side * rng.uniform(6.0, 6.9))])
            if all(np.linalg.norm(path - pos, axis=1).min() >= clearance
                   for path in avoid_paths if len(path)):
                out.append(OrientedBox(
                    x=pos[0], y=pos[1],
                    heading=float(rng.uniform(-0.2, 0.2)),
                    length=float(rng.uniform(0.5, 1.4)),
                    width=float(rng.uniform(0.4, 0.9)),
                ))
                break
    return out


def _build_stationary(rng, cfg: GenConfig):
    creep = float(rng.uniform(0.35, 0.7))
    plan = SpeedPlan(0.0)
    plan.hold(HISTORY_STEPS * DT + rng.uniform(0.8, 2.2))
    plan.ramp_to(creep).hold(rng.uniform(0.8, 1.6)).ramp_to(0.0).hold(10.0)
    v = plan.sample(TOTAL_STEPS)
    ego = _recentre(integrate_unicycle(v, np.zeros(TOTAL_STEPS)))

    agents = []
    # stopped queue ahead, creeping with the same profile so gaps never shrink
    gap = float(rng.uniform(9.0, 14.0))
    for k in range(int(rng.integers(1, 4))):
        lead = _recentre(integrate_unicycle(v, np.zeros(TOTAL_STEPS)), x=gap * (k + 1))
        agents.append(_track_from_states(lead))
    for _ in range(int(rng.integers(0, 3))):
        side = cfg.lane_width if rng.random() < 0.5 else -cfg.lane_width
        agents.append(_track_from_states(
            _const_velocity_track(float(rng.uniform(-15, 30)), side, 0.0, 0.0)))

    path = ego[:, :2]
    return ego, agents, path, float(rng.uniform(8.0, 12.0))


def _build_lead_follow(rng, cfg: GenConfig):
    if rng.random() < 0.45:
        return _build_lead_follow_queue_start(rng, cfg)
    v0 = float(rng.uniform(6.0, 9.0))
    drift = float(rng.uniform(-0.4, 0.4))
    ego_v = SpeedPlan(v0).hold(2.5).ramp_to(v0 + drift).hold(10.0).sample(TOTAL_STEPS)
    ego = _recentre(integrate_unicycle(ego_v, np.zeros(TOTAL_STEPS)))

    gap = float(rng.uniform(20.0, 30.0))
    lead = _recentre(_const_velocity_track(0.0, 0.0, 0.0, v0 + drift), x=gap)
    agents = [_track_from_states(lead)]
    if rng.random() < 0.7:
        oncoming_x = float(rng.uniform(35.0, 60.0))
        agents.append(_track_from_states(_const_velocity_track(
            oncoming_x, cfg.lane_width, math.pi, float(rng.uniform(5.0, 8.0))),
            appear_step=int(rng.integers(0, 12))))
    return ego, agents, ego[:, :2], v0 + 2.5


def _build_lead_follow_queue_start(rng, cfg: GenConfig):
    """Stop-and-go traffic: both stopped, the lead pulls away, the ego
    follows.  Stopped history with a moving expert is where over-fitting
    to the dominant near-static scenarios shows up."""
    v_cruise = float(rng.uniform(4.0, 6.0))
    t_lead = float(rng.uniform(0.5, 1.2))
    t_ego = t_lead + float(rng.uniform(0.8, 1.4))
    gap0 = float(rng.uniform(8.0, 12.0))

    lead_v = SpeedPlan(0.0).hold(HISTORY_STEPS * DT + t_lead).ramp_to(v_cruise)
    lead_v.hold(10.0)
    lead = _recentre(integrate_unicycle(lead_v.sample(TOTAL_STEPS),
                                        np.zeros(TOTAL_STEPS)), x=gap0)
    ego_v = SpeedPlan(0.0).hold(HISTORY_STEPS * DT + t_ego).ramp_to(v_cruise)
    ego_v.hold(10.0)
    ego = _recentre(integrate_unicycle(ego_v.sample(TOTAL_STEPS),
                                       np.zeros(TOTAL_STEPS)))

    agents = [_track_from_states(lead)]
    if rng.random() < 0.5:
        agents.append(_track_from_states(_const_velocity_track(
            float(rng.uniform(40.0, 60.0)), cfg.lane_width, math.pi,
            float(rng.uniform(4.0, 7.0)))))
    return ego, agents, ego[:, :2], v_cruise + 2.5


def _build_lead_brake(rng, cfg: GenConfig):
    v0 = float(rng.uniform(6.5, 8.5))
    t_lb = float(rng.uniform(0.5, 1.2))
    a_lead = float(rng.uniform(2.4, 3.0))
    ramp_T = _ramp_min_duration(v0)
    margin = 8.0 + EGO_LENGTH  # bumper margin + car length, centre to centre

    gap0 = float(rng.uniform(24.0, 32.0))
    for _ in range(24):
        lead_stop_x = gap0 + v0 * t_lb + v0 * v0 / (2.0 * a_lead)
        d_stop = lead_stop_x - margin
        t_hold = (d_stop - v0 * ramp_T / 2.0) / v0
        if t_hold >= 0.3:
            ego_v = SpeedPlan(v0).hold(HISTORY_STEPS * DT + t_hold).ramp_to(0.0).hold(10.0)
            ego = _recentre(integrate_unicycle(ego_v.sample(TOTAL_STEPS), np.zeros(TOTAL_STEPS)))
            lead_v = np.full(TOTAL_STEPS, v0)
            tt = (np.arange(TOTAL_STEPS) - CURRENT_INDEX) * DT
            braking = np.maximum(0.0, v0 - a_lead * np.maximum(0.0, tt - t_lb))
            lead_v = np.minimum(lead_v, braking)
            lead = _recentre(integrate_unicycle(lead_v, np.zeros(TOTAL_STEPS)), x=gap0)
            bumper = lead[:, 0] - ego[:, 0] - EGO_LENGTH
            if bumper.min() >= 5.0:
                break
        gap0 += 2.0
    else:
        raise GenerationError("lead_brake: could not find a feasible gap")

    agents = [_track_from_states(lead)]
    if rng.random() < 0.6:
        agents.append(_track_from_states(_const_velocity_track(
            float(rng.uniform(40.0, 65.0)), cfg.lane_width, math.pi,
            float(rng.uniform(5.0, 7.5)))))
    return ego, agents, ego[:, :2], v0 + 2.0


def _build_intersection_turn(rng, cfg: GenConfig):
    v0 = float(rng.uniform(4.0, 5.5))
    v_turn = float(rng.uniform(2.6, 3.2))
    direction = 1.0 if rng.random() < 0.5 else -1.0

    slow = SpeedPlan(v0).hold(HISTORY_STEPS * DT + 0.2).ramp_to(v_turn)
    t_turn_start = slow.duration - HISTORY_STEPS * DT + float(rng.uniform(0.2, 0.5))
    omega_peak = direction * float(rng.uniform(0.30, 0.36))
    ramp_steps = 8
    hold_steps = max(1, round((math.pi / 2) / abs(omega_peak) / DT) - ramp_steps)
    # trim peak so the integrated heading change is exactly a quarter turn
    omega_peak = direction * (math.pi / 2) / ((ramp_steps + hold_steps) * DT)
    turn_dur = (2 * ramp_steps + hold_steps) * DT

    speed = SpeedPlan(v0).hold(HISTORY_STEPS * DT + 0.2).ramp_to(v_turn)
    speed.hold(t_turn_start - (speed.duration - HISTORY_STEPS * DT) + turn_dur)
    speed.ramp_to(float(rng.uniform(3.5, 4.5))).hold(10.0)
    v = speed.sample(TOTAL_STEPS)

    omega = yaw_bump(TOTAL_STEPS, HISTORY_STEPS + round(t_turn_start / DT),
                     ramp_steps, hold_steps, omega_peak)
    ego = _recentre(integrate_unicycle(v, omega))

    corner = ego[HISTORY_STEPS + round(t_turn_start / DT), :2]
    cross_dir = np.array([0.0, direction])
    waiting_pos = corner + cross_dir * float(rng.uniform(9.0, 13.0))
    agents = [_track_from_states(_const_velocity_track(
        waiting_pos[0], waiting_pos[1], -direction * math.pi / 2 + 0.0, 0.0))]
    leaving_pos = corner - cross_dir * float(rng.uniform(10.0, 14.0))
    agents.append(_track_from_states(_const_velocity_track(
        leaving_pos[0], leaving_pos[1], -direction * math.pi / 2,
        float(rng.uniform(3.0, 6.0)))))

    return ego, agents, ego[:, :2], v0 + 2.5


def _build_lane_change(rng, cfg: GenConfig):
    v0 = float(rng.uniform(6.0, 8.0))
    v = np.full(TOTAL_STEPS, v0)
    start = HISTORY_STEPS + int(rng.integers(5, 15))
    ramp = int(rng.integers(12, 16))
    target = cfg.lane_width

    lo, hi = 0.02, 0.6
    omega = np.zeros(TOTAL_STEPS)
    for _ in range(40):
        peak = 0.5 * (lo + hi)
        omega = yaw_bump(TOTAL_STEPS, start, ramp, 0, peak)
        omega -= yaw_bump(TOTAL_STEPS, start + ramp * 2, ramp, 0, peak)
        states = integrate_unicycle(v, omega)
        lat = states[-1, 1] - states[0, 1]
        if abs(lat - target) < 0.02:
            break
        if lat < target:
            lo = peak
        else:
            hi = peak
    ego = _recentre(integrate_unicycle(v, omega))

    agents = [_track_from_states(_const_velocity_track(
        float(rng.uniform(38.0, 48.0)), 0.0, 0.0, v0 - float(rng.uniform(1.2, 2.0))))]
    if rng.random() < 0.7:
        agents.append(_track_from_states(_const_velocity_track(
            float(rng.uniform(-36.0, -28.0)), cfg.lane_width, 0.0,
            v0 - float(rng.uniform(2.2, 3.0))),
            appear_step=int(rng.integers(0, 10))))

    # corridor spans both lanes: midline centerline, widened half-width
    x_line = np.linspace(-30.0, 150.0, 31)
    mid = np.stack([x_line, np.full_like(x_line, cfg.lane_width / 2)], axis=1)
    route = RouteCorridor(centerline=mid, half_width=cfg.lane_width / 2 + cfg.corridor_half_width)
    return ego, agents, route, v0 + 2.0


def _build_yield_merge(rng, cfg: GenConfig):
    v_arrive = float(rng.uniform(2.5, 3.5))
    stop_plan = SpeedPlan(v_arrive)
    stop_plan.ramp_to(0.0, seconds=1.2)
    pre = stop_plan.sample(HISTORY_STEPS)

    x_conflict = float(rng.uniform(11.0, 14.0))
    agent_speed = float(rng.uniform(6.0, 7.5))
    agent_y0 = float(rng.uniform(14.0, 18.0))
    t_clear = (agent_y0 + 3.0 + EGO_LENGTH) / agent_speed
    t_go = t_clear + float(rng.uniform(1.2, 1.8))
    v_go = float(rng.uniform(4.5, 5.5))

    plan = SpeedPlan(v_arrive).ramp_to(0.0, seconds=1.2)
    plan.hold(HISTORY_STEPS * DT + t_go - plan.duration)
    plan.ramp_to(v_go).hold(10.0)
    v = plan.sample(TOTAL_STEPS)
    v[:HISTORY_STEPS] = pre
    ego = _recentre(integrate_unicycle(v, np.zeros(TOTAL_STEPS)))

    crossing = _const_velocity_track(x_conflict, agent_y0, -math.pi / 2, agent_speed)
    agents = [_track_from_states(crossing)]
    if rng.random() < 0.6:
        agents.append(_track_from_states(_const_velocity_track(
            float(rng.uniform(30.0, 44.0)), 0.0, 0.0, 0.0)))

    return ego, agents, ego[:, :2], v_go + 2.0


_BUILDERS = {
    "stationary": _build_stationary,
    "lead_follow": _build_lead_follow,
    "lead_brake": _build_lead_brake,
    "intersection_turn": _build_intersection_turn,
    "lane_change": _build_lane_change,
    "yield_merge": _build_yield_merge,
}


def build_record(scenario_type: str, index: int, cfg: GenConfig) -> ScenarioRecord:
    """Build and validate one scripted episode (pure function of seed and index)."""
    rng = derived_rng(cfg.seed, STREAM_RECORD, index)
    ego, agents, path_or_route, speed_limit = _BUILDERS[scenario_type](rng, cfg)

    if isinstance(path_or_route, RouteCorridor):
        route = path_or_route
        path = ego[:, :2]
    else:
        path = path_or_route
        stride = 4 if scenario_type == "intersection_turn" else 8
        route = _route_from_path(path, cfg.corridor_half_width, stride=stride)

    if scenario_type == "intersection_turn":
        half = cfg.lane_width / 2
        polylines = []
        for off in (-half - cfg.lane_width, -half, 0.0, half, half + cfg.lane_width):
            pts = _offset_polyline(route.centerline, off, n_points=19)
            for chunk in (pts[:10], pts[9:]):
                polylines.append(MapPolyline(chunk, is_boundary=off != 0.0))
    else:
        polylines = _straight_map(rng, cfg.lane_width)

    avoid = [ego[:, :2]]
    for a in agents:
        states = np.vstack([a.history, a.future])
        valid = np.concatenate([a.valid_history, a.valid_future])
        if valid.any():
            avoid.append(states[valid][:, :2])
    agents.extend(_background_agents(rng, avoid))
    obstacles = _scatter_obstacles(rng, avoid)

    record = ScenarioRecord(
        record_id=f"{scenario_type}-{index:05d}",
        scenario_type=scenario_type,
        ego_history=ego[:HISTORY_STEPS],
        ego_future=ego[HISTORY_STEPS:],
        agents=agents,
        map_polylines=polylines,
        static_obstacles=obstacles,
        route=route,
        speed_limit=float(speed_limit),
    )
    record.validate()
    _check_expert_compliance(record)
    return record


def _check_expert_compliance(record: ScenarioRecord) -> None:
    """Expert logs must already satisfy every closed-loop metric gate."""
    ego = np.vstack([record.ego_history, record.ego_future])
    v = ego[CURRENT_INDEX:, 3]
    acc = np.diff(v) / DT
    jerk = np.diff(acc) / DT
    if np.abs(acc).max(initial=0.0) > 2.4:
        raise GenerationError(f"{record.record_id}: expert accel {np.abs(acc).max():.2f}")
    if np.abs(jerk).max(initial=0.0) > 4.13:
        raise GenerationError(f"{record.record_id}: expert jerk {np.abs(jerk).max():.2f}")
    if v.max() > record.speed_limit + 0.3:
        raise GenerationError(f"{record.record_id}: expert speed {v.max():.2f}")

    line = record.route.polyline()
    for t in range(CURRENT_INDEX, TOTAL_STEPS):
        box = OrientedBox(ego[t, 0], ego[t, 1], ego[t, 2], EGO_LENGTH, EGO_WIDTH)
        for corner in box.corners():
            _, lat = line.project(corner)
            if abs(lat) > record.route.half_width - 0.02:
                raise GenerationError(f"{record.record_id}: expert leaves corridor at step {t}")
        for a in record.agents:
            states = np.vstack([a.history, a.future])
            valid = np.concatenate([a.valid_history, a.valid_future])
            if not valid[t]:
                continue
            other = OrientedBox(states[t, 0], states[t, 1], states[t, 2], a.length, a.width)
            if separation_margin(box, other) < 0.3:
                raise GenerationError(f"{record.record_id}: expert clearance at step {t}")
        for ob in record.static_obstacles:
            if separation_margin(box, ob) < 0.3:
                raise GenerationError(f"{record.record_id}: expert near obstacle at step {t}")


def generate_dataset(cfg: GenConfig) -> tuple[list[ScenarioRecord], DatasetManifest]:
    """Deterministic long-tail dataset: same config and seed, same records."""
    cfg.validate()
    counts = apportion_counts(cfg.n_records, cfg.fractions)
    order: list[str] = []
    for t in SCENARIO_TYPES:
        order.extend([t] * counts.get(t, 0))
    # interleave types deterministically so batches mix labels
    perm = derived_rng(cfg.seed, STREAM_RECORD, 10**6).permutation(len(order))
    records = [build_record(order[i], idx, cfg) for idx, i in enumerate(perm)]
    manifest = DatasetManifest(counts=counts, seed=cfg.seed, config=cfg.to_dict())
    return records, manifest


# ---------------------------------------------------------------------------
# serialization (JSON lines, one record per line)
# ---------------------------------------------------------------------------

def _record_to_dict(r: ScenarioRecord) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "id": r.record_id,
        "type": r.scenario_type,
        "ego_history": r.ego_history.tolist(),
        "ego_future": r.ego_future.tolist(),
        "agents": [{
            "history": a.history.tolist(),
            "future": a.future.tolist(),
            "valid_history": a.valid_history.astype(int).tolist(),
            "valid_future": a.valid_future.astype(int).tolist(),
            "length": a.length,
            "width": a.width,
        } for a in r.agents],
        "map_polylines": [{
            "points": p.points.tolist(),
            "is_boundary": bool(p.is_boundary),
        } for p in r.map_polylines],
        "static_obstacles": [[o.x, o.y, o.heading, o.length, o.width]
                             for o in r.static_obstacles],
        "route": {
            "centerline": r.route.centerline.tolist(),
            "half_width": r.route.half_width,
        },
        "speed_limit": r.speed_limit,
    }


def _record_from_dict(d: dict, line_no: int) -> ScenarioRecord:
    def need(key, src=d):
        if key not in src:
            raise DatasetIOError(f"line {line_no}: missing field '{key}'")
        return src[key]

    version = need("schema_version")
    if version != SCHEMA_VERSION:
        raise DatasetIOError(
            f"line {line_no}: schema version {version} unsupported (expected {SCHEMA_VERSION})")
    agents = [AgentTrack(
        history=np.array(need("history", a)),
        future=np.array(need("future", a)),
        valid_history=np.array(need("valid_history", a), dtype=bool),
        valid_future=np.array(need("valid_future", a), dtype=bool),
        length=float(need("length", a)),
        width=float(need("width", a)),
    ) for a in need("agents")]
    route_d = need("route")
    return ScenarioRecord(
        record_id=need("id"),
        scenario_type=need("type"),
        ego_history=np.array(need("ego_history")),
        ego_future=np.array(need("ego_future")),
        agents=agents,
        map_polylines=[MapPolyline(points=np.array(need("points", p)),
                                   is_boundary=bool(need("is_boundary", p)))
                       for p in need("map_polylines")],
        static_obstacles=[OrientedBox(*ob) for ob in need("static_obstacles")],
        route=RouteCorridor(centerline=np.array(need("centerline", route_d)),
                            half_width=float(need("half_width", route_d))),
        speed_limit=float(need("speed_limit")),
    )


def save_dataset(records: Iterable[ScenarioRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(_record_to_dict(r)) + "\n")


def load_dataset(path) -> list[ScenarioRecord]:
    records = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetIOError(f"line {i}: invalid JSON ({exc.msg})") from None
            records.append(_record_from_dict(d, i))
    return records


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w") as fh:
        json.dump({
            "schema_version": SCHEMA_VERSION,
            "counts": manifest.counts,
            "seed": manifest.seed,
            "config": manifest.config,
            "dominant_set": sorted(manifest.dominant_set),
        }, fh, indent=2)


def load_manifest(path) -> DatasetManifest:
    with open(path) as fh:
        d = json.load(fh)
    if d.get("schema_version") != SCHEMA_VERSION:
        raise DatasetIOError(f"manifest schema version {d.get('schema_version')} unsupported")
    return DatasetManifest(counts=d["counts"], seed=d["seed"], config=d.get("config", {}))


def manifest_for(records: list[ScenarioRecord], seed: int = 0) -> DatasetManifest:
    counts: dict[str, int] = {}
    for r in records:
        counts[r.scenario_type] = counts.get(r.scenario_type, 0) + 1
    return DatasetManifest(counts=counts, seed=seed)
