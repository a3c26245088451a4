"""Closed-loop driving metrics: rule compliance, safety, comfort, progress.

Per scenario the harness reports at-fault collision, minimum
time-to-collision compliance, corridor containment, longitudinal comfort,
speed-limit compliance, and route progress relative to the expert.  The
aggregate scenario score gates on collision and drivable-area compliance
(either failure zeroes the scenario) and otherwise averages the remaining
booleans with clamped progress, scaled to 0..100.  This is a simplified,
documented stand-in for benchmark-native scoring formulas, which are not
public.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import OrientedBox, boxes_overlap, swept_overlap_time
from .scene import (CURRENT_INDEX, DT, EGO_LENGTH, EGO_WIDTH, ScenarioRecord,
                    wrap_angle)
from .simulation import RolloutLog


@dataclass
class MetricThresholds:
    ttc_min: float = 0.95
    ttc_lookahead: float = 3.0
    accel_max: float = 2.4
    jerk_max: float = 4.13
    speed_tolerance: float = 0.5
    min_expert_progress: float = 0.1


@dataclass
class ScenarioMetrics:
    scenario_id: str
    scenario_type: str
    mode: str
    failed: bool
    at_fault_collision: bool
    ttc_ok: bool
    drivable_ok: bool
    comfort_ok: bool
    speed_ok: bool
    progress_ratio: float

    @property
    def score(self) -> float:
        if self.failed or self.at_fault_collision or not self.drivable_ok:
            return 0.0
        parts = [float(self.ttc_ok), float(self.comfort_ok), float(self.speed_ok),
                 min(1.0, max(0.0, self.progress_ratio))]
        return 100.0 * float(np.mean(parts))


def _ego_box(state: np.ndarray) -> OrientedBox:
    return OrientedBox(float(state[0]), float(state[1]), float(state[2]),
                       EGO_LENGTH, EGO_WIDTH)


def collision_check(ego_state: np.ndarray, other_box: OrientedBox,
                    other_velocity: np.ndarray) -> tuple[bool, bool]:
    """(overlap, at_fault).  A collision is the ego's fault unless the other
    body struck from behind: its center sits in the ego's rear half-plane
    and the ego is not out-running it along its own heading."""
    ego = _ego_box(ego_state)
    if not boxes_overlap(ego, other_box):
        return False, False
    heading = float(ego_state[2])
    u = np.array([math.cos(heading), math.sin(heading)])
    rel = other_box.center - ego.center
    behind = float(rel @ u) < 0.0
    closing = float(np.asarray(other_velocity) @ u)
    rear_ended = behind and float(ego_state[3]) <= closing + 1e-9
    return True, not rear_ended


def time_to_collision(ego_state: np.ndarray, agent_states: np.ndarray,
                      agent_sizes: np.ndarray, lookahead: float = 3.0) -> float:
    """Smallest constant-velocity overlap time against any valid agent."""
    ego = _ego_box(ego_state)
    ego_vel = ego_state[3] * np.array([math.cos(ego_state[2]), math.sin(ego_state[2])])
    best = math.inf
    for st, (length, width) in zip(agent_states, agent_sizes):
        if st[4] <= 0:
            continue
        box = OrientedBox(float(st[0]), float(st[1]), float(st[2]),
                          float(length), float(width))
        vel = st[3] * np.array([math.cos(st[2]), math.sin(st[2])])
        best = min(best, swept_overlap_time(ego, ego_vel, box, vel, lookahead))
    return best


def compute_metrics(log: RolloutLog, record: ScenarioRecord,
                    thresholds: MetricThresholds | None = None) -> ScenarioMetrics:
    th = thresholds or MetricThresholds()
    ego = log.ego_states
    n_steps = ego.shape[0]

    at_fault = False
    ttc_ok = True
    for k in range(n_steps):
        state = ego[k]
        for i in range(log.agent_states.shape[1]):
            st = log.agent_states[k, i]
            if st[4] <= 0:
                continue
            box = OrientedBox(float(st[0]), float(st[1]), float(st[2]),
                              *log.agent_sizes[i])
            vel = st[3] * np.array([math.cos(st[2]), math.sin(st[2])])
            hit, fault = collision_check(state, box, vel)
            if hit and fault:
                at_fault = True
        for ob in record.static_obstacles:
            hit, fault = collision_check(state, ob, np.zeros(2))
            if hit and fault:
                at_fault = True
        ttc = time_to_collision(state, log.agent_states[k], log.agent_sizes,
                                th.ttc_lookahead)
        if ttc < th.ttc_min:
            ttc_ok = False

    line = record.route.polyline()
    drivable_ok = True
    for k in range(n_steps):
        for corner in _ego_box(ego[k]).corners():
            _, lat = line.project(corner)
            if abs(lat) > record.route.half_width + 1e-6:
                drivable_ok = False
                break
        if not drivable_ok:
            break

    v = ego[:, 3]
    acc = np.diff(v) / DT
    jerk = np.diff(acc) / DT
    comfort_ok = bool(np.abs(acc).max(initial=0.0) <= th.accel_max
                      and np.abs(jerk).max(initial=0.0) <= th.jerk_max)
    speed_ok = bool(v.max() <= record.speed_limit + th.speed_tolerance)

    s_start, _ = line.project(ego[0, :2])
    s_end, _ = line.project(ego[-1, :2])
    expert_start, _ = line.project(record.current_state()[:2])
    expert_end, _ = line.project(record.ego_future[-1, :2])
    expert_arc = max(expert_end - expert_start, th.min_expert_progress)
    progress = max(0.0, s_end - s_start) / expert_arc

    return ScenarioMetrics(
        scenario_id=log.scenario_id, scenario_type=log.scenario_type,
        mode=log.mode, failed=log.failed, at_fault_collision=at_fault,
        ttc_ok=ttc_ok, drivable_ok=drivable_ok, comfort_ok=comfort_ok,
        speed_ok=speed_ok, progress_ratio=float(progress))


def aggregate_score(rows: list[ScenarioMetrics]) -> float:
    if not rows:
        raise ValueError("aggregate_score: no scenarios to score")
    return float(np.mean([r.score for r in rows]))


@dataclass
class MetricsReport:
    rows: list[ScenarioMetrics] = field(default_factory=list)

    @property
    def overall_score(self) -> float:
        return aggregate_score(self.rows)

    def by_type(self) -> dict[str, float]:
        types = sorted({r.scenario_type for r in self.rows})
        return {t: aggregate_score([r for r in self.rows if r.scenario_type == t])
                for t in types}

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]

    def to_csv(self, path) -> None:
        cols = ("scenario_id", "scenario_type", "mode", "failed",
                "at_fault_collision", "ttc_ok", "drivable_ok", "comfort_ok",
                "speed_ok", "progress_ratio", "score")
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for r in self.rows:
                vals = [str(getattr(r, c)) if c != "score" else repr(r.score)
                        for c in cols]
                fh.write(",".join(vals) + "\n")

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({
                "overall_score": self.overall_score,
                "by_type": self.by_type(),
                "rows": [dict(asdict(r), score=r.score) for r in self.rows],
            }, fh, indent=2)
