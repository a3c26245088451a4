"""Closed-loop rollout of a planning policy on one scenario.

Every 0.1 s the harness re-assembles the scene observation from the
rolling history window, asks the policy for a fresh 8 s plan, and executes
the first planned step through a kinematic unicycle with acceleration and
yaw-rate clamps.  Other agents either replay their logged trajectories
(non-reactive mode) or follow their logged path under an intelligent
driver model that reacts to whoever is ahead of them (reactive mode).
Rollouts contain no randomness of their own: a deterministic policy gives
a deterministic log.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Polyline
from .model import PlannerModel
from .scene import (CURRENT_INDEX, DT, EGO_LENGTH, EGO_WIDTH, FUTURE_STEPS,
                    HISTORY_STEPS, AgentTrack, ScenarioRecord, wrap_angle)

NON_REACTIVE = "non_reactive"
REACTIVE = "reactive"
MODES = (NON_REACTIVE, REACTIVE)


@dataclass
class SimulationConfig:
    horizon_s: float = 15.0
    accel_clamp: float = 4.0
    yaw_rate_clamp: float = 0.5
    idm_accel: float = 1.5
    idm_decel: float = 3.0
    idm_headway: float = 1.6
    idm_min_gap: float = 2.5


@dataclass
class RolloutLog:
    scenario_id: str
    scenario_type: str
    mode: str
    ego_states: np.ndarray                 # (n+1, 4) x, y, heading, v
    agent_states: np.ndarray               # (n+1, n_agents, 5) x, y, heading, v, valid
    agent_sizes: np.ndarray                # (n_agents, 2) length, width
    ego_attention: list | None = None      # per-step final-layer attention rows
    failed: bool = False
    fail_reason: str | None = None


# ---------------------------------------------------------------------------
# policies: map an observation record to a global-frame pose plan
# ---------------------------------------------------------------------------

class ReplayPolicy:
    """Plays back the expert future, then brakes out comfortably.

    The logged future covers 8 s; rollouts may run longer, so the plan is
    extended with a jerk-limited deceleration to rest along the final
    heading.  Replaying a scripted expert through the simulator reproduces
    its log exactly (same integrator on both sides)."""

    BRAKE_ACCEL = 2.0
    BRAKE_JERK = 3.0      # slew rate for the commanded accel
    LAND_JERK = 1.5       # effective jerk of the final sqrt-law taper

    def __init__(self, record: ScenarioRecord):
        from .scene import integrate_unicycle
        future = record.ego_future
        v_end = float(future[-1, 3])
        if v_end > 1e-3:
            a_end = (v_end - float(future[-2, 3])) / DT
            v = self._stop_speeds(v_end, a_end)
            cont = integrate_unicycle(v, np.zeros(len(v)),
                                      x0=float(future[-1, 0]), y0=float(future[-1, 1]),
                                      h0=float(future[-1, 2]))
            self._plan = np.vstack([future, cont[1:]])
        else:
            self._plan = future.copy()
        self._tick = 0

    @classmethod
    def _stop_speeds(cls, v0: float, a0: float, max_steps: int = 300) -> np.ndarray:
        """Jerk-limited braking profile: accel slews toward -sqrt(2*j*v), a
        law whose accel reaches zero exactly when speed does."""
        v, a = v0, a0
        out = [v0]
        for _ in range(max_steps):
            # the -sqrt(2*j*v) law reaches a = 0 exactly when v = 0; its
            # target rises at LAND_JERK, slower than the slew can track
            a_target = max(-cls.BRAKE_ACCEL, -math.sqrt(2.0 * cls.LAND_JERK * v))
            a = float(np.clip(a_target, a - cls.BRAKE_JERK * DT, a + cls.BRAKE_JERK * DT))
            v = max(0.0, v + a * DT)
            out.append(v)
            if v == 0.0 and abs(a_target) < 1e-9:
                break
        out.extend([0.0] * 20)
        return np.array(out)

    def reset(self) -> None:
        self._tick = 0

    def plan(self, observation: ScenarioRecord) -> np.ndarray:
        remaining = self._plan[self._tick:]
        self._tick += 1
        if remaining.shape[0] >= 2:
            return remaining[:, :3]
        last = self._plan[-1:, :3]
        return np.repeat(last, 2, axis=0)


class StopPolicy:
    """Holds position: plans the current pose forever."""

    def reset(self) -> None:
        pass

    def plan(self, observation: ScenarioRecord) -> np.ndarray:
        cur = observation.current_state()
        return np.tile(cur[:3], (FUTURE_STEPS, 1))


class PlannerPolicy:
    """Wraps a trained model; re-encodes the scene and plans every tick."""

    def __init__(self, model: PlannerModel, use_pruning: bool = True):
        self.model = model
        self.use_pruning = use_pruning
        self.last_ego_attention: np.ndarray | None = None

    def reset(self) -> None:
        self.last_ego_attention = None

    def plan(self, observation: ScenarioRecord) -> np.ndarray:
        tokens = self.model.encode(observation)
        enc = self.model.run_encoder(tokens, pruning=self.use_pruning)
        self.last_ego_attention = enc.ego_attention[-1]
        decoded = self.model.decode(enc)
        local = decoded.ego_array()
        cur = observation.current_state()
        c, s = math.cos(cur[2]), math.sin(cur[2])
        out = np.zeros_like(local)
        out[:, 0] = cur[0] + local[:, 0] * c - local[:, 1] * s
        out[:, 1] = cur[1] + local[:, 0] * s + local[:, 1] * c
        out[:, 2] = wrap_angle(local[:, 2] + cur[2])
        return out


# ---------------------------------------------------------------------------
# agent models
# ---------------------------------------------------------------------------

class _AgentSim:
    def __init__(self, track: AgentTrack, mode: str, cfg: SimulationConfig):
        self.track = track
        self.cfg = cfg
        states = np.vstack([track.history, track.future])
        valid = np.concatenate([track.valid_history, track.valid_future])
        self.states = states
        self.valid = valid
        self.length, self.width = track.length, track.width

        self.reactive = False
        if mode == REACTIVE and valid.any():
            pts = states[valid][:, :2]
            moved = np.linalg.norm(pts[-1] - pts[0]) if len(pts) > 1 else 0.0
            top_speed = states[valid][:, 3].max()
            if moved > 0.5 and top_speed > 0.3:
                # path = logged positions plus a long extension along the last heading
                keep = np.concatenate([[True], np.linalg.norm(np.diff(pts, axis=0),
                                                              axis=1) > 0.02])
                pts = pts[keep]
                if len(pts) < 2:
                    pts = np.vstack([pts, pts[-1] + [1.0, 0.0]])
                last_h = states[valid][-1, 2]
                ext = pts[-1] + np.array([math.cos(last_h), math.sin(last_h)]) * 80.0
                self.path = Polyline(np.vstack([pts, ext]))
                self.v_des = float(top_speed)
                cur = states[CURRENT_INDEX]
                self.s, _ = self.path.project(cur[:2])
                self.v = float(cur[3])
                self.reactive = True

    def state_at(self, tick: int) -> np.ndarray:
        """(x, y, heading, v, valid) at sim tick (tick 0 = current time).

        Past the end of the log the agent continues at its final constant
        velocity, so log replay does not leave phantom walls on the road."""
        idx = CURRENT_INDEX + tick
        if idx < len(self.states):
            st = self.states[idx]
            return np.array([st[0], st[1], st[2], st[3], float(self.valid[idx])])
        if not self.valid[-1]:
            return np.zeros(5)
        last = self.states[-1]
        overrun = (idx - (len(self.states) - 1)) * DT
        return np.array([
            last[0] + last[3] * overrun * math.cos(last[2]),
            last[1] + last[3] * overrun * math.sin(last[2]),
            last[2], last[3], 1.0])

    def reactive_state(self) -> np.ndarray:
        pos, heading = self.path.point_at(self.s)
        return np.array([pos[0], pos[1], heading, self.v, 1.0])

    def idm_step(self, ego_state: np.ndarray, others: list[np.ndarray]) -> None:
        pos, heading = self.path.point_at(self.s)
        tangent = np.array([math.cos(heading), math.sin(heading)])
        gap, v_lead = math.inf, 0.0
        candidates = [(ego_state[:2], ego_state[3], ego_state[2], EGO_LENGTH)]
        candidates += [(o[:2], o[3], o[2], EGO_LENGTH) for o in others if o[4] > 0]
        for opos, ov, oh, olen in candidates:
            rel = np.asarray(opos) - pos
            lon = float(rel @ tangent)
            lat = abs(float(tangent[0] * rel[1] - tangent[1] * rel[0]))
            if 0.5 < lon < 60.0 and lat < 2.2:
                g = lon - 0.5 * (self.length + olen)
                if g < gap:
                    gap = g
                    v_lead = max(0.0, ov * math.cos(oh - heading))
        cfg = self.cfg
        free = 1.0 - (self.v / max(self.v_des, 0.1)) ** 4
        if math.isfinite(gap):
            s_star = (cfg.idm_min_gap + self.v * cfg.idm_headway
                      + self.v * (self.v - v_lead)
                      / (2.0 * math.sqrt(cfg.idm_accel * cfg.idm_decel)))
            accel = cfg.idm_accel * (free - (s_star / max(gap, 0.1)) ** 2)
        else:
            accel = cfg.idm_accel * free
        accel = float(np.clip(accel, -2.0 * cfg.idm_decel, cfg.idm_accel))
        self.s += self.v * DT
        self.v = max(0.0, self.v + accel * DT)


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------

class _ObservationBuilder:
    def __init__(self, record: ScenarioRecord):
        self.record = record
        self.ego_window = list(record.ego_history)
        self.agent_windows = [list(np.column_stack([
            np.vstack([a.history]),
            a.valid_history.astype(float)])) for a in record.agents]

    def push(self, ego_state: np.ndarray, agent_states: np.ndarray) -> None:
        self.ego_window.append(ego_state.copy())
        self.ego_window = self.ego_window[-HISTORY_STEPS:]
        for i in range(len(self.agent_windows)):
            self.agent_windows[i].append(agent_states[i])
            self.agent_windows[i] = self.agent_windows[i][-HISTORY_STEPS:]

    def observation(self) -> ScenarioRecord:
        r = self.record
        agents = []
        for i, a in enumerate(r.agents):
            win = np.array(self.agent_windows[i])
            valid = win[:, 4] > 0
            hist = win[:, :4].copy()
            hist[~valid] = 0.0
            agents.append(AgentTrack(
                history=hist, future=np.zeros((FUTURE_STEPS, 4)),
                valid_history=valid,
                valid_future=np.zeros(FUTURE_STEPS, dtype=bool),
                length=a.length, width=a.width))
        return ScenarioRecord(
            record_id=r.record_id, scenario_type=r.scenario_type,
            ego_history=np.array(self.ego_window), ego_future=np.zeros((FUTURE_STEPS, 4)),
            agents=agents, map_polylines=r.map_polylines,
            static_obstacles=r.static_obstacles, route=r.route,
            speed_limit=r.speed_limit)


def rollout(policy, record: ScenarioRecord, mode: str,
            cfg: SimulationConfig | None = None) -> RolloutLog:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    cfg = cfg or SimulationConfig()
    n_steps = int(round(cfg.horizon_s / DT))
    policy.reset()

    sims = [_AgentSim(a, mode, cfg) for a in record.agents]
    ego = record.current_state().copy()
    obs_builder = _ObservationBuilder(record)

    ego_log = np.zeros((n_steps + 1, 4))
    agent_log = np.zeros((n_steps + 1, len(sims), 5))
    attention = []
    ego_log[0] = ego
    for i, sim in enumerate(sims):
        agent_log[0, i] = sim.reactive_state() if sim.reactive else sim.state_at(0)

    failed, reason = False, None
    for k in range(n_steps):
        plan = policy.plan(obs_builder.observation())
        if not np.all(np.isfinite(plan)):
            failed, reason = True, f"non-finite plan at step {k}"
            ego_log[k + 1:] = ego_log[k]
            agent_log[k + 1:] = agent_log[k]
            break
        att = getattr(policy, "last_ego_attention", None)
        if att is not None:
            attention.append(np.asarray(att).copy())

        # first planned pose drives the controller; the pose after it sets speed
        v_target = float(np.linalg.norm(plan[1, :2] - plan[0, :2]) / DT) \
            if plan.shape[0] >= 2 else 0.0
        a_cmd = float(np.clip((v_target - ego[3]) / DT, -cfg.accel_clamp, cfg.accel_clamp))
        w_cmd = float(np.clip(wrap_angle(plan[0, 2] - ego[2]) / DT,
                              -cfg.yaw_rate_clamp, cfg.yaw_rate_clamp))
        ego = np.array([
            ego[0] + ego[3] * DT * math.cos(ego[2]),
            ego[1] + ego[3] * DT * math.sin(ego[2]),
            wrap_angle(ego[2] + w_cmd * DT),
            max(0.0, ego[3] + a_cmd * DT),
        ])

        prev_states = agent_log[k]
        for i, sim in enumerate(sims):
            if sim.reactive:
                others = [prev_states[j] for j in range(len(sims)) if j != i]
                sim.idm_step(ego_log[k], others)
                agent_log[k + 1, i] = sim.reactive_state()
            else:
                agent_log[k + 1, i] = sim.state_at(k + 1)
        ego_log[k + 1] = ego
        obs_builder.push(ego, agent_log[k + 1])

    return RolloutLog(
        scenario_id=record.record_id, scenario_type=record.scenario_type,
        mode=mode, ego_states=ego_log, agent_states=agent_log,
        agent_sizes=np.array([[s.length, s.width] for s in sims]).reshape(-1, 2),
        ego_attention=attention or None, failed=failed, fail_reason=reason)
