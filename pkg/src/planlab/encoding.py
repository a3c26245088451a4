"""Scene featurization and token embedding.

A scenario becomes a fixed-budget token matrix: one ego token, then padded
agent / map / obstacle slots.  Fixed budgets keep every sample the same
shape, which is what lets features from two samples be mixed slot-by-slot
later in the pipeline.  Raw per-token features are embedded by a
per-category two-layer perceptron, then a frozen Fourier embedding of each
token's anchor position and a learned per-category embedding are added.
Invalid (padding) slots carry exactly the positional plus category terms
and are masked out of attention downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .scene import (CURRENT_INDEX, FUTURE_STEPS, HISTORY_STEPS,
                    ScenarioRecord, wrap_angle)

CATEGORIES = ("ev", "agent", "map", "obstacle")

RAW_DIMS = {
    "ev": HISTORY_STEPS * 5,
    "agent": HISTORY_STEPS * 5,
    "map": 10 * 2 + 1,
    "obstacle": 4,
}


@dataclass(frozen=True)
class TokenLayout:
    """Per-category token budgets.  Default totals 49 tokens."""

    n_agents: int = 16
    n_map: int = 24
    n_obstacles: int = 8

    @property
    def total(self) -> int:
        return 1 + self.n_agents + self.n_map + self.n_obstacles

    def ranges(self) -> dict[str, tuple[int, int]]:
        a0 = 1
        m0 = a0 + self.n_agents
        o0 = m0 + self.n_map
        return {"ev": (0, 1), "agent": (a0, m0), "map": (m0, o0),
                "obstacle": (o0, o0 + self.n_obstacles)}

    def to_dict(self) -> dict:
        return {"n_agents": self.n_agents, "n_map": self.n_map,
                "n_obstacles": self.n_obstacles}


class FourierEmbedding:
    """sin/cos features of positions through a frozen random projection."""

    def __init__(self, dim: int, rng: np.random.Generator, freq_scale: float = 0.1):
        if dim % 2:
            raise ValueError("embedding dim must be even")
        self.dim = dim
        self.freqs = rng.normal(0.0, freq_scale, size=(dim // 2, 2))

    def __call__(self, positions: np.ndarray) -> np.ndarray:
        pos = np.atleast_2d(np.asarray(positions, dtype=float))
        ang = pos @ self.freqs.T
        out = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
        return out if np.asarray(positions).ndim == 2 else out[0]


@dataclass
class SceneFeatures:
    """Raw (pre-embedding) per-token features in the ego frame."""

    raw: dict[str, np.ndarray]          # category -> (n_slots, raw_dim)
    anchors: np.ndarray                 # (L, 2) token reference points
    valid: np.ndarray                   # (L,) bool
    ranges: dict[str, tuple[int, int]]
    layout: TokenLayout


@dataclass
class SceneTokens:
    """Embedded token matrix plus masks; the encoder's input."""

    x0: ad.Tensor                       # (L, D)
    valid: np.ndarray
    anchors: np.ndarray
    ranges: dict[str, tuple[int, int]]
    layout: TokenLayout


def _ego_frame(record: ScenarioRecord):
    cur = record.current_state()
    c, s = math.cos(cur[2]), math.sin(cur[2])
    rot = np.array([[c, s], [-s, c]])

    def to_ego(points: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(points) - cur[:2]) @ rot.T

    return cur, to_ego


def _history_features(states: np.ndarray, valid: np.ndarray, rot: np.ndarray,
                      heading0: float) -> np.ndarray:
    """(20, 5) per-step (dx, dy, cos, sin, v): ego-frame displacements and headings."""
    out = np.zeros((HISTORY_STEPS, 5))
    prev = None
    for t in range(HISTORY_STEPS):
        if not valid[t]:
            prev = None
            continue
        if prev is not None:
            out[t, :2] = rot @ (states[t, :2] - states[prev, :2])
        rel = wrap_angle(states[t, 2] - heading0)
        out[t, 2] = math.cos(rel)
        out[t, 3] = math.sin(rel)
        out[t, 4] = states[t, 3]
        prev = t
    return out


def scene_features(record: ScenarioRecord, layout: TokenLayout) -> SceneFeatures:
    cur, to_ego = _ego_frame(record)
    c, s = math.cos(cur[2]), math.sin(cur[2])
    rot = np.array([[c, s], [-s, c]])

    L = layout.total
    ranges = layout.ranges()
    anchors = np.zeros((L, 2))
    valid = np.zeros(L, dtype=bool)
    raw = {cat: np.zeros((hi - lo, RAW_DIMS[cat]))
           for cat, (lo, hi) in ranges.items()}

    valid[0] = True
    raw["ev"][0] = _history_features(
        record.ego_history, np.ones(HISTORY_STEPS, dtype=bool), rot, cur[2]).reshape(-1)

    for i, track in enumerate(record.agents[:layout.n_agents]):
        if not track.observed_now():
            continue
        slot = ranges["agent"][0] + i
        valid[slot] = True
        raw["agent"][i] = _history_features(
            track.history, track.valid_history, rot, cur[2]).reshape(-1)
        anchors[slot] = to_ego(track.history[-1, :2])[0]

    for i, poly in enumerate(record.map_polylines[:layout.n_map]):
        slot = ranges["map"][0] + i
        valid[slot] = True
        pts = to_ego(poly.points)
        anchor = pts.mean(axis=0)
        anchors[slot] = anchor
        raw["map"][i] = np.concatenate([(pts - anchor).reshape(-1),
                                        [1.0 if poly.is_boundary else 0.0]])

    for i, ob in enumerate(record.static_obstacles[:layout.n_obstacles]):
        slot = ranges["obstacle"][0] + i
        valid[slot] = True
        anchors[slot] = to_ego(np.array([ob.x, ob.y]))[0]
        rel = wrap_angle(ob.heading - cur[2])
        raw["obstacle"][i] = [math.cos(rel), math.sin(rel), ob.length, ob.width]

    return SceneFeatures(raw=raw, anchors=anchors, valid=valid,
                         ranges=ranges, layout=layout)


def encode_scene(features: SceneFeatures, embed_params: dict[str, dict[str, ad.Tensor]],
                 class_embed: ad.Tensor, fourier: FourierEmbedding) -> SceneTokens:
    """Embed raw features to the model dimension per Eq-style composition:

    token = mask * MLP(raw) + fourier(anchor) + category_embedding
    """
    pe = fourier(features.anchors)
    parts = []
    for ci, cat in enumerate(CATEGORIES):
        lo, hi = features.ranges[cat]
        p = embed_params[cat]
        h = ad.linear(features.raw[cat], p["w1"], p["b1"])
        h = ad.linear(ad.gelu(h), p["w2"], p["b2"])
        mask_col = features.valid[lo:hi].astype(float)[:, None]
        h = ad.mul(h, mask_col)
        h = ad.add(h, ad.slice_rows(class_embed, ci, ci + 1))
        parts.append(ad.add(h, pe[lo:hi]))
    x0 = ad.concat_rows(parts)
    return SceneTokens(x0=x0, valid=features.valid, anchors=features.anchors,
                       ranges=features.ranges, layout=features.layout)


@dataclass
class ImitationTargets:
    """Ground truth in the ego frame at current time."""

    ego: np.ndarray           # (80, 3) x, y, heading
    agent_pos: np.ndarray     # (n_agents, 80, 2)
    agent_valid: np.ndarray   # (n_agents, 80) bool
    label_index: int = field(default=0)


def imitation_targets(record: ScenarioRecord, layout: TokenLayout,
                      type_index: dict[str, int]) -> ImitationTargets:
    cur, to_ego = _ego_frame(record)
    ego = np.zeros((FUTURE_STEPS, 3))
    ego[:, :2] = to_ego(record.ego_future[:, :2])
    ego[:, 2] = wrap_angle(record.ego_future[:, 2] - cur[2])

    agent_pos = np.zeros((layout.n_agents, FUTURE_STEPS, 2))
    agent_valid = np.zeros((layout.n_agents, FUTURE_STEPS), dtype=bool)
    for i, track in enumerate(record.agents[:layout.n_agents]):
        if not track.observed_now():
            continue
        agent_valid[i] = track.valid_future
        if track.valid_future.any():
            agent_pos[i][track.valid_future] = to_ego(
                track.future[track.valid_future, :2])
    return ImitationTargets(ego=ego, agent_pos=agent_pos, agent_valid=agent_valid,
                            label_index=type_index[record.scenario_type])
