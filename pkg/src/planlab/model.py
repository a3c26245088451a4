"""The planner model: embedders, encoder stack, trajectory decoder, classifier.

Parameters live in one flat name -> Tensor dict so optimizers and
checkpoints can treat them uniformly; layer helpers view the same tensors
through small per-layer dicts.  The decoder is a single cross-attention
block: a learned ego query attends over the encoded tokens and a
perceptron head emits the 80-step ego trajectory, while a shared
perceptron head maps each kept agent token to its predicted 80-step
positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoder import EncoderConfig, EncoderOutput, forward_encoder
from .encoding import (CATEGORIES, RAW_DIMS, FourierEmbedding, SceneTokens,
                       TokenLayout, encode_scene, scene_features)
from .interpolation import ScenarioClassifier
from .rng import STREAM_MODEL_INIT, derived_rng
from .scene import FUTURE_STEPS, SCENARIO_TYPES, ScenarioRecord

PROFILE_KNOTS = 16               # control knots over the 8 s horizon
EGO_OUT_DIM = PROFILE_KNOTS * 2  # speed and yaw rate per knot
AGENT_OUT_DIM = FUTURE_STEPS * 2
_DT = 0.1


def _knot_interpolation_matrix() -> np.ndarray:
    """(80, knots) linear upsampling from control knots to 10 Hz steps."""
    m = np.zeros((FUTURE_STEPS, PROFILE_KNOTS))
    stride = FUTURE_STEPS / PROFILE_KNOTS
    for t in range(FUTURE_STEPS):
        pos = t / stride
        k = min(int(pos), PROFILE_KNOTS - 1)
        frac = pos - k
        if k + 1 < PROFILE_KNOTS:
            m[t, k] = 1.0 - frac
            m[t, k + 1] = frac
        else:
            m[t, k] = 1.0
    return m


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    layout: TokenLayout = field(default_factory=TokenLayout)
    scenario_types: tuple[str, ...] = SCENARIO_TYPES
    pos_freq_scale: float = 0.1
    seed: int = 0

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "layout": self.layout.to_dict(),
                "scenario_types": list(self.scenario_types),
                "pos_freq_scale": self.pos_freq_scale, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(encoder=EncoderConfig(**d["encoder"]),
                   layout=TokenLayout(**d["layout"]),
                   scenario_types=tuple(d["scenario_types"]),
                   pos_freq_scale=d["pos_freq_scale"], seed=d["seed"])


@dataclass
class DecoderOutput:
    ego_trajectory: ad.Tensor      # (80, 3) x, y, heading in the ego frame
    agent_predictions: ad.Tensor   # (n_kept_agents, 160) flattened (80, 2)
    kept_agent_indices: list[int]  # original token indices of the agent rows

    def ego_array(self) -> np.ndarray:
        return self.ego_trajectory.data

    def agent_array(self) -> np.ndarray:
        return self.agent_predictions.data.reshape(-1, FUTURE_STEPS, 2)


class PlannerModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        d = config.encoder.model_dim
        rng = derived_rng(config.seed, STREAM_MODEL_INIT)
        self.fourier = FourierEmbedding(d, rng, config.pos_freq_scale)
        self.params: dict[str, ad.Tensor] = {}

        def p(name, shape, scale=None):
            if scale is None:
                fan_in, fan_out = shape if len(shape) == 2 else (shape[0], shape[0])
                scale = np.sqrt(2.0 / (fan_in + fan_out))
            t = ad.parameter(rng.normal(0.0, scale, size=shape))
            self.params[name] = t
            return t

        def zeros(name, shape):
            t = ad.parameter(np.zeros(shape))
            self.params[name] = t
            return t

        def ones(name, shape):
            t = ad.parameter(np.ones(shape))
            self.params[name] = t
            return t

        for cat in CATEGORIES:
            p(f"embed.{cat}.w1", (RAW_DIMS[cat], d))
            zeros(f"embed.{cat}.b1", (d,))
            p(f"embed.{cat}.w2", (d, d))
            zeros(f"embed.{cat}.b2", (d,))
        p("class_embed", (len(CATEGORIES), d), scale=0.02)

        for i in range(config.encoder.layers):
            ones(f"enc.{i}.ln1_g", (d,))
            zeros(f"enc.{i}.ln1_b", (d,))
            for proj in ("wq", "wk", "wv", "wo"):
                p(f"enc.{i}.{proj}", (d, d))
            for bias in ("bq", "bk", "bv", "bo"):
                zeros(f"enc.{i}.{bias}", (d,))
            ones(f"enc.{i}.ln2_g", (d,))
            zeros(f"enc.{i}.ln2_b", (d,))
            p(f"enc.{i}.w1", (d, config.encoder.ffn_dim))
            zeros(f"enc.{i}.b1", (config.encoder.ffn_dim,))
            p(f"enc.{i}.w2", (config.encoder.ffn_dim, d))
            zeros(f"enc.{i}.b2", (d,))

        p("dec.query", (1, d), scale=0.2)
        for proj in ("wq", "wk", "wv", "wo"):
            p(f"dec.{proj}", (d, d))
        for bias in ("bq", "bk", "bv", "bo"):
            zeros(f"dec.{bias}", (d,))
        # final head layers start at zero: the fresh planner holds still,
        # which keeps early closed-loop behavior sane
        p("dec.ego.w1", (d, d))
        zeros("dec.ego.b1", (d,))
        zeros("dec.ego.w2", (d, EGO_OUT_DIM))
        zeros("dec.ego.b2", (EGO_OUT_DIM,))
        p("dec.agent.w1", (d, d))
        zeros("dec.agent.b1", (d,))
        zeros("dec.agent.w2", (d, AGENT_OUT_DIM))
        zeros("dec.agent.b2", (AGENT_OUT_DIM,))

        p("clf.w", (d, len(config.scenario_types)))
        zeros("clf.b", (len(config.scenario_types),))

        self._layer_params = [
            {k.split(".")[-1]: v for k, v in self.params.items()
             if k.startswith(f"enc.{i}.")}
            for i in range(config.encoder.layers)
        ]
        self.classifier = ScenarioClassifier(self.params["clf.w"], self.params["clf.b"])
        self.type_index = {t: i for i, t in enumerate(config.scenario_types)}

    # -- parameter groups ---------------------------------------------------

    def planner_parameters(self) -> dict[str, ad.Tensor]:
        return {k: v for k, v in self.params.items() if not k.startswith("clf.")}

    def classifier_parameters(self) -> dict[str, ad.Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("clf.")}

    # -- forward pieces -----------------------------------------------------

    def encode(self, record: ScenarioRecord) -> SceneTokens:
        feats = scene_features(record, self.config.layout)
        embed = {cat: {k: self.params[f"embed.{cat}.{k}"]
                       for k in ("w1", "b1", "w2", "b2")} for cat in CATEGORIES}
        return encode_scene(feats, embed, self.params["class_embed"], self.fourier)

    def run_encoder(self, tokens: SceneTokens, pruning: bool = True,
                    prune_ratio: float | None = None) -> EncoderOutput:
        cfg = self.config.encoder
        if prune_ratio is not None and prune_ratio != cfg.prune_ratio:
            cfg = EncoderConfig(**{**cfg.to_dict(), "prune_ratio": prune_ratio})
        return forward_encoder(tokens, self._layer_params, cfg, pruning_enabled=pruning)

    def decode(self, enc: EncoderOutput, features: ad.Tensor | None = None) -> DecoderOutput:
        """Decode trajectories from encoder output (optionally from substituted
        features of the same shape, e.g. after cross-scenario mixing)."""
        f = enc.features if features is None else features
        pr = self.params
        q = ad.linear(pr["dec.query"], pr["dec.wq"], pr["dec.bq"])
        k = ad.linear(f, pr["dec.wk"], pr["dec.bk"])
        v = ad.linear(f, pr["dec.wv"], pr["dec.bv"])
        heads = self.config.encoder.heads
        head_dim = q.shape[1] // heads
        outs = []
        for h in range(heads):
            lo, hi = h * head_dim, (h + 1) * head_dim
            scores = ad.scalar_mul(
                ad.matmul(ad.slice_cols(q, lo, hi), ad.transpose(ad.slice_cols(k, lo, hi))),
                1.0 / np.sqrt(head_dim))
            probs = ad.softmax_rows(scores)
            outs.append(ad.matmul(probs, ad.slice_cols(v, lo, hi)))
        ctx = ad.linear(ad.concat_cols(outs), pr["dec.wo"], pr["dec.bo"])
        h_ego = ad.add(pr["dec.query"], ctx)
        ego_flat = ad.linear(ad.gelu(ad.linear(h_ego, pr["dec.ego.w1"], pr["dec.ego.b1"])),
                             pr["dec.ego.w2"], pr["dec.ego.b2"])
        ego = self._integrate_motion_profile(ego_flat)

        a_lo, a_hi = enc.ranges["agent"]
        if a_hi > a_lo:
            rows = ad.slice_rows(f, a_lo, a_hi)
            agents = ad.linear(ad.gelu(ad.linear(rows, pr["dec.agent.w1"], pr["dec.agent.b1"])),
                               pr["dec.agent.w2"], pr["dec.agent.b2"])
        else:
            agents = ad.tensor(np.zeros((0, AGENT_OUT_DIM)))
        return DecoderOutput(ego_trajectory=ego, agent_predictions=agents,
                             kept_agent_indices=list(enc.kept_indices["agent"]))

    def _integrate_motion_profile(self, profile_flat: ad.Tensor) -> ad.Tensor:
        """Unfold per-step (speed, yaw rate) into an (80, 3) pose trajectory.

        The head emits controls; positions come from a differentiable
        unicycle unfolding (cumulative sums via a lower-triangular matmul),
        so planned trajectories are kinematically consistent and the
        rollout controller reads speeds straight off consecutive poses.
        """
        knots = ad.reshape(profile_flat, (PROFILE_KNOTS, 2))
        if not hasattr(self, "_knot_upsample"):
            self._knot_upsample = _knot_interpolation_matrix()
            self._cumsum_incl = np.tril(np.ones((FUTURE_STEPS, FUTURE_STEPS)))
            self._cumsum_excl = np.tril(np.ones((FUTURE_STEPS, FUTURE_STEPS)), k=-1)
        u = ad.matmul(self._knot_upsample, knots)
        v = ad.slice_cols(u, 0, 1)
        omega = ad.slice_cols(u, 1, 2)
        heading = ad.scalar_mul(ad.matmul(self._cumsum_incl, omega), _DT)
        heading_before = ad.scalar_mul(ad.matmul(self._cumsum_excl, omega), _DT)
        dx = ad.mul(v, ad.cos(heading_before))
        dy = ad.mul(v, ad.sin(heading_before))
        x = ad.scalar_mul(ad.matmul(self._cumsum_incl, dx), _DT)
        y = ad.scalar_mul(ad.matmul(self._cumsum_incl, dy), _DT)
        return ad.concat_cols([x, y, heading])

    def plan(self, record: ScenarioRecord, pruning: bool = True) -> DecoderOutput:
        """Inference convenience: encode, encode-prune, decode (tape-free
        when called outside a tape)."""
        tokens = self.encode(record)
        enc = self.run_encoder(tokens, pruning=pruning)
        return self.decode(enc)

    # -- state --------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters in state dict: {sorted(missing)[:3]}...")
        for k, v in self.params.items():
            v.data = np.array(state[k], dtype=np.float64).reshape(v.data.shape)
