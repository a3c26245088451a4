"""Multi-head self-attention encoder with ego-attention-guided token pruning.

Every ``prune_every`` layers the ego token's head-averaged attention row is
used to rank the other tokens; the top fraction per category survives.
Pruning acts at two levels: surviving tokens become the only attendable
keys for later layers (attention-level), and after the final layer only
surviving rows are gathered into the output feature matrix (token-level).
The ego token is never pruned.  Ranking reads detached attention values,
so no gradient flows through the selection itself; gradient reaches the
kept tokens through the gathered features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .encoding import SceneTokens

_CEIL_EPS = 1e-9  # guards float artifacts like 0.9 * 10 -> 9.000000000000002

PRUNABLE_CATEGORIES = ("agent", "map", "obstacle")


@dataclass
class EncoderConfig:
    layers: int = 4
    heads: int = 4
    model_dim: int = 64
    prune_ratio: float = 0.9
    prune_every: int = 2
    ffn_dim: int | None = None

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if not (0.0 < self.prune_ratio <= 1.0):
            raise ValueError("prune_ratio must be in (0, 1]")
        if self.prune_every < 1:
            raise ValueError("prune_every must be >= 1")
        if self.ffn_dim is None:
            self.ffn_dim = 4 * self.model_dim

    def to_dict(self) -> dict:
        return {"layers": self.layers, "heads": self.heads,
                "model_dim": self.model_dim, "prune_ratio": self.prune_ratio,
                "prune_every": self.prune_every, "ffn_dim": self.ffn_dim}


@dataclass
class EncoderOutput:
    features: ad.Tensor                      # (L', D), ego row first
    kept_indices: dict[str, list[int]]       # original token indices per category
    ego_attention: list[np.ndarray]          # per layer, length-L head average
    ranges: dict[str, tuple[int, int]]       # ranges into the pruned matrix
    prune_events: list[dict[str, list[int]]] = field(default_factory=list)

    @property
    def order(self) -> list[int]:
        out = [0]
        for cat in PRUNABLE_CATEGORIES:
            out.extend(self.kept_indices[cat])
        return out


def multi_head_attention(q: ad.Tensor, k: ad.Tensor, v: ad.Tensor, heads: int,
                         key_mask: np.ndarray) -> tuple[ad.Tensor, np.ndarray]:
    """Masked scaled dot-product attention; also returns the head-averaged
    probability row of query 0 (the ego token), taken after masking."""
    dim = q.shape[1]
    head_dim = dim // heads
    scale = 1.0 / math.sqrt(head_dim)
    outs = []
    ego_row = np.zeros(k.shape[0])
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qs = ad.slice_cols(q, lo, hi)
        ks = ad.slice_cols(k, lo, hi)
        vs = ad.slice_cols(v, lo, hi)
        scores = ad.scalar_mul(ad.matmul(qs, ad.transpose(ks)), scale)
        probs = ad.masked_softmax_rows(scores, key_mask)
        ego_row = ego_row + probs.data[0]
        outs.append(ad.matmul(probs, vs))
    return ad.concat_cols(outs), ego_row / heads


def self_attention_layer(x: ad.Tensor, valid_mask: np.ndarray,
                         attend_mask: np.ndarray, params: dict[str, ad.Tensor],
                         heads: int) -> tuple[ad.Tensor, np.ndarray]:
    """Pre-norm transformer layer; returns (output, ego attention row)."""
    if not attend_mask.any():
        raise ValueError("no attendable tokens")
    if (attend_mask & ~valid_mask).any():
        raise ValueError("attend_mask must be a subset of valid_mask")
    h = ad.layer_norm(x, params["ln1_g"], params["ln1_b"])
    q = ad.linear(h, params["wq"], params["bq"])
    k = ad.linear(h, params["wk"], params["bk"])
    v = ad.linear(h, params["wv"], params["bv"])
    attn, ego_row = multi_head_attention(q, k, v, heads, attend_mask)
    y = ad.add(x, ad.linear(attn, params["wo"], params["bo"]))
    h2 = ad.layer_norm(y, params["ln2_g"], params["ln2_b"])
    ffn = ad.linear(ad.gelu(ad.linear(h2, params["w1"], params["b1"])),
                    params["w2"], params["b2"])
    return ad.add(y, ffn), ego_row


def rank_scores(ego_attention: np.ndarray, candidate_mask: np.ndarray) -> np.ndarray:
    """Selection scores for tokens 1..L-1: the ego attention row with its
    first (ego) entry dropped; non-candidates score -inf."""
    scores = ego_attention[1:].astype(float).copy()
    scores[~candidate_mask[1:]] = -np.inf
    return scores


def keep_count(prune_ratio: float, n_valid: int) -> int:
    if n_valid <= 0:
        return 0
    return max(1, math.ceil(prune_ratio * n_valid - _CEIL_EPS))


def select_tokens(scores: np.ndarray, ranges: dict[str, tuple[int, int]],
                  candidate_mask: np.ndarray, prune_ratio: float) -> dict[str, list[int]]:
    """Per-category top-k by score with ties broken toward lower index;
    returned index lists are sorted ascending (stable original order).

    ``scores[i]`` scores token ``i + 1``; the ego token is not a candidate.
    """
    kept: dict[str, list[int]] = {}
    for cat in PRUNABLE_CATEGORIES:
        lo, hi = ranges[cat]
        candidates = [i for i in range(lo, hi) if candidate_mask[i]]
        k = keep_count(prune_ratio, len(candidates))
        ordered = sorted(candidates, key=lambda i: (-scores[i - 1], i))
        kept[cat] = sorted(ordered[:k])
    return kept


def forward_encoder(tokens: SceneTokens, layer_params: list[dict[str, ad.Tensor]],
                    cfg: EncoderConfig, pruning_enabled: bool = True) -> EncoderOutput:
    """Run the encoder; with pruning disabled the output is the plain
    transformer on all valid tokens (identical to prune_ratio = 1)."""
    valid = tokens.valid
    attend = valid.copy()
    kept = {cat: [i for i in range(*tokens.ranges[cat]) if valid[i]]
            for cat in PRUNABLE_CATEGORIES}
    x = tokens.x0
    ego_layers: list[np.ndarray] = []
    events: list[dict[str, list[int]]] = []

    for li in range(cfg.layers):
        x, ego_row = self_attention_layer(x, valid, attend, layer_params[li], cfg.heads)
        ego_layers.append(ego_row)
        if pruning_enabled and (li + 1) % cfg.prune_every == 0:
            scores = rank_scores(ego_row, attend)
            kept = select_tokens(scores, tokens.ranges, attend, cfg.prune_ratio)
            attend = np.zeros_like(valid)
            attend[0] = True
            for ids in kept.values():
                attend[ids] = True
            events.append({c: list(v) for c, v in kept.items()})

    order = [0]
    ranges: dict[str, tuple[int, int]] = {"ev": (0, 1)}
    pos = 1
    for cat in PRUNABLE_CATEGORIES:
        ranges[cat] = (pos, pos + len(kept[cat]))
        order.extend(kept[cat])
        pos += len(kept[cat])
    features = ad.gather_rows(x, order)
    return EncoderOutput(features=features, kept_indices=kept,
                         ego_attention=ego_layers, ranges=ranges,
                         prune_events=events)
