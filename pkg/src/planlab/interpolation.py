"""Cross-scenario feature mixing for long-tail training sets.

A linear scenario classifier probes the encoded features.  The gradient of
its cross-entropy loss, taken on detached feature copies, scores each
embedding dimension by mean(feature * gradient); a quantile threshold
splits dimensions into scenario-relevant (high contribution) and
scenario-generic (the rest).  Samples of dominant scenario types then get
the relevant part of their features blended with a donor sample of a
different type, with a mixing ratio drawn uniformly per recipient.  The
probe never feeds back into the encoder: it reads detached copies, and the
classifier trains with its own optimizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad

_CEIL_EPS = 1e-9


@dataclass
class PiOSchedule:
    """Cyclic quantile-ratio schedule: starts high, steps down, resets."""

    start: float = 0.9
    step: float = 0.1
    floor: float = 0.5
    period: int = 100

    def value(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be >= 0")
        levels = round((self.start - self.floor) / self.step) + 1
        return self.start - self.step * ((step // self.period) % levels)


def pi_o_value(step: int) -> float:
    """Default schedule: 0.9 down to 0.5 in 0.1 steps every 100 steps, then reset."""
    return PiOSchedule().value(step)


@dataclass
class FeatureDecomposition:
    contributions: np.ndarray   # (D,)
    tau: float
    relevant_mask: np.ndarray   # (D,) bool, strictly above tau


class ScenarioClassifier:
    """Masked mean-pool over tokens, then a linear map to type logits."""

    def __init__(self, weight: ad.Tensor, bias: ad.Tensor):
        self.weight = weight
        self.bias = bias

    @property
    def n_types(self) -> int:
        return self.weight.shape[1]

    def logits(self, features, valid: np.ndarray | None = None,
               weight=None, bias=None) -> ad.Tensor:
        """(1, n_types) logits for one sample's (L', D) feature matrix."""
        n_rows = features.shape[0] if hasattr(features, "shape") else len(features)
        if valid is None:
            valid = np.ones(n_rows, dtype=bool)
        n = int(valid.sum())
        if n == 0:
            raise ValueError("classifier needs at least one valid token")
        pool = (valid.astype(float) / n)[None, :]
        pooled = ad.matmul(pool, features)
        return ad.linear(pooled, self.weight if weight is None else weight,
                         self.bias if bias is None else bias)

    def logits_batch(self, features_list: Sequence, detached: bool = False) -> ad.Tensor:
        w = self.weight.detach() if detached else self.weight
        b = self.bias.detach() if detached else self.bias
        rows = [self.logits(f, weight=w, bias=b) for f in features_list]
        return ad.concat_rows(rows)


def contribution(features, gradients) -> np.ndarray:
    """Per-dimension mean of feature * loss-gradient over batch and tokens.

    Accepts stacked (B, L', D) arrays or a sequence of per-sample (L'_i, D)
    pairs (token counts may differ after pruning).  Signed values: no
    absolute value is taken.
    """
    if isinstance(features, np.ndarray):
        f, g = features, np.asarray(gradients)
        if f.shape != g.shape:
            raise ValueError(f"contribution: shapes {f.shape} and {g.shape} differ")
        return (f * g).reshape(-1, f.shape[-1]).mean(axis=0)
    total = None
    rows = 0
    for f, g in zip(features, gradients, strict=True):
        f = np.asarray(f)
        g = np.asarray(g)
        if f.shape != g.shape:
            raise ValueError(f"contribution: shapes {f.shape} and {g.shape} differ")
        part = (f * g).sum(axis=0)
        total = part if total is None else total + part
        rows += f.shape[0]
    if total is None or rows == 0:
        raise ValueError("contribution: empty batch")
    return total / rows


def quantile_threshold(contributions: np.ndarray, pi_o: float) -> float:
    """Nearest-rank quantile: sort ascending, take element ceil(pi_o * D) - 1."""
    if not (0.0 < pi_o < 1.0):
        raise ValueError("pi_o must be in (0, 1)")
    c = np.sort(np.asarray(contributions, dtype=float))
    idx = max(0, math.ceil(pi_o * c.size - _CEIL_EPS) - 1)
    return float(c[idx])


def decompose_contributions(contributions: np.ndarray, pi_o: float) -> FeatureDecomposition:
    tau = quantile_threshold(contributions, pi_o)
    return FeatureDecomposition(contributions=np.asarray(contributions, dtype=float),
                                tau=tau, relevant_mask=contributions > tau)


def decompose(features, contributions: np.ndarray, tau: float):
    """Split features along the embedding dimension into (relevant, generic).

    relevant = 1(C_i > tau) * F and generic = 1(C_i <= tau) * F; the two
    parts sum back to F exactly.
    """
    mask = (np.asarray(contributions) > tau).astype(float)
    return ad.mul(features, mask), ad.mul(features, 1.0 - mask)


def interpolate(generic, relevant, donor_relevant, pi_r: float):
    """generic + (1 - pi_r) * relevant + pi_r * donor_relevant."""
    if relevant.shape != donor_relevant.shape:
        raise ValueError(
            f"interpolate: shapes {relevant.shape} and {donor_relevant.shape} differ")
    mixed = ad.add(ad.scalar_mul(relevant, 1.0 - pi_r),
                   ad.scalar_mul(donor_relevant, pi_r))
    return ad.add(generic, mixed)


@dataclass(frozen=True)
class MixAssignment:
    donor: int | None
    ratio: float


def plan_batch_interpolation(labels: Sequence[str], dominant_set: set[str],
                             rng: np.random.Generator) -> list[MixAssignment]:
    """Donor and mixing ratio per sample.

    Only samples with a dominant label are mixed; the donor is uniform
    among batch samples with a different label, and the ratio is U(0, 1).
    A dominant sample with no differently-labeled partner is left alone.
    """
    plans = []
    for i, label in enumerate(labels):
        if label not in dominant_set:
            plans.append(MixAssignment(donor=None, ratio=0.0))
            continue
        donors = [j for j, other in enumerate(labels) if other != label]
        if not donors:
            plans.append(MixAssignment(donor=None, ratio=0.0))
            continue
        donor = donors[int(rng.integers(len(donors)))]
        plans.append(MixAssignment(donor=donor, ratio=float(rng.uniform())))
    return plans
