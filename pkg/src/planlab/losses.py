"""Imitation losses and agent-target bookkeeping.

The total loss is a weighted sum of four terms: the ego-trajectory
smooth-L1 term, the surrounding-agent prediction smooth-L1 term, and two
pluggable slots (contrastive and auxiliary) that default to weight zero
with no implementation here; callers may attach their own callables.
Token pruning reorders agent tokens, so ground-truth futures are gathered
into kept order and pruned agents drop out of the agent loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .encoding import ImitationTargets
from .model import DecoderOutput
from .scene import FUTURE_STEPS


@dataclass
class LossWeights:
    w_ego: float = 1.0
    w_agents: float = 0.5
    w_cll: float = 0.0
    w_aux: float = 0.0
    # extension slots; each receives (decoded, targets) and returns a scalar tensor
    cll_term: Callable | None = None
    aux_term: Callable | None = None


@dataclass
class LossBundle:
    total: ad.Tensor
    ego: ad.Tensor
    agents: ad.Tensor


def reorder_agent_targets(kept_token_indices: list[int], agent_range_start: int,
                          targets: ImitationTargets) -> tuple[np.ndarray, np.ndarray]:
    """Gather ground-truth agent futures into kept-token order.

    Returns (n_kept, 160) flattened positions and a matching 0/1 weight
    mask; agents pruned by the encoder are simply absent, and invalid
    future steps carry zero weight.
    """
    n_agents = targets.agent_pos.shape[0]
    slots = []
    for tok in kept_token_indices:
        slot = tok - agent_range_start
        if not 0 <= slot < n_agents:
            raise IndexError(f"agent token {tok} out of range")
        slots.append(slot)
    gathered = targets.agent_pos[slots].reshape(len(slots), FUTURE_STEPS * 2)
    weights = np.repeat(targets.agent_valid[slots].astype(float), 2, axis=1)
    return gathered, weights


def weighted_mean(values: ad.Tensor, weights: np.ndarray) -> ad.Tensor:
    total = float(weights.sum())
    if total == 0.0:
        return ad.tensor(0.0)
    return ad.scalar_mul(ad.reduce_sum(ad.mul(values, weights)), 1.0 / total)


def compute_loss(decoded: DecoderOutput, targets: ImitationTargets,
                 agent_range_start: int, weights: LossWeights) -> LossBundle:
    l_ego = ad.reduce_mean(ad.smooth_l1(decoded.ego_trajectory, targets.ego))

    gathered, mask = reorder_agent_targets(decoded.kept_agent_indices,
                                           agent_range_start, targets)
    if gathered.shape[0] and mask.sum() > 0:
        per_elem = ad.smooth_l1(decoded.agent_predictions, gathered)
        l_agents = weighted_mean(per_elem, mask)
    else:
        l_agents = ad.tensor(0.0)

    total = ad.add(ad.scalar_mul(l_ego, weights.w_ego),
                   ad.scalar_mul(l_agents, weights.w_agents))
    if weights.w_cll and weights.cll_term is not None:
        total = ad.add(total, ad.scalar_mul(weights.cll_term(decoded, targets), weights.w_cll))
    if weights.w_aux and weights.aux_term is not None:
        total = ad.add(total, ad.scalar_mul(weights.aux_term(decoded, targets), weights.w_aux))
    return LossBundle(total=total, ego=l_ego, agents=l_agents)
