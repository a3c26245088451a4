import numpy as np
import pytest

from planlab import autodiff as ad
from planlab.encoder import EncoderConfig
from planlab.encoding import SceneTokens, TokenLayout
from planlab.model import ModelConfig, PlannerModel


def random_tokens(rng, layout: TokenLayout, dim: int,
                  n_agents=None, n_map=None, n_obstacles=None) -> SceneTokens:
    """Synthetic token matrix with a random valid pattern per category."""
    L = layout.total
    valid = np.zeros(L, dtype=bool)
    valid[0] = True
    ranges = layout.ranges()
    counts = {"agent": n_agents, "map": n_map, "obstacle": n_obstacles}
    for cat, (lo, hi) in ranges.items():
        if cat == "ev":
            continue
        n = counts[cat]
        if n is None:
            n = int(rng.integers(0, hi - lo + 1))
        valid[lo:lo + n] = True
    x0 = rng.normal(size=(L, dim))
    x0[~valid] = 0.0
    return SceneTokens(x0=ad.tensor(x0, requires_grad=True), valid=valid,
                       anchors=np.zeros((L, 2)), ranges=ranges, layout=layout)


@pytest.fixture
def tiny_model():
    cfg = ModelConfig(
        encoder=EncoderConfig(layers=2, heads=2, model_dim=16, ffn_dim=32),
        layout=TokenLayout(n_agents=5, n_map=4, n_obstacles=2),
        seed=0,
    )
    return PlannerModel(cfg)
