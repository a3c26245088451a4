import math

import numpy as np
import pytest

from planlab import autodiff as ad
from planlab.encoder import (EncoderConfig, EncoderOutput, forward_encoder,
                             keep_count, multi_head_attention, rank_scores,
                             select_tokens, self_attention_layer)
from planlab.encoding import TokenLayout
from planlab.model import ModelConfig, PlannerModel
from tests.conftest import random_tokens


def make_model(layers=4, heads=4, dim=32, prune_ratio=0.9, prune_every=2,
               layout=TokenLayout(), seed=0):
    return PlannerModel(ModelConfig(
        encoder=EncoderConfig(layers=layers, heads=heads, model_dim=dim,
                              prune_ratio=prune_ratio, prune_every=prune_every,
                              ffn_dim=2 * dim),
        layout=layout, seed=seed))


def test_identical_tokens_give_uniform_ego_attention():
    model = make_model(layers=1)
    layout = model.config.layout
    L = layout.total
    x = np.tile(np.linspace(-1, 1, 32), (L, 1))
    valid = np.ones(L, dtype=bool)
    _, ego = self_attention_layer(ad.tensor(x), valid, valid,
                                  model._layer_params[0], heads=4)
    np.testing.assert_allclose(ego, np.full(L, 1.0 / L), atol=1e-12)


def test_masked_keys_get_zero_attention():
    model = make_model(layers=1)
    layout = model.config.layout
    L = layout.total
    rng = np.random.default_rng(0)
    x = rng.normal(size=(L, 32))
    valid = np.ones(L, dtype=bool)
    attend = np.zeros(L, dtype=bool)
    attend[[0, 3, 7, 11]] = True
    _, ego = self_attention_layer(ad.tensor(x), valid, attend,
                                  model._layer_params[0], heads=4)
    assert np.all(ego[~attend] == 0.0)
    assert ego.sum() == pytest.approx(1.0, abs=1e-9)


def test_all_keys_masked_raises():
    model = make_model(layers=1)
    L = model.config.layout.total
    x = ad.tensor(np.zeros((L, 32)))
    with pytest.raises(ValueError, match="no attendable tokens"):
        self_attention_layer(x, np.ones(L, dtype=bool), np.zeros(L, dtype=bool),
                             model._layer_params[0], heads=4)


def test_ego_attention_is_head_average():
    # two heads with hand-set q, k: head 1 concentrates on token 1,
    # head 2 on token 2; the reported row must be the mean of the two
    L, dim = 4, 4
    q = np.zeros((L, dim))
    k = np.zeros((L, dim))
    q[0, 0] = 30.0
    k[1, 0] = 1.0   # head 1 (cols 0:2): ego query matches token 1
    q[0, 2] = 30.0
    k[2, 2] = 1.0   # head 2 (cols 2:4): ego query matches token 2
    v = np.eye(L)
    mask = np.ones(L, dtype=bool)
    _, ego = multi_head_attention(ad.tensor(q), ad.tensor(k), ad.tensor(v), 2, mask)

    h1 = np.exp(q[0, :2] @ k.T[:2] / math.sqrt(2))
    h1 /= h1.sum()
    h2 = np.exp(q[0, 2:] @ k.T[2:] / math.sqrt(2))
    h2 /= h2.sum()
    np.testing.assert_allclose(ego, (h1 + h2) / 2, atol=1e-12)
    assert ego[1] > 0.45 and ego[2] > 0.45


def test_rank_scores_drops_ego_and_invalid():
    a = np.array([0.4, 0.3, 0.2, 0.1])
    mask = np.array([True, True, False, True])
    scores = rank_scores(a, mask)
    assert scores[0] == 0.3 and scores[2] == 0.1
    assert scores[1] == -np.inf


def test_select_tokens_top_half():
    ranges = {"ev": (0, 1), "agent": (1, 5), "map": (5, 5), "obstacle": (5, 5)}
    mask = np.ones(5, dtype=bool)
    scores = np.array([0.4, 0.3, 0.2, 0.1])
    kept = select_tokens(scores, ranges, mask, 0.5)
    assert kept["agent"] == [1, 2]


def test_keep_count_paper_ratio():
    assert keep_count(0.9, 10) == 9
    assert keep_count(0.9, 16) == 15
    assert keep_count(0.9, 1) == 1
    assert keep_count(1.0, 7) == 7
    assert keep_count(0.9, 0) == 0


def test_select_matches_bruteforce_sort_oracle():
    rng = np.random.default_rng(11)
    layout = TokenLayout(n_agents=6, n_map=5, n_obstacles=3)
    ranges = layout.ranges()
    for _ in range(50):
        mask = np.ones(layout.total, dtype=bool)
        mask[1:] = rng.random(layout.total - 1) < 0.8
        scores = rng.random(layout.total - 1)
        scores[~mask[1:]] = -np.inf
        ratio = float(rng.uniform(0.05, 1.0))
        kept = select_tokens(scores, ranges, mask, ratio)
        for cat in ("agent", "map", "obstacle"):
            lo, hi = ranges[cat]
            cands = [i for i in range(lo, hi) if mask[i]]
            k = max(1, math.ceil(ratio * len(cands) - 1e-9)) if cands else 0
            oracle = sorted(sorted(cands, key=lambda i: (-scores[i - 1], i))[:k])
            assert kept[cat] == oracle


def test_tie_break_prefers_lower_index():
    ranges = {"ev": (0, 1), "agent": (1, 4), "map": (4, 4), "obstacle": (4, 4)}
    mask = np.ones(4, dtype=bool)
    kept = select_tokens(np.array([0.5, 0.5, 0.5]), ranges, mask, 0.34)
    assert kept["agent"] == [1, 2]  # k = ceil(0.34*3) = 2, ties to lower index


def test_two_prune_events_keep_counts():
    model = make_model()
    rng = np.random.default_rng(4)
    tokens = random_tokens(rng, model.config.layout, 32,
                           n_agents=16, n_map=24, n_obstacles=8)
    out = model.run_encoder(tokens, pruning=True)
    assert len(out.prune_events) == 2
    first, second = out.prune_events
    assert [len(first[c]) for c in ("agent", "map", "obstacle")] == [15, 22, 8]
    assert [len(second[c]) for c in ("agent", "map", "obstacle")] == [14, 20, 8]
    assert out.features.shape == (1 + 14 + 20 + 8, 32)
    assert out.order[0] == 0


def test_kept_sets_nested_across_events():
    model = make_model()
    rng = np.random.default_rng(5)
    for _ in range(10):
        tokens = random_tokens(rng, model.config.layout, 32)
        out = model.run_encoder(tokens, pruning=True)
        for earlier, later in zip(out.prune_events, out.prune_events[1:]):
            for cat in earlier:
                assert set(later[cat]) <= set(earlier[cat])


def test_kept_indices_strictly_increasing():
    model = make_model()
    rng = np.random.default_rng(6)
    tokens = random_tokens(rng, model.config.layout, 32)
    out = model.run_encoder(tokens, pruning=True)
    for cat, ids in out.kept_indices.items():
        assert ids == sorted(ids)
        lo, hi = tokens.ranges[cat]
        assert all(lo <= i < hi for i in ids)


def test_prune_ratio_one_is_bitwise_unpruned():
    model = make_model(prune_ratio=0.9)
    rng = np.random.default_rng(7)
    tokens = random_tokens(rng, model.config.layout, 32)
    full = model.run_encoder(tokens, pruning=True, prune_ratio=1.0)
    off = model.run_encoder(tokens, pruning=False)
    assert np.array_equal(full.features.data, off.features.data)
    assert full.kept_indices == off.kept_indices


def test_attention_level_pruning_blocks_dropped_tokens():
    model = make_model()
    rng = np.random.default_rng(8)
    tokens = random_tokens(rng, model.config.layout, 32,
                           n_agents=12, n_map=18, n_obstacles=6)
    out = model.run_encoder(tokens, pruning=True)
    kept_after_first = {0}
    for ids in out.prune_events[0].values():
        kept_after_first.update(ids)
    third_layer_row = out.ego_attention[2]
    dropped = [i for i in range(tokens.layout.total) if i not in kept_after_first]
    assert np.all(third_layer_row[dropped] == 0.0)
    attendable = sorted(kept_after_first)
    assert third_layer_row[attendable].sum() == pytest.approx(1.0, abs=1e-9)


def test_gathered_submatrix_equivalence():
    """Running the layers after the first prune event on the gathered
    submatrix must equal the full-width masked run on the kept rows."""
    model = make_model()
    cfg = model.config.encoder
    rng = np.random.default_rng(9)
    tokens = random_tokens(rng, model.config.layout, 32,
                           n_agents=10, n_map=15, n_obstacles=5)
    out = model.run_encoder(tokens, pruning=True)

    # replay the first two layers full width
    x = tokens.x0
    attend = tokens.valid.copy()
    for li in range(cfg.prune_every):
        x, _ = self_attention_layer(x, tokens.valid, attend,
                                    model._layer_params[li], cfg.heads)
    order = [0]
    for cat in ("agent", "map", "obstacle"):
        order.extend(out.prune_events[0][cat])
    sub = ad.tensor(x.data[order])
    sub_valid = np.ones(len(order), dtype=bool)
    sub_attend = sub_valid.copy()
    kept_positions = {tok: pos for pos, tok in enumerate(order)}
    for li in range(cfg.prune_every, cfg.layers):
        sub, ego_row = self_attention_layer(sub, sub_valid, sub_attend,
                                            model._layer_params[li], cfg.heads)
        if (li + 1) % cfg.prune_every == 0:
            ranges_sub = {}
            pos = 1
            for cat in ("agent", "map", "obstacle"):
                n = len(out.prune_events[0][cat])
                ranges_sub[cat] = (pos, pos + n)
                pos += n
            ranges_sub["ev"] = (0, 1)
            scores = rank_scores(ego_row, sub_attend)
            kept_sub = select_tokens(scores, ranges_sub, sub_attend, cfg.prune_ratio)
            sub_attend = np.zeros(len(order), dtype=bool)
            sub_attend[0] = True
            for ids in kept_sub.values():
                sub_attend[ids] = True
    final_positions = [kept_positions[tok] for tok in out.order]
    np.testing.assert_allclose(out.features.data, sub.data[final_positions], atol=1e-9)


def test_permuting_same_category_tokens_permutes_kept_set():
    model = make_model()
    rng = np.random.default_rng(10)
    tokens = random_tokens(rng, model.config.layout, 32,
                           n_agents=8, n_map=12, n_obstacles=4)
    out_a = model.run_encoder(tokens, pruning=True)

    # swap agent token rows 2 and 5 (both valid)
    perm = np.arange(tokens.layout.total)
    i, j = 2, 5
    perm[[i, j]] = perm[[j, i]]
    x_perm = tokens.x0.data[perm]
    swapped = random_tokens(rng, model.config.layout, 32, n_agents=8, n_map=12, n_obstacles=4)
    swapped.x0 = type(tokens.x0)(x_perm, requires_grad=True)
    swapped.valid = tokens.valid[perm]
    out_b = model.run_encoder(swapped, pruning=True)

    def original_ids(kept):
        return {cat: {int(perm[t]) for t in ids} for cat, ids in kept.items()}

    assert {c: set(v) for c, v in out_a.kept_indices.items()} == original_ids(out_b.kept_indices)


def test_attention_rows_sum_to_one_over_attendable():
    model = make_model()
    rng = np.random.default_rng(12)
    tokens = random_tokens(rng, model.config.layout, 32)
    out = model.run_encoder(tokens, pruning=True)
    for row in out.ego_attention:
        assert row.sum() == pytest.approx(1.0, abs=1e-9)
