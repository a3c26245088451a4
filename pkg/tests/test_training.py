import numpy as np
import pytest

from planlab import autodiff as ad
from planlab.encoder import EncoderConfig
from planlab.encoding import TokenLayout, imitation_targets
from planlab.losses import LossWeights, compute_loss, reorder_agent_targets
from planlab.model import ModelConfig, PlannerModel
from planlab.scene import FUTURE_STEPS, GenConfig, generate_dataset
from planlab.training import (AdamW, LogRow, Trainer, TrainConfig, TrainingLog,
                              lr_at)

SMALL_MODEL = ModelConfig(
    encoder=EncoderConfig(layers=2, heads=2, model_dim=32, ffn_dim=64),
    seed=0)


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(GenConfig(n_records=48, seed=2))


def small_trainer(dataset, **overrides):
    records, manifest = dataset
    cfg = TrainConfig(epochs=4, warmup_epochs=1, batch_size=12, seed=0, **overrides)
    return Trainer(records, manifest, SMALL_MODEL, cfg)


# -- schedule ----------------------------------------------------------------

def test_lr_schedule_probe_points():
    peak, warm, total = 1e-3, 30, 130
    assert lr_at(0, warm, total, peak) == 0.0
    assert lr_at(15, warm, total, peak) == pytest.approx(peak / 2)
    assert lr_at(30, warm, total, peak) == pytest.approx(peak)
    assert lr_at(80, warm, total, peak) == pytest.approx(
        peak * 0.5 * (1 + np.cos(np.pi * 0.5)))
    assert lr_at(130, warm, total, peak) == pytest.approx(0.0, abs=1e-12)


# -- decoder ------------------------------------------------------------------

def test_decoder_all_zero_parameters_give_zero_trajectories(tiny_model):
    for p in tiny_model.params.values():
        p.data = np.zeros_like(p.data)
    from tests.conftest import random_tokens
    tokens = random_tokens(np.random.default_rng(0), tiny_model.config.layout, 16,
                           n_agents=3, n_map=2, n_obstacles=1)
    enc = tiny_model.run_encoder(tokens, pruning=False)
    out = tiny_model.decode(enc)
    assert np.array_equal(out.ego_array(), np.zeros((FUTURE_STEPS, 3)))
    assert np.array_equal(out.agent_predictions.data,
                          np.zeros_like(out.agent_predictions.data))


def test_decoder_shared_head_on_duplicate_agent_tokens(tiny_model):
    from planlab.encoder import EncoderOutput
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(4, 16))
    feats[2] = feats[1]  # duplicate agent rows
    enc = EncoderOutput(features=ad.tensor(feats),
                        kept_indices={"agent": [1, 2], "map": [6], "obstacle": []},
                        ego_attention=[],
                        ranges={"ev": (0, 1), "agent": (1, 3), "map": (3, 4),
                                "obstacle": (4, 4)})
    out = tiny_model.decode(enc)
    np.testing.assert_array_equal(out.agent_predictions.data[0],
                                  out.agent_predictions.data[1])


def test_decoder_gradient_matches_finite_differences(tiny_model, dataset):
    records, _ = dataset
    targets = imitation_targets(records[0], tiny_model.config.layout,
                                tiny_model.type_index)

    def objective(_):
        tokens = tiny_model.encode(records[0])
        enc = tiny_model.run_encoder(tokens, pruning=True)
        decoded = tiny_model.decode(enc)
        return compute_loss(decoded, targets, 1, LossWeights()).total

    for name in ("dec.ego.w2", "dec.wq", "dec.query"):
        err = ad.check_gradients(objective, tiny_model.params[name],
                                 max_coords=60, rng=np.random.default_rng(0))
        assert err < 1e-3, f"{name}: {err}"


# -- losses -------------------------------------------------------------------

def _decoded_stub(model, ego, agents, kept):
    from planlab.model import DecoderOutput
    as_tensor = lambda x: x if isinstance(x, ad.Tensor) else ad.tensor(x)
    return DecoderOutput(ego_trajectory=as_tensor(ego),
                         agent_predictions=as_tensor(agents),
                         kept_agent_indices=kept)


def test_perfect_prediction_zero_loss(tiny_model, dataset):
    records, _ = dataset
    rec = next(r for r in records if len(r.agents) >= 2)
    t = imitation_targets(rec, tiny_model.config.layout, tiny_model.type_index)
    kept = [1 + i for i in range(min(len(rec.agents), 5))
            if t.agent_valid[i].any()]
    agents = t.agent_pos[[k - 1 for k in kept]].reshape(len(kept), -1)
    decoded = _decoded_stub(tiny_model, t.ego, agents, kept)
    out = compute_loss(decoded, t, 1, LossWeights())
    assert out.ego.item() == 0.0
    assert out.agents.item() == 0.0


def test_unit_offset_gives_half_loss(tiny_model, dataset):
    records, _ = dataset
    t = imitation_targets(records[0], tiny_model.config.layout, tiny_model.type_index)
    decoded = _decoded_stub(tiny_model, t.ego + 1.0, np.zeros((0, 160)), [])
    out = compute_loss(decoded, t, 1, LossWeights())
    assert out.ego.item() == pytest.approx(0.5)


def test_zero_agent_weight_blocks_agent_gradient(tiny_model, dataset):
    records, _ = dataset
    rec = next(r for r in records if r.agents and r.agents[0].valid_future.any())
    t = imitation_targets(rec, tiny_model.config.layout, tiny_model.type_index)
    pred = ad.parameter(np.random.default_rng(0).normal(size=(1, 160)))
    with ad.Tape() as tape:
        decoded = _decoded_stub(tiny_model, t.ego, pred, [1])
        out = compute_loss(decoded, t, 1, LossWeights(w_agents=0.0))
        tape.backward(out.total)
    g = tape.grad(pred)
    assert g is None or np.all(g == 0.0)


def test_reorder_matches_bruteforce_matching(tiny_model, dataset):
    records, _ = dataset
    rec = next(r for r in records if len(r.agents) >= 3)
    t = imitation_targets(rec, tiny_model.config.layout, tiny_model.type_index)
    kept = [3, 1]  # out of order on purpose
    kept = sorted(kept)
    gathered, weights = reorder_agent_targets(kept, 1, t)
    rng = np.random.default_rng(5)
    preds = rng.normal(size=(len(kept), 160))

    via_reorder = np.abs(preds - gathered) * weights
    total, count = 0.0, 0
    for row, tok in enumerate(kept):
        slot = tok - 1
        tgt = t.agent_pos[slot].reshape(-1)
        w = np.repeat(t.agent_valid[slot], 2).astype(float)
        e = np.abs(preds[row] - tgt) * w
        total += e.sum()
        count += w.sum()
    assert via_reorder.sum() == pytest.approx(total)
    assert weights.sum() == count


def test_reorder_rejects_out_of_range(tiny_model, dataset):
    records, _ = dataset
    t = imitation_targets(records[0], tiny_model.config.layout, tiny_model.type_index)
    with pytest.raises(IndexError):
        reorder_agent_targets([99], 1, t)


# -- trainer ------------------------------------------------------------------

def test_training_is_deterministic(dataset):
    a = small_trainer(dataset, max_steps=8).run()
    b = small_trainer(dataset, max_steps=8).run()
    assert a.column("loss_total") == b.column("loss_total")
    assert a.column("loss_ego") == b.column("loss_ego")


def test_phase_one_never_augments(dataset):
    log = small_trainer(dataset, max_steps=8).run()
    for row in log.rows:
        if row.phase == 1:
            assert row.n_augmented == 0 and row.pi_o is None
        else:
            assert row.pi_o is not None


def test_objective_is_mean_of_branch_losses(dataset):
    log = small_trainer(dataset, max_steps=10).run()
    assert any(r.phase == 2 for r in log.rows)
    for r in log.rows:
        assert r.loss_total == pytest.approx(
            0.5 * (r.loss_branch_original + r.loss_branch_enhanced), abs=1e-12)


def test_augmented_loss_equals_plain_when_both_disabled(dataset):
    log = small_trainer(dataset, max_steps=8, use_pruning=False,
                        use_interpolation=False).run()
    for r in log.rows:
        assert r.loss_branch_original == r.loss_branch_enhanced == r.loss_total


def test_disabled_trainer_matches_reference_plain_loop(dataset):
    """Flags off, the two-branch trainer must reduce bitwise to a plain
    imitation loop written directly against the model API."""
    records, manifest = dataset
    n_steps = 6
    trainer = small_trainer(dataset, use_pruning=False, use_interpolation=False,
                            max_steps=n_steps)
    log = trainer.run()

    model = PlannerModel(SMALL_MODEL)
    cfg = trainer.config
    opt = AdamW(model.planner_parameters(), cfg.weight_decay)
    targets = [imitation_targets(r, model.config.layout, model.type_index)
               for r in records]
    ref_losses = []
    from planlab.rng import STREAM_BATCH_ORDER, derived_rng
    steps_per_epoch = trainer.steps_per_epoch
    for step in range(n_steps):
        epoch, pos = divmod(step, steps_per_epoch)
        perm = derived_rng(cfg.seed, STREAM_BATCH_ORDER, epoch).permutation(len(records))
        idxs = [int(i) for i in perm[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]]
        with ad.Tape() as tape:
            parts = []
            for i in idxs:
                tokens = model.encode(records[i])
                enc = model.run_encoder(tokens, pruning=False)
                parts.append(compute_loss(model.decode(enc), targets[i], 1,
                                          cfg.loss).total)
            total = parts[0]
            for p in parts[1:]:
                total = ad.add(total, p)
            total = ad.scalar_mul(total, 1.0 / len(parts))
            tape.backward(total)
            grads = {k: tape.grad(p) for k, p in model.planner_parameters().items()}
        opt.step(grads, lr_at(step, trainer.warmup_steps, trainer.total_steps,
                              cfg.peak_lr))
        ref_losses.append(float(total.data))

    assert log.column("loss_total") == ref_losses
    for k, p in trainer.model.planner_parameters().items():
        assert np.array_equal(p.data, model.params[k].data), k


def test_checkpoint_resume_is_bit_identical(dataset, tmp_path):
    records, manifest = dataset
    base = small_trainer(dataset, max_steps=9)
    base.run(5)
    ckpt = tmp_path / "ck.npz"
    base.save_checkpoint(ckpt)
    base.run(2)
    direct = {k: v.data.copy() for k, v in base.model.params.items()}
    direct_losses = base.log.column("loss_total")[5:7]

    resumed = Trainer.from_checkpoint(ckpt, records)
    assert resumed.step == 5
    resumed.run(2)
    for k, v in resumed.model.params.items():
        assert np.array_equal(v.data, direct[k]), k
    assert resumed.log.column("loss_total") == direct_losses


def test_diverged_training_reports_step_and_batch(dataset):
    trainer = small_trainer(dataset, max_steps=3)
    trainer.model.params["dec.ego.w2"].data[:] = np.inf
    from planlab.training import TrainingDiverged
    with pytest.raises(TrainingDiverged, match="step 0"):
        trainer.run()


def test_log_csv_roundtrip(dataset, tmp_path):
    log = small_trainer(dataset, max_steps=6).run()
    path = tmp_path / "log.csv"
    log.to_csv(path)
    loaded = TrainingLog.from_csv(path)
    assert loaded.column("loss_total") == log.column("loss_total")
    assert loaded.column("pi_o") == log.column("pi_o")
    assert loaded.column("n_augmented") == log.column("n_augmented")


def test_probe_does_not_alter_encoder_activations(dataset):
    """Encoder features must be identical whether or not the classifier
    probe and mixing run, for non-mixed samples."""
    records, manifest = dataset
    trainer = small_trainer(dataset)
    idxs = trainer.batch_indices(0)
    tokens = trainer._encode_batch(idxs)
    enc = [trainer.model.run_encoder(t, pruning=True) for t in tokens]
    before = [e.features.data.copy() for e in enc]
    plan = trainer.make_enhancement_plan(idxs, enc, step=120)
    feats = trainer._mixed_features(enc, plan)
    for pos, assign in enumerate(plan.assignments):
        assert np.array_equal(enc[pos].features.data, before[pos])
        if assign.donor is None:
            assert feats[pos] is enc[pos].features
