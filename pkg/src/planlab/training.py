"""Two-phase trainer for the pruning + feature-mixing planner.

Warm-up phase: plain imitation on unpruned encoded features, with the
scenario classifier fitting the same (detached) features concurrently.
Main phase: every step runs two branches that share parameters; the
original branch encodes without pruning or mixing, the enhanced branch
applies token pruning and dominant-scenario feature mixing, and the
optimized objective is the arithmetic mean of the two branch losses.
The classifier keeps training on the pruned, non-mixed tokens with its
own optimizer, and its probe only ever sees detached feature copies.

Everything is deterministic given the config seed: batch order, mixing
partners and ratios are pure functions of (seed, stream, step), so runs
replay bit-identically and checkpoints resume exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .encoder import EncoderOutput
from .encoding import (CATEGORIES, SceneTokens, encode_scene,
                       imitation_targets, scene_features)
from .interpolation import (MixAssignment, PiOSchedule, contribution,
                            decompose, interpolate, plan_batch_interpolation,
                            quantile_threshold)
from .losses import LossBundle, LossWeights, compute_loss
from .model import ModelConfig, PlannerModel
from .rng import STREAM_BATCH_ORDER, STREAM_INTERPOLATION, derived_rng
from .scene import DatasetManifest, ScenarioRecord

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    warmup_epochs: int = 3
    batch_size: int = 32
    peak_lr: float = 1e-3
    weight_decay: float = 1e-4
    classifier_lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    max_steps: int | None = None
    use_pruning: bool = True
    use_interpolation: bool = True
    loss: LossWeights = field(default_factory=LossWeights)
    pi_o: PiOSchedule = field(default_factory=PiOSchedule)

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "epochs", "warmup_epochs", "batch_size", "peak_lr", "weight_decay",
            "classifier_lr", "adam_beta1", "adam_beta2", "adam_eps", "seed",
            "max_steps", "use_pruning", "use_interpolation")}
        d["loss"] = {"w_ego": self.loss.w_ego, "w_agents": self.loss.w_agents,
                     "w_cll": self.loss.w_cll, "w_aux": self.loss.w_aux}
        d["pi_o"] = {"start": self.pi_o.start, "step": self.pi_o.step,
                     "floor": self.pi_o.floor, "period": self.pi_o.period}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = LossWeights(**d.pop("loss", {}))
        pi_o = PiOSchedule(**d.pop("pi_o", {}))
        return cls(loss=loss, pi_o=pi_o, **d)


def lr_at(step: int, warmup_steps: int, total_steps: int, peak: float) -> float:
    """Linear warm-up from zero to peak, then cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    frac = min(1.0, (step - warmup_steps) / span)
    return peak * 0.5 * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay over a named parameter dict."""

    def __init__(self, params: dict[str, ad.Tensor], weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray | None], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            if self.weight_decay:
                p.data = p.data - lr * self.weight_decay * p.data
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = np.array(state["m"][k], dtype=np.float64)
            self.v[k] = np.array(state["v"][k], dtype=np.float64)


@dataclass
class EnhancementPlan:
    """Per-step mixing recipe, computed from detached probes and then constant."""

    pi_o: float
    contributions: np.ndarray
    tau: float
    assignments: list[MixAssignment]

    @property
    def n_augmented(self) -> int:
        return sum(1 for a in self.assignments if a.donor is not None)


@dataclass
class LogRow:
    step: int
    phase: int
    lr: float
    pi_o: float | None
    loss_ego: float
    loss_agents: float
    loss_branch_original: float
    loss_branch_enhanced: float
    loss_total: float
    n_augmented: int


class TrainingLog:
    COLUMNS = ("step", "phase", "lr", "pi_o", "loss_ego", "loss_agents",
               "loss_branch_original", "loss_branch_enhanced", "loss_total",
               "n_augmented")

    def __init__(self, rows: list[LogRow] | None = None):
        self.rows: list[LogRow] = rows or []

    def append(self, row: LogRow) -> None:
        self.rows.append(row)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for r in self.rows:
                vals = []
                for c in self.COLUMNS:
                    v = getattr(r, c)
                    vals.append("" if v is None else repr(v) if isinstance(v, float) else str(v))
                fh.write(",".join(vals) + "\n")

    @classmethod
    def from_csv(cls, path) -> "TrainingLog":
        rows = []
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            assert tuple(header) == cls.COLUMNS, f"unexpected log columns {header}"
            for line in fh:
                parts = line.rstrip("\n").split(",")
                d = dict(zip(cls.COLUMNS, parts))
                rows.append(LogRow(
                    step=int(d["step"]), phase=int(d["phase"]), lr=float(d["lr"]),
                    pi_o=float(d["pi_o"]) if d["pi_o"] else None,
                    loss_ego=float(d["loss_ego"]), loss_agents=float(d["loss_agents"]),
                    loss_branch_original=float(d["loss_branch_original"]),
                    loss_branch_enhanced=float(d["loss_branch_enhanced"]),
                    loss_total=float(d["loss_total"]),
                    n_augmented=int(d["n_augmented"])))
        return cls(rows)


def _mean_scalar(parts: Sequence[ad.Tensor]) -> ad.Tensor:
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    return ad.scalar_mul(total, 1.0 / len(parts))


class Trainer:
    def __init__(self, records: list[ScenarioRecord], manifest: DatasetManifest,
                 model_config: ModelConfig, config: TrainConfig,
                 model: PlannerModel | None = None):
        if not records:
            raise ValueError("training dataset is empty")
        self.records = records
        self.manifest = manifest
        self.dominant = manifest.dominant_set
        self.config = config
        self.model = model or PlannerModel(model_config)
        self.model_config = self.model.config

        layout = self.model_config.layout
        self._features = [scene_features(r, layout) for r in records]
        self._targets = self._targets_build(records, layout)
        self._labels = [r.scenario_type for r in records]

        self.steps_per_epoch = math.ceil(len(records) / config.batch_size)
        self.total_steps = config.epochs * self.steps_per_epoch
        if config.max_steps is not None:
            self.total_steps_run = min(config.max_steps,
                                       config.epochs * self.steps_per_epoch)
        else:
            self.total_steps_run = config.epochs * self.steps_per_epoch
        self.warmup_steps = config.warmup_epochs * self.steps_per_epoch

        self.opt = AdamW(self.model.planner_parameters(), config.weight_decay,
                         config.adam_beta1, config.adam_beta2, config.adam_eps)
        self.clf_opt = AdamW(self.model.classifier_parameters(), 0.0,
                             config.adam_beta1, config.adam_beta2, config.adam_eps)
        self.step = 0
        self.log = TrainingLog()

    def _targets_build(self, records, layout):
        return [imitation_targets(r, layout, self.model.type_index) for r in records]

    # -- batching ------------------------------------------------------------

    def batch_indices(self, step: int) -> list[int]:
        epoch = step // self.steps_per_epoch
        pos = step % self.steps_per_epoch
        perm = derived_rng(self.config.seed, STREAM_BATCH_ORDER, epoch
                           ).permutation(len(self.records))
        lo = pos * self.config.batch_size
        return [int(i) for i in perm[lo:lo + self.config.batch_size]]

    def phase(self, step: int) -> int:
        return 1 if step < self.warmup_steps else 2

    # -- forward pieces --------------------------------------------------------

    def _encode_batch(self, idxs: list[int]) -> list[SceneTokens]:
        embed = {cat: {k: self.model.params[f"embed.{cat}.{k}"]
                       for k in ("w1", "b1", "w2", "b2")} for cat in CATEGORIES}
        return [encode_scene(self._features[i], embed,
                             self.model.params["class_embed"], self.model.fourier)
                for i in idxs]

    def _branch_losses(self, idxs, enc_outs, features=None) -> tuple[LossBundle, list]:
        agent_start = 1  # agent tokens start right after the ego token
        bundles = []
        for pos, (i, enc) in enumerate(zip(idxs, enc_outs)):
            feats = None if features is None else features[pos]
            decoded = self.model.decode(enc, features=feats)
            bundles.append(compute_loss(decoded, self._targets[i], agent_start,
                                        self.config.loss))
        return LossBundle(
            total=_mean_scalar([b.total for b in bundles]),
            ego=_mean_scalar([b.ego for b in bundles]),
            agents=_mean_scalar([b.agents for b in bundles]),
        ), bundles

    def make_enhancement_plan(self, idxs: list[int],
                              enc_outs: list[EncoderOutput],
                              step: int) -> EnhancementPlan:
        """Probe the classifier on detached features and fix the mixing recipe."""
        detached = [ad.Tensor(e.features.data, requires_grad=True) for e in enc_outs]
        labels_idx = [self._targets[i].label_index for i in idxs]
        with ad.Tape() as probe:
            logits = self.model.classifier.logits_batch(detached, detached=True)
            ce = ad.cross_entropy_with_logits(logits, labels_idx)
            probe.backward(ce)
        grads = [probe.grad(t) for t in detached]
        c = contribution([t.data for t in detached], grads)
        pi_o = self.config.pi_o.value(step)
        tau = quantile_threshold(c, pi_o)
        assignments = plan_batch_interpolation(
            [self._labels[i] for i in idxs], self.dominant,
            derived_rng(self.config.seed, STREAM_INTERPOLATION, step))
        return EnhancementPlan(pi_o=pi_o, contributions=c, tau=tau,
                               assignments=assignments)

    def _mixed_features(self, enc_outs: list[EncoderOutput],
                        plan: EnhancementPlan) -> list[ad.Tensor]:
        total_rows = self.model_config.layout.total
        decomposed = [decompose(e.features, plan.contributions, plan.tau)
                      for e in enc_outs]
        out = []
        for pos, (enc, assign) in enumerate(zip(enc_outs, plan.assignments)):
            if assign.donor is None:
                out.append(enc.features)
                continue
            rel, gen = decomposed[pos]
            donor_rel, _ = decomposed[assign.donor]
            donor_pad = ad.scatter_rows(donor_rel, enc_outs[assign.donor].order,
                                        total_rows)
            donor_aligned = ad.gather_rows(donor_pad, enc.order)
            out.append(interpolate(gen, rel, donor_aligned, assign.ratio))
        return out

    def step_objective(self, idxs: list[int], step: int,
                       plan: EnhancementPlan | None = None):
        """Build this step's objective on the active tape.

        Returns (objective, original branch bundle, enhanced branch bundle,
        plan).  In the warm-up phase, or with pruning and mixing both
        disabled, there is a single branch and both bundles are that branch.
        """
        cfg = self.config
        tokens = self._encode_batch(idxs)
        enc_plain = [self.model.run_encoder(t, pruning=False) for t in tokens]
        plain, _ = self._branch_losses(idxs, enc_plain)

        enhanced_active = (self.phase(step) == 2
                           and (cfg.use_pruning or cfg.use_interpolation))
        if not enhanced_active:
            return plain.total, plain, plain, None, enc_plain

        enc_pruned = [self.model.run_encoder(t, pruning=cfg.use_pruning)
                      for t in tokens]
        if cfg.use_interpolation:
            if plan is None:
                plan = self.make_enhancement_plan(idxs, enc_pruned, step)
            feats = self._mixed_features(enc_pruned, plan)
        else:
            plan = None
            feats = None
        enhanced, _ = self._branch_losses(idxs, enc_pruned, features=feats)
        objective = ad.scalar_mul(ad.add(plain.total, enhanced.total), 0.5)
        return objective, plain, enhanced, plan, enc_pruned

    # -- training loop ---------------------------------------------------------

    def _classifier_update(self, idxs: list[int], enc_outs: list[EncoderOutput],
                           lr: float) -> None:
        detached = [e.features.detach() for e in enc_outs]
        labels_idx = [self._targets[i].label_index for i in idxs]
        with ad.Tape() as tape:
            logits = self.model.classifier.logits_batch(detached)
            ce = ad.cross_entropy_with_logits(logits, labels_idx)
            tape.backward(ce)
            grads = {k: tape.grad(p) for k, p in
                     self.model.classifier_parameters().items()}
        self.clf_opt.step(grads, lr)

    def train_step(self) -> LogRow:
        step = self.step
        idxs = self.batch_indices(step)
        lr = lr_at(step, self.warmup_steps, self.total_steps, self.config.peak_lr)

        with ad.Tape() as tape:
            objective, plain, enhanced, plan, enc_for_clf = self.step_objective(idxs, step)
            loss_val = float(objective.data)
            if not math.isfinite(loss_val):
                ids = [self.records[i].record_id for i in idxs]
                raise TrainingDiverged(f"non-finite loss at step {step}; batch {ids}")
            tape.backward(objective)
            grads = {k: tape.grad(p) for k, p in
                     self.model.planner_parameters().items()}
        self.opt.step(grads, lr)

        if self.config.use_interpolation:
            self._classifier_update(idxs, enc_for_clf, self.config.classifier_lr)

        row = LogRow(
            step=step, phase=self.phase(step), lr=lr,
            pi_o=plan.pi_o if plan is not None else None,
            loss_ego=float(plain.ego.data), loss_agents=float(plain.agents.data),
            loss_branch_original=float(plain.total.data),
            loss_branch_enhanced=float(enhanced.total.data),
            loss_total=loss_val,
            n_augmented=plan.n_augmented if plan is not None else 0)
        self.log.append(row)
        self.step += 1
        return row

    def run(self, n_steps: int | None = None) -> TrainingLog:
        target = self.total_steps_run if n_steps is None else self.step + n_steps
        while self.step < target:
            self.train_step()
        return self.log

    # -- checkpointing ----------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "step": self.step,
            "model_config": self.model_config.to_dict(),
            "train_config": self.config.to_dict(),
            "manifest_counts": self.manifest.counts,
            "manifest_seed": self.manifest.seed,
        }
        arrays = {f"p::{k}": v.data for k, v in self.model.params.items()}
        for prefix, opt in (("opt", self.opt), ("clf", self.clf_opt)):
            state = opt.state_dict()
            arrays[f"{prefix}::t"] = np.array([state["t"]])
            for k in state["m"]:
                arrays[f"{prefix}::m::{k}"] = state["m"][k]
                arrays[f"{prefix}::v::{k}"] = state["v"][k]
        np.savez(path, meta=json.dumps(meta), **arrays)

    @staticmethod
    def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
            arrays = {k: data[k] for k in data.files if k != "meta"}
        return meta, arrays

    @classmethod
    def model_from_checkpoint(cls, path) -> PlannerModel:
        meta, arrays = cls.read_checkpoint(path)
        model = PlannerModel(ModelConfig.from_dict(meta["model_config"]))
        model.load_state_dict(
            {k[len("p::"):]: v for k, v in arrays.items() if k.startswith("p::")})
        return model

    @classmethod
    def from_checkpoint(cls, path, records: list[ScenarioRecord]) -> "Trainer":
        meta, arrays = cls.read_checkpoint(path)
        manifest = DatasetManifest(counts=meta["manifest_counts"],
                                   seed=meta["manifest_seed"])
        model = PlannerModel(ModelConfig.from_dict(meta["model_config"]))
        model.load_state_dict(
            {k[len("p::"):]: v for k, v in arrays.items() if k.startswith("p::")})
        trainer = cls(records, manifest, model.config,
                      TrainConfig.from_dict(meta["train_config"]), model=model)
        trainer.step = int(meta["step"])
        for prefix, opt in (("opt", trainer.opt), ("clf", trainer.clf_opt)):
            opt.load_state_dict({
                "t": int(arrays[f"{prefix}::t"][0]),
                "m": {k[len(f"{prefix}::m::"):]: v for k, v in arrays.items()
                      if k.startswith(f"{prefix}::m::")},
                "v": {k[len(f"{prefix}::v::"):]: v for k, v in arrays.items()
                      if k.startswith(f"{prefix}::v::")},
            })
        return trainer


def train(records: list[ScenarioRecord], manifest: DatasetManifest,
          model_config: ModelConfig, config: TrainConfig) -> tuple[Trainer, TrainingLog]:
    trainer = Trainer(records, manifest, model_config, config)
    return trainer, trainer.run()


def ablation_variant(config: TrainConfig, pruning: bool, mixing: bool) -> TrainConfig:
    """Config for one cell of the pruning x mixing ablation grid."""
    return replace(config, use_pruning=pruning, use_interpolation=mixing)
