"""Closed-loop evaluation and the module ablation grid.

``evaluate_model`` rolls a trained planner over held-out scenarios in the
requested simulation modes and produces a metrics report per mode.
``run_ablation`` trains the 2x2 grid {pruning on/off} x {feature mixing
on/off} over several seeds on a long-tail training set and evaluates every
cell on the same held-out scenarios, emitting one summary row per cell.
The interesting comparison is directional: progress on moving scenario
types when the dominant-scenario mass is near-static.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig
from .encoding import TokenLayout
from .metrics import MetricsReport, MetricThresholds, compute_metrics
from .model import ModelConfig, PlannerModel
from .scene import GenConfig, ScenarioRecord, generate_dataset
from .simulation import (MODES, NON_REACTIVE, REACTIVE, PlannerPolicy,
                         SimulationConfig, rollout)
from .training import TrainConfig, Trainer, ablation_variant

MOVING_TYPES = ("lead_follow", "lead_brake", "intersection_turn",
                "lane_change", "yield_merge")

GRID = (
    ("baseline", False, False),
    ("pruning_only", True, False),
    ("mixing_only", False, True),
    ("full", True, True),
)


@dataclass
class EvalConfig:
    modes: tuple[str, ...] = MODES
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    thresholds: MetricThresholds = field(default_factory=MetricThresholds)


def evaluate_model(model: PlannerModel, records: list[ScenarioRecord],
                   cfg: EvalConfig | None = None, use_pruning: bool = True,
                   log_sink: list | None = None) -> dict[str, MetricsReport]:
    """Roll the planner over every record in every requested mode."""
    if not records:
        raise ValueError("no scenarios to evaluate")
    cfg = cfg or EvalConfig()
    policy = PlannerPolicy(model, use_pruning=use_pruning)
    out: dict[str, MetricsReport] = {}
    for mode in cfg.modes:
        report = MetricsReport()
        for rec in records:
            log = rollout(policy, rec, mode, cfg.simulation)
            report.rows.append(compute_metrics(log, rec, cfg.thresholds))
            if log_sink is not None:
                log_sink.append(log)
        out[mode] = report
    return out


def run_benchmark(checkpoint_path, records: list[ScenarioRecord],
                  cfg: EvalConfig | None = None) -> dict[str, MetricsReport]:
    """Evaluate a saved checkpoint on held-out scenarios (both modes)."""
    path = Path(checkpoint_path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    meta, _ = Trainer.read_checkpoint(path)
    model = Trainer.model_from_checkpoint(path)
    use_pruning = bool(meta["train_config"].get("use_pruning", True))
    return evaluate_model(model, records, cfg, use_pruning=use_pruning)


def progress_on_moving_types(reports: dict[str, MetricsReport]) -> list[float]:
    vals = []
    for report in reports.values():
        for r in report.rows:
            if r.scenario_type in MOVING_TYPES:
                vals.append(r.progress_ratio)
    return vals


@dataclass
class AblationCell:
    name: str
    pruning: bool
    mixing: bool
    score_non_reactive: float
    score_reactive: float
    collision_free_pct: float
    comfort_pct: float
    progress_mean: float
    median_progress_moving: float


@dataclass
class AblationConfig:
    train_gen: GenConfig = field(default_factory=lambda: GenConfig(n_records=320, seed=100))
    eval_gen: GenConfig = field(default_factory=lambda: GenConfig(
        n_records=24,
        fractions={"stationary": 4 / 24, "lead_follow": 4 / 24, "lead_brake": 4 / 24,
                   "intersection_turn": 4 / 24, "lane_change": 4 / 24,
                   "yield_merge": 4 / 24},
        seed=900))
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        encoder=EncoderConfig(layers=2, heads=2, model_dim=32, ffn_dim=64),
        layout=TokenLayout()))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=10, warmup_epochs=3, batch_size=16))
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    seeds: tuple[int, ...] = (0, 1, 2)


def train_cell(records, manifest, ablation: AblationConfig, pruning: bool,
               mixing: bool, seed: int) -> PlannerModel:
    model_cfg = ModelConfig.from_dict(ablation.model.to_dict())
    model_cfg.seed = seed
    train_cfg = ablation_variant(ablation.train, pruning, mixing)
    train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "seed": seed})
    trainer = Trainer(records, manifest, model_cfg, train_cfg)
    trainer.run()
    return trainer.model


def run_ablation(ablation: AblationConfig | None = None,
                 out_dir=None, verbose: bool = False) -> list[AblationCell]:
    ablation = ablation or AblationConfig()
    train_records, manifest = generate_dataset(ablation.train_gen)
    eval_records, _ = generate_dataset(ablation.eval_gen)

    cells = []
    for name, pruning, mixing in GRID:
        pooled = {mode: MetricsReport() for mode in ablation.evaluation.modes}
        moving = []
        for seed in ablation.seeds:
            model = train_cell(train_records, manifest, ablation, pruning,
                               mixing, seed)
            reports = evaluate_model(model, eval_records, ablation.evaluation,
                                     use_pruning=pruning)
            for mode, rep in reports.items():
                pooled[mode].rows.extend(rep.rows)
            moving.extend(progress_on_moving_types(reports))
            if verbose:
                scores = {m: round(r.overall_score, 2) for m, r in reports.items()}
                print(f"[{name} seed={seed}] {scores}")
        all_rows = [r for rep in pooled.values() for r in rep.rows]
        cells.append(AblationCell(
            name=name, pruning=pruning, mixing=mixing,
            score_non_reactive=pooled[NON_REACTIVE].overall_score
            if NON_REACTIVE in pooled else float("nan"),
            score_reactive=pooled[REACTIVE].overall_score
            if REACTIVE in pooled else float("nan"),
            collision_free_pct=100.0 * float(np.mean(
                [not r.at_fault_collision for r in all_rows])),
            comfort_pct=100.0 * float(np.mean([r.comfort_ok for r in all_rows])),
            progress_mean=float(np.mean([min(1.0, r.progress_ratio)
                                         for r in all_rows])),
            median_progress_moving=float(np.median(moving)),
        ))
        if verbose:
            print(f"[{name}] median moving progress: "
                  f"{cells[-1].median_progress_moving:.3f}")

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_ablation_csv(cells, out_dir / "ablation.csv")
        with open(out_dir / "ablation.json", "w") as fh:
            json.dump([vars(c) for c in cells], fh, indent=2)
    return cells


def write_ablation_csv(cells: list[AblationCell], path) -> None:
    cols = ("name", "pruning", "mixing", "score_non_reactive", "score_reactive",
            "collision_free_pct", "comfort_pct", "progress_mean",
            "median_progress_moving")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for c in cells:
            fh.write(",".join(str(getattr(c, col)) for col in cols) + "\n")
