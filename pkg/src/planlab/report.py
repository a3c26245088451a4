"""Run-report generation: score tables and ego-attention plots.

The evaluate and ablate commands drop CSV/JSON artifacts plus optional
per-scenario rollout logs; this module turns a run directory into a
human-readable markdown summary and, when rollout logs carry per-step
ego-attention rows, line plots of how much attention the ego token pays
to each agent over the course of a rollout.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def attention_trace(log_dict: dict) -> tuple[np.ndarray, list[int]] | None:
    """(steps x agent-slot attention matrix, slot ids) from a rollout log dict."""
    rows = log_dict.get("ego_attention")
    if not rows:
        return None
    att = np.asarray(rows)
    lo, hi = log_dict["agent_range"]
    agent_att = att[:, lo:hi]
    live = [i for i in range(agent_att.shape[1]) if agent_att[:, i].max() > 1e-6]
    return agent_att[:, live], live


def plot_attention(log_dict: dict, out_path) -> bool:
    """Normalized ego-to-agent attention over time; returns False if the
    log carries no attention rows."""
    trace = attention_trace(log_dict)
    if trace is None:
        return False
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    att, slots = trace
    peak = att.max(axis=1, keepdims=True)
    peak[peak == 0] = 1.0
    norm = att / peak
    t = np.arange(att.shape[0]) * 0.1
    fig, ax = plt.subplots(figsize=(7, 3.2))
    for col, slot in enumerate(slots):
        ax.plot(t, norm[:, col], label=f"agent {slot}")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("normalized ego attention")
    ax.set_title(log_dict.get("scenario_id", "scenario"))
    ax.legend(loc="upper right", fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return True


def rollout_log_to_dict(log, agent_range: tuple[int, int]) -> dict:
    return {
        "scenario_id": log.scenario_id,
        "scenario_type": log.scenario_type,
        "mode": log.mode,
        "failed": log.failed,
        "fail_reason": log.fail_reason,
        "ego_states": log.ego_states.tolist(),
        "agent_range": list(agent_range),
        "ego_attention": [a.tolist() for a in (log.ego_attention or [])],
    }


def write_run_report(run_dir, out_dir=None, max_plots: int = 8) -> Path:
    """Summarize a run directory (metrics / ablation artifacts) to markdown."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["# Run report", ""]

    for metrics_json in sorted(run_dir.glob("metrics_*.json")):
        with open(metrics_json) as fh:
            data = json.load(fh)
        mode = metrics_json.stem.replace("metrics_", "")
        lines.append(f"## Closed-loop scores ({mode})")
        lines.append("")
        lines.append(f"overall score: **{data['overall_score']:.2f}**")
        lines.append("")
        lines.append("| scenario type | score |")
        lines.append("|---|---|")
        for t, s in sorted(data["by_type"].items()):
            lines.append(f"| {t} | {s:.2f} |")
        lines.append("")

    ablation = run_dir / "ablation.json"
    if ablation.exists():
        with open(ablation) as fh:
            cells = json.load(fh)
        lines.append("## Module ablation")
        lines.append("")
        lines.append("| config | pruning | mixing | NR score | R score | "
                     "median moving progress |")
        lines.append("|---|---|---|---|---|---|")
        for c in cells:
            lines.append(
                f"| {c['name']} | {'x' if c['pruning'] else ''} | "
                f"{'x' if c['mixing'] else ''} | {c['score_non_reactive']:.2f} | "
                f"{c['score_reactive']:.2f} | {c['median_progress_moving']:.3f} |")
        lines.append("")

    n_plots = 0
    plot_lines = []
    for log_path in sorted(run_dir.glob("rollout_*.json")):
        if n_plots >= max_plots:
            break
        with open(log_path) as fh:
            log_dict = json.load(fh)
        png = out_dir / (log_path.stem + "_attention.png")
        if plot_attention(log_dict, png):
            plot_lines.append(f"![attention]({png.name})")
            n_plots += 1
    if plot_lines:
        lines.append("## Ego attention over time")
        lines.append("")
        lines.extend(plot_lines)
        lines.append("")

    out = out_dir / "report.md"
    out.write_text("\n".join(lines))
    return out
