from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

EVAL_CSV = "eval_per_sample.csv"


def read_metrics(path: str | Path) -> dict[str, list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no rows")
    return {k: [float(r[k]) for r in rows] for k in rows[0]}


def plot_metrics(metrics_csv: str | Path, out_dir: str | Path) -> list[Path]:
    """One line plot per tracked column against epoch; unevaluated epochs (NaN) are skipped."""
    cols = read_metrics(metrics_csv)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    epochs = cols.pop("epoch")
    written = []
    for name, values in cols.items():
        pts = [(e, v) for e, v in zip(epochs, values) if not math.isnan(v)]
        fig, ax = plt.subplots(figsize=(5, 3.2))
        if pts:
            ax.plot(*zip(*pts), marker="o", markersize=2)
        ax.set_xlabel("epoch")
        ax.set_ylabel(name)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = out_dir / f"{name.replace('@', '_at_')}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written


def plot_timeline(eval_csv: str | Path, out_path: str | Path, max_rows: int = 12) -> Path:
    """Ground truth and predicted spans as horizontal bars, one row per sample."""
    with open(eval_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))[:max_rows]
    if not rows:
        raise ValueError(f"{eval_csv}: no rows")
    fig, ax = plt.subplots(figsize=(7, 0.5 * len(rows) + 1))
    for i, r in enumerate(rows):
        y = len(rows) - 1 - i
        gs, ge, ps, pe = (float(r[k]) for k in ("gt_start", "gt_end", "pred_start", "pred_end"))
        ax.barh(y + 0.18, ge - gs, left=gs, height=0.32, color="tab:green", label="ground truth" if i == 0 else None)
        ax.barh(y - 0.18, pe - ps, left=ps, height=0.32, color="tab:orange", label="prediction" if i == 0 else None)
        ax.text(max(ge, pe) + 0.3, y, f"{float(r['iou']):.2f}", va="center", fontsize=7)
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels([r["video_id"] for r in reversed(rows)], fontsize=7)
    ax.set_xlabel("seconds")
    ax.legend(loc="lower right", fontsize=7)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path


def plot_run(run_dir: str | Path) -> list[Path]:
    run_dir = Path(run_dir)
    metrics = run_dir / "metrics.csv"
    if not metrics.exists():
        raise FileNotFoundError(f"no metrics.csv in {run_dir}")
    written = plot_metrics(metrics, run_dir / "plots")
    if (run_dir / EVAL_CSV).exists():
        written.append(plot_timeline(run_dir / EVAL_CSV, run_dir / "plots" / "timeline.png"))
    return written
