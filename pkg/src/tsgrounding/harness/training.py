from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from ..datamodel import Vocab, stable_hash
from ..model import GroundingModel, compute_losses
from .config import TrainConfig
from .data import Example, collate, iter_batches
from .evaluation import evaluate_model
from .metrics import IOU_THRESHOLDS

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "l_pre", "l_bound", "l_con", "l_key", "total"] + [f"iou@{m}" for m in IOU_THRESHOLDS]


class TrainingError(RuntimeError):
    pass


@dataclass
class StepStat:
    epoch: int
    batch: int
    grad_norm: float
    clipped_norm: float


@dataclass
class TrainResult:
    model: GroundingModel
    vocab: Vocab
    history: list[dict] = field(default_factory=list)
    steps: list[StepStat] = field(default_factory=list)
    prompt_usage: dict[str, int] = field(default_factory=dict)  # example key -> entry used in the last epoch
    checkpoint: Path | None = None


def example_key(ex: Example) -> str:
    return f"{ex.video_id}@{ex.annotation.start_sec:.6f}"


def lr_factor(schedule: str, step: int, total: int) -> float:
    if schedule == "constant":
        return 1.0
    frac = min(step / max(total, 1), 1.0)
    if schedule == "linear":
        return 1.0 - frac
    return 0.5 * (1 + math.cos(math.pi * frac))


def global_grad_norm(params: Iterable[torch.nn.Parameter]) -> float:
    norms = [p.grad.detach().norm() for p in params if p.grad is not None]
    return float(torch.linalg.vector_norm(torch.stack(norms))) if norms else 0.0


def save_checkpoint(path: Path, model: GroundingModel, cfg: TrainConfig, vocab: Vocab, objects: Iterable[str], epoch: int) -> None:
    torch.save(
        {
            "model": model.state_dict(),
            "model_config": dict(model.cfg.__dict__),
            "train_config": cfg.to_dict(),
            "vocab": list(vocab.itos),
            "objects": sorted(objects),
            "epoch": epoch,
            "seed": cfg.seed,
        },
        path,
    )


def train(
    cfg: TrainConfig,
    examples: Sequence[Example],
    vocab: Vocab,
    objects: Iterable[str] = (),
    out_dir: str | Path | None = None,
    dtype: torch.dtype = torch.float32,
) -> TrainResult:
    """Adam with a decaying learning rate and global-norm clipping; one CSV row per epoch.

    Deterministic for a fixed ``cfg.seed`` on one machine.
    """
    if not examples:
        raise ValueError("empty training set")
    objects = sorted(set(objects))
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = GroundingModel(cfg.model_config(examples[0].video.features.shape[1], len(vocab))).to(dtype)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.adam_eps)
    steps_per_epoch = math.ceil(len(examples) / cfg.batch_size)
    total_steps = cfg.max_steps or cfg.epochs * steps_per_epoch
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: lr_factor(cfg.lr_schedule, s, total_steps))
    use_pseudo = cfg.uses_pseudo_queries

    out_dir = Path(out_dir) if out_dir is not None else None
    csv_fh = writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_fh = open(out_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(csv_fh)
        writer.writerow(METRIC_COLUMNS)

    result = TrainResult(model, vocab)
    step = 0
    try:
        for epoch in range(cfg.epochs):
            model.train()
            order = rng.permutation(len(examples))
            sums = dict.fromkeys(("l_pre", "l_bound", "l_con", "l_key", "total"), 0.0)
            n_batches = 0
            usage = {}
            for b, chunk in enumerate(iter_batches(examples, cfg.batch_size, order)):
                batch = collate(chunk, vocab, objects, cfg.M_percent, stable_hash(cfg.seed, epoch), use_pseudo).to(dtype)
                out = model(batch, use_pseudo=use_pseudo)
                try:
                    losses = compute_losses(out, batch, cfg.loss_weights, cfg.lambda_key)
                except ValueError as exc:
                    # NaN outputs trip the probability checks before the loss is formed
                    raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}: {exc}") from exc
                if not torch.isfinite(losses.total):
                    raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}")
                opt.zero_grad(set_to_none=True)
                losses.total.backward()
                pre = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm))
                result.steps.append(StepStat(epoch, b, pre, global_grad_norm(params)))
                opt.step()
                sched.step()
                step += 1
                for k, v in losses.as_floats().items():
                    sums[k] += v
                n_batches += 1
                if out.prompt_index is not None:
                    for ex, idx in zip(chunk, out.prompt_index.tolist()):
                        usage[example_key(ex)] = idx
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
            result.prompt_usage = usage

            row = {"epoch": epoch, **{k: v / n_batches for k, v in sums.items()}}
            last = epoch == cfg.epochs - 1 or (cfg.max_steps is not None and step >= cfg.max_steps)
            if cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or last):
                ev = evaluate_model(model, examples, vocab, gamma=cfg.gamma)
                row.update({f"iou@{m}": ev.iou_at[m] for m in IOU_THRESHOLDS})
            else:
                row.update({f"iou@{m}": float("nan") for m in IOU_THRESHOLDS})
            result.history.append(row)
            log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in row.items() if k != "epoch"})

            if writer is not None:
                writer.writerow([row[c] for c in METRIC_COLUMNS])
                csv_fh.flush()
                if cfg.save_checkpoints:
                    result.checkpoint = out_dir / "checkpoint.pt"
                    save_checkpoint(result.checkpoint, model, cfg, vocab, objects, epoch)
            target = cfg.target_train_iou7
            if last or (target is not None and row["iou@0.7"] >= target):
                break
    finally:
        if csv_fh is not None:
            csv_fh.close()
    model.eval()
    return result
