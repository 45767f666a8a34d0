from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from ..datamodel import MomentAnnotation, VideoFeatures, Vocab, frames_to_seconds
from ..model import GroundingModel, ModelConfig
from .data import Example, build_examples, collate, iter_batches
from .metrics import IOU_THRESHOLDS, iou, recall_at_iou


@dataclass
class SampleResult:
    video_id: str
    pred: tuple[float, float]
    gt: tuple[float, float]
    iou: float


@dataclass
class EvalResult:
    iou_at: dict[float, float]
    per_sample: list[SampleResult] = field(default_factory=list)

    @property
    def mean_iou(self) -> float:
        return sum(s.iou for s in self.per_sample) / len(self.per_sample)

    def table(self) -> str:
        head = " | ".join(f"IoU@{m}" for m in self.iou_at)
        row = " | ".join(f"{v:6.2f}" for v in self.iou_at.values())
        return f"{head} | mIoU\n{row} | {100 * self.mean_iou:6.2f}"

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["video_id", "pred_start", "pred_end", "gt_start", "gt_end", "iou"])
            for s in self.per_sample:
                w.writerow([s.video_id, s.pred[0], s.pred[1], s.gt[0], s.gt[1], s.iou])


class OracleModel:
    """Predicts the labelled frames; an upper bound for the harness."""

    def eval(self):
        return self

    def predict(self, batch, gamma: float = 1.0):
        return batch.y_start.argmax(-1), batch.y_end.argmax(-1), None


def evaluate_model(model, examples: Sequence[Example], vocab: Vocab | None, batch_size: int = 32, gamma: float = 1.0) -> EvalResult:
    """Score predictions from the inference path (no pseudo-queries)."""
    was_training = getattr(model, "training", False)
    model.eval()
    per_sample = []
    dtype = next(model.parameters()).dtype if isinstance(model, torch.nn.Module) else torch.float32
    for chunk in iter_batches(examples, batch_size):
        batch = collate(chunk, vocab or Vocab(), with_pseudo=False).to(dtype)
        starts, ends, _ = model.predict(batch, gamma)
        for ex, s, e in zip(chunk, starts.tolist(), ends.tolist()):
            pred = frames_to_seconds(s, e, ex.annotation.duration_sec, ex.n_valid)
            gt = (ex.annotation.start_sec, ex.annotation.end_sec)
            per_sample.append(SampleResult(ex.video_id, pred, gt, iou(pred, gt)))
    if was_training:
        model.train()
    ious = [s.iou for s in per_sample]
    return EvalResult({m: recall_at_iou(ious, m) for m in IOU_THRESHOLDS}, per_sample)


@torch.no_grad()
def alignment_score(model: GroundingModel, examples: Sequence[Example], vocab: Vocab, batch_size: int = 32) -> float:
    """Mean cosine between each video's pooled feature and its own pooled pseudo-query feature."""
    was_training = model.training
    model.eval()
    total, n = 0.0, 0
    dtype = next(model.parameters()).dtype
    for chunk in iter_batches(examples, batch_size):
        batch = collate(chunk, vocab, with_pseudo=True).to(dtype)
        if batch.pq is None:
            raise ValueError("alignment needs pseudo-queries for every example")
        out = model(batch, use_pseudo=True)
        total += float((out.v_tilde * out.p_tilde).sum(-1).sum())
        n += len(chunk)
    if was_training:
        model.train()
    return total / n


def load_checkpoint(path: str | Path) -> tuple[GroundingModel, dict]:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    model = GroundingModel(ModelConfig(**ckpt["model_config"]))
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, ckpt


def evaluate(checkpoint: str | Path, dataset: Sequence[tuple[VideoFeatures, MomentAnnotation]]) -> EvalResult:
    model, ckpt = load_checkpoint(checkpoint)
    cfg = ckpt["train_config"]
    d_in = dataset[0][0].features.shape[1]
    if d_in != model.cfg.D_in:
        raise ValueError(f"dataset feature dim {d_in} does not match checkpoint input dim {model.cfg.D_in}")
    vocab = Vocab.from_itos(ckpt["vocab"])
    examples = build_examples(dataset, cfg["T"], extend_ratio=cfg["extend_ratio"], t_min=cfg["t_min"], t_max=cfg["t_max"])
    return evaluate_model(model, examples, vocab, gamma=cfg["gamma"])
