"""Supervision labels and the grounding, boundary, contrastive and total losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .datamodel import MomentAnnotation, ValidationError, seconds_to_frames

PROB_EPS = 1e-7


@dataclass
class LossWeights:
    lambda1: float = 5.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    lambda4: float = 0.5

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class SupervisionLabels:
    start: int
    end: int
    y_start: np.ndarray
    y_end: np.ndarray
    y_highlight: np.ndarray
    y_match: np.ndarray


def interval_iou(a_start, a_end, b_start, b_end):
    """Vectorised IoU of 1-D intervals (numpy broadcasting)."""
    inter = np.clip(np.minimum(a_end, b_end) - np.maximum(a_start, b_start), 0, None)
    union = np.maximum(a_end, b_end) - np.minimum(a_start, b_start)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 1.0)
    return out


def scaled_iou(iou, t_min: float = 0.5, t_max: float = 1.0):
    return np.clip((np.asarray(iou, dtype=np.float64) - t_min) / (t_max - t_min), 0.0, 1.0)


def make_labels(
    ann: MomentAnnotation,
    T: int,
    cand_start: np.ndarray,
    cand_end: np.ndarray,
    n_valid: int | None = None,
    extend_ratio: float = 0.25,
    t_min: float = 0.5,
    t_max: float = 1.0,
) -> SupervisionLabels:
    """Frame labels over ``T`` frames (``n_valid`` of them real) and scaled-IoU candidate labels.

    Candidate ``(i, j)`` spans ``[i, j + 1)`` frame bins; IoU is measured in bin units.
    """
    if not 0 <= t_min < t_max <= 1:
        raise ValueError("need 0 <= t_min < t_max <= 1")
    n_valid = T if n_valid is None else n_valid
    if ann.end_sec > ann.duration_sec + 1e-9 or ann.start_sec < 0:
        raise ValidationError(f"{ann.video_id}: annotation outside the video duration")
    s, e = seconds_to_frames(ann.start_sec, ann.end_sec, ann.duration_sec, n_valid)

    y_start = np.zeros(T, dtype=np.float32)
    y_end = np.zeros(T, dtype=np.float32)
    y_start[s] = 1
    y_end[e] = 1
    ext = int(round(extend_ratio * (e - s + 1)))
    y_highlight = np.zeros(T, dtype=np.float32)
    y_highlight[max(0, s - ext) : min(n_valid - 1, e + ext) + 1] = 1

    scale = n_valid / ann.duration_sec
    gt_s, gt_e = ann.start_sec * scale, ann.end_sec * scale
    iou = interval_iou(np.asarray(cand_start, dtype=np.float64), np.asarray(cand_end, dtype=np.float64) + 1, gt_s, gt_e)
    y_match = scaled_iou(iou, t_min, t_max).astype(np.float32)
    y_match[np.asarray(cand_end) >= n_valid] = 0
    return SupervisionLabels(s, e, y_start, y_end, y_highlight, y_match)


def _check_probs(p: torch.Tensor, name: str) -> None:
    if torch.isnan(p).any() or (p < 0).any() or (p > 1).any():
        raise ValueError(f"{name} has values outside [0, 1]")


def _masked_mean(x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return x.mean(dim=-1)
    m = mask.to(x.dtype)
    return (x * m).sum(-1) / m.sum(-1)


def binary_ce(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    p = p.clamp(PROB_EPS, 1 - PROB_EPS)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p))


def span_ce(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Categorical cross-entropy over the last axis (``y`` one-hot or soft)."""
    return -(y * torch.log(p.clamp(PROB_EPS, 1.0))).sum(-1)


def loss_pre(p_start, p_end, p_highlight, y_start, y_end, y_highlight, lambda1: float = 5.0, frame_mask=None):
    """½[CE(P^s, Y^s) + CE(P^e, Y^e)] + lambda1 * mean-over-valid-frames BCE(P^h, Y^h); batch-averaged."""
    for p, name in ((p_start, "p_start"), (p_end, "p_end"), (p_highlight, "p_highlight")):
        _check_probs(p, name)
    span = 0.5 * (span_ce(p_start, y_start) + span_ce(p_end, y_end))
    hl = _masked_mean(binary_ce(p_highlight, y_highlight), frame_mask)
    return (span + lambda1 * hl).mean()


def loss_bound(p_match, y_match, cand_mask=None):
    """Mean soft-target BCE over the valid candidates; batch-averaged."""
    _check_probs(p_match, "p_match")
    n = p_match.shape[-1] if cand_mask is None else cand_mask.sum(-1)
    if (torch.as_tensor(n) == 0).any():
        raise ValueError("no valid moment candidates")
    return _masked_mean(binary_ce(p_match, y_match), cand_mask).mean()


def total_loss(l_pre, l_bound, l_con, weights: LossWeights, l_key=0.0, lambda_key: float = 0.0):
    """``lambda2 * pre + lambda3 * bound + lambda4 * con`` plus the prompt key-pull term."""
    for name, val in (("l_pre", l_pre), ("l_bound", l_bound), ("l_con", l_con), ("l_key", l_key)):
        v = float(val.detach()) if torch.is_tensor(val) else float(val)
        if not math.isfinite(v):
            raise ValueError(f"loss component {name} is not finite ({v})")
    total = weights.lambda2 * l_pre + weights.lambda3 * l_bound + weights.lambda4 * l_con
    if lambda_key:
        total = total + lambda_key * l_key
    return total
