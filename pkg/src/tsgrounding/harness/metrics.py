from __future__ import annotations

from typing import Sequence

IOU_THRESHOLDS = (0.3, 0.5, 0.7)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Temporal IoU of two ``(start, end)`` intervals; two equal empty intervals give 1."""
    a0, a1 = float(a[0]), float(a[1])
    b0, b1 = float(b[0]), float(b[1])
    if a0 > a1 or b0 > b1:
        raise ValueError(f"inverted interval: {tuple(a)} / {tuple(b)}")
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    if union == 0:
        return 1.0 if (a0, a1) == (b0, b1) else 0.0
    return inter / union


def recall_at_iou(ious: Sequence[float], m: float) -> float:
    """Percentage of samples with IoU strictly above ``m``."""
    if not 0 < m < 1:
        raise ValueError(f"threshold must be in (0, 1), got {m}")
    if len(ious) == 0:
        raise ValueError("no results to score")
    return 100.0 * sum(1 for x in ious if x > m) / len(ious)
