"""Slow, obviously-correct reference implementations used by the tests."""

import numpy as np


def span_max_map(v):
    """{(i, j): max of rows i..j} by explicit loops."""
    T, D = v.shape
    cells = {}
    for i in range(T):
        for j in range(i, T):
            cells[(i, j)] = np.array([max(v[t, d] for t in range(i, j + 1)) for d in range(D)])
    return cells


def decode_scan(p_s, p_e, p_m, valid, gamma=1.0):
    """Visit cells row-major and keep the first strict maximum."""
    best, arg = -np.inf, None
    T = len(p_s)
    for i in range(T):
        for j in range(i, T):
            if not valid[i, j]:
                continue
            score = p_s[i] * p_e[j] * p_m[i, j] ** gamma
            if score > best:
                best, arg = score, (i, j)
    return arg


def interval_iou(a, b):
    (a0, a1), (b0, b1) = a, b
    if a0 > a1 or b0 > b1:
        raise ValueError("inverted")
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    length_a, length_b = a1 - a0, b1 - b0
    union = length_a + length_b - inter
    if union == 0:
        return 1.0 if (a0, a1) == (b0, b1) else 0.0
    return inter / union


def count_recall(ious, m):
    hits = 0
    for x in ious:
        if x > m:
            hits += 1
    return 100.0 * hits / len(ious)


def topk_sort(scores, K):
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:K]
