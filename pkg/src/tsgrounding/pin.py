"""Pseudo-query intermediary network: contrastive alignment of pooled video and pseudo-query features."""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import masked_mean

EPS_INIT = 1 / 0.07
EPS_MIN, EPS_MAX = 1.0, 100.0


class ResidualLinear(nn.Module):
    def __init__(self, D: int):
        super().__init__()
        self.fc = nn.Linear(D, D)

    def forward(self, x):
        return x + self.fc(x)


class PinParams(nn.Module):
    """f_theta / f_sigma branch layers, the semantic-token MLP and the contrastive scale."""

    def __init__(self, D: int, max_slots: int = 64):
        super().__init__()
        self.f_theta = ResidualLinear(D)
        self.f_sigma = ResidualLinear(D)
        self.f_delta = nn.Sequential(nn.Linear(D, D), nn.GELU(), nn.Linear(D, D))
        self.slot_offsets = nn.Parameter(torch.zeros(max_slots, D))
        # stored in log space so the scale stays positive
        self.log_epsilon = nn.Parameter(torch.tensor(math.log(EPS_INIT)))

    @property
    def epsilon(self) -> torch.Tensor:
        return self.log_epsilon.exp().clamp(EPS_MIN, EPS_MAX)


def pool_pair(v_bar, v_mask, p_feat, p_mask, params: PinParams):
    """L2-normalised means of f_theta(V) and f_sigma(P) over valid rows -> (B x D, B x D)."""
    if not v_mask.any(-1).all() or not p_mask.any(-1).all():
        raise ValueError("pool_pair needs at least one valid row per sample in both streams")
    v = masked_mean(params.f_theta(v_bar), v_mask)
    p = masked_mean(params.f_sigma(p_feat), p_mask)
    return F.normalize(v, dim=-1), F.normalize(p, dim=-1)


def contrastive_parts(batch_v: torch.Tensor, batch_p: torch.Tensor, epsilon) -> tuple[torch.Tensor, torch.Tensor]:
    """(L_q2v, L_v2q) with in-batch negatives and diagonal positives."""
    if batch_v.shape != batch_p.shape or batch_v.ndim != 2 or batch_v.shape[0] < 1:
        raise ValueError(f"expected two B x D batches, got {tuple(batch_v.shape)} and {tuple(batch_p.shape)}")
    if torch.isnan(batch_v).any() or torch.isnan(batch_p).any() or torch.isnan(torch.as_tensor(epsilon)).any():
        raise ValueError("NaN in contrastive loss input")
    target = torch.arange(batch_v.shape[0], device=batch_v.device)
    # row i of p @ v^T scores pseudo-query i against every video j
    l_q2v = F.cross_entropy(epsilon * (batch_p @ batch_v.T), target)
    l_v2q = F.cross_entropy(epsilon * (batch_v @ batch_p.T), target)
    return l_q2v, l_v2q


def contrastive_loss(batch_v: torch.Tensor, batch_p: torch.Tensor, epsilon) -> torch.Tensor:
    l_q2v, l_v2q = contrastive_parts(batch_v, batch_p, epsilon)
    return l_q2v + l_v2q


def visual_semantic_tokens(v_tilde: torch.Tensor, n_o: int, params: PinParams) -> torch.Tensor:
    """``n_o`` copies of f_delta(v_tilde), each shifted by its slot offset -> n_o x D."""
    if n_o < 0:
        raise ValueError("n_o must be >= 0")
    if n_o > params.slot_offsets.shape[0]:
        raise ValueError(f"n_o={n_o} exceeds the {params.slot_offsets.shape[0]} token slots")
    if n_o == 0:
        return v_tilde.new_zeros(0, v_tilde.shape[-1])
    return params.f_delta(v_tilde)[None, :] + params.slot_offsets[:n_o]


def inject_tokens(p_feat: torch.Tensor, mask_positions: Sequence[int], tokens: torch.Tensor) -> torch.Tensor:
    """Replace row ``mask_positions[i]`` with ``tokens[i]``; positions are taken in ascending order."""
    positions = sorted(int(p) for p in mask_positions)
    if len(positions) != tokens.shape[0]:
        raise ValueError(f"{len(positions)} positions but {tokens.shape[0]} tokens")
    if len(set(positions)) != len(positions):
        raise ValueError(f"duplicate mask positions: {list(mask_positions)}")
    if positions and (positions[0] < 0 or positions[-1] >= p_feat.shape[0]):
        raise ValueError(f"mask position out of range for length {p_feat.shape[0]}: {list(mask_positions)}")
    if not positions:
        return p_feat
    out = p_feat.clone()
    out[torch.tensor(positions, dtype=torch.long)] = tokens
    return out


def inject_batch(p_feat, v_tilde, mask_positions: Sequence[Sequence[int]], params: PinParams):
    rows = []
    for b, positions in enumerate(mask_positions):
        tokens = visual_semantic_tokens(v_tilde[b], len(positions), params)
        rows.append(inject_tokens(p_feat[b], positions, tokens))
    return torch.stack(rows)
