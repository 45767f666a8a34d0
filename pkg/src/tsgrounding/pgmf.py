"""Prompt-guided multi-modal fusion: attention stack, 2D temporal map and prediction heads."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import torch
from torch import nn

from .backbone import MultiHeadAttention, masked_softmax

FULL_ENUMERATION_MAX_T = 64


class AttentionFusion(nn.Module):
    """``x + FC(attend(x, context))`` with logits scaled by 1/sqrt(D).

    Self-attention when ``context`` is None. Inputs are layer-normalised before
    the projections so that a zero output layer leaves ``x`` untouched.
    """

    def __init__(self, D: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        self.norm_x = nn.LayerNorm(D)
        self.norm_c = nn.LayerNorm(D)
        self.attn = MultiHeadAttention(D, num_heads, scale=1 / math.sqrt(D))
        self.drop = nn.Dropout(dropout)

    @property
    def fc(self) -> nn.Linear:
        return self.attn.out_proj

    def forward(self, x, x_mask, context=None, context_mask=None, need_weights: bool = False):
        hx = self.norm_x(x)
        if context is None:
            hc, context_mask = hx, x_mask
        else:
            if context.shape[-1] != x.shape[-1]:
                raise ValueError(f"feature dims differ: {x.shape[-1]} vs {context.shape[-1]}")
            hc = self.norm_c(context)
        out, weights = self.attn(hx, hc, context_mask, need_weights=need_weights)
        out = (x + self.drop(out)) * x_mask[..., None].to(x.dtype)
        return (out, weights) if need_weights else out


class Fusion(nn.Module):
    """Self-attention on each stream followed by symmetric cross-attention.

    With ``query_self=False`` the caller supplies the already self-attended query
    stream (the 2D-map branch reuses the frame branch's).
    """

    def __init__(self, D: int, num_heads: int, dropout: float = 0.0, query_self: bool = True):
        super().__init__()
        self.self_v = AttentionFusion(D, num_heads, dropout)
        self.self_q = AttentionFusion(D, num_heads, dropout) if query_self else None
        self.cross_vq = AttentionFusion(D, num_heads, dropout)
        self.cross_qv = AttentionFusion(D, num_heads, dropout)

    def forward(self, v, v_mask, q, q_mask, q_prime=None):
        v1 = self.self_v(v, v_mask)
        if q_prime is None:
            if self.self_q is None:
                raise ValueError("this fusion block expects a precomputed query stream")
            q_prime = self.self_q(q, q_mask)
        v2 = self.cross_vq(v1, v_mask, q_prime, q_mask)
        q2 = self.cross_qv(q_prime, q_mask, v1, v_mask)
        return v2, q2, q_prime


class ContextQueryFusion(nn.Module):
    """``FC([V; V * (A_r Q); V * (A_r A_c^T V)])`` with ``A = FC(V) FC(Q)^T / sqrt(D)``."""

    def __init__(self, D: int):
        super().__init__()
        self.D = D
        self.fc_v = nn.Linear(D, D)
        self.fc_q = nn.Linear(D, D)
        self.out = nn.Linear(3 * D, D)

    def attention(self, v, v_mask, q, q_mask):
        A = self.fc_v(v) @ self.fc_q(q).transpose(-1, -2) / math.sqrt(self.D)
        A_r = masked_softmax(A, q_mask[:, None, :], dim=-1)
        A_c = masked_softmax(A, v_mask[:, :, None], dim=1) * q_mask[:, None, :].to(A.dtype)
        return A_r, A_c

    def forward(self, v, v_mask, q, q_mask, return_attention: bool = False):
        A_r, A_c = self.attention(v, v_mask, q, q_mask)
        ctx_q = A_r @ q
        ctx_v = A_r @ (A_c.transpose(-1, -2) @ v)
        out = self.out(torch.cat([v, v * ctx_q, v * ctx_v], dim=-1)) * v_mask[..., None].to(v.dtype)
        return (out, A_r, A_c) if return_attention else out


class EndpointHead(nn.Module):
    """Two stacked LSTMs; start logits from layer ``start_layer``, end logits from layer 2."""

    def __init__(self, D: int, start_layer: int = 1):
        super().__init__()
        if start_layer not in (1, 2):
            raise ValueError("start_layer must be 1 or 2")
        self.start_layer = start_layer
        self.lstm1 = nn.LSTM(D, D, batch_first=True)
        self.lstm2 = nn.LSTM(D, D, batch_first=True)
        self.fc_start = nn.Linear(D, 1)
        self.fc_end = nn.Linear(D, 1)

    def forward(self, v, v_mask):
        h1, _ = self.lstm1(v)
        h2, _ = self.lstm2(h1)
        start_logits = self.fc_start(h1 if self.start_layer == 1 else h2).squeeze(-1)
        end_logits = self.fc_end(h2).squeeze(-1)
        return masked_softmax(start_logits, v_mask), masked_softmax(end_logits, v_mask)


class HighlightHead(nn.Module):
    def __init__(self, D: int):
        super().__init__()
        self.conv = nn.Conv1d(D, 1, kernel_size=1)

    def forward(self, v, v_mask):
        score = torch.sigmoid(self.conv(v.transpose(1, 2)).squeeze(1))
        return score * v_mask.to(score.dtype)


# -- 2D temporal map ----------------------------------------------------------------

def sparse_candidate_mask(T: int) -> torch.Tensor:
    """Multi-scale candidate pattern: dense for short spans, stride doubling for long ones."""
    mask = torch.zeros(T, T, dtype=torch.bool)
    idx = torch.arange(T)
    mask[idx, idx] = True
    stride, offset = 1, 0
    counts = [15] + [8] * 32
    for count in counts:
        for _ in range(count):
            offset += stride
            if offset >= T:
                return mask
            starts = torch.arange(0, T - offset, stride)
            mask[starts, starts + offset] = True
        stride *= 2
    return mask


@lru_cache(maxsize=32)
def candidate_cells(T: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Start/end indices of the candidate cells, ordered by span length then start."""
    if T <= FULL_ENUMERATION_MAX_T:
        pattern = torch.triu(torch.ones(T, T, dtype=torch.bool))
    else:
        pattern = sparse_candidate_mask(T)
    starts, ends = [], []
    for off in range(T):
        i = torch.arange(T - off)
        keep = pattern[i, i + off]
        starts.append(i[keep])
        ends.append((i + off)[keep])
    return torch.cat(starts), torch.cat(ends)


@dataclass
class TemporalMap2D:
    flat: torch.Tensor  # B x K x D, candidate features
    cand_start: torch.Tensor  # K
    cand_end: torch.Tensor  # K
    cand_mask: torch.Tensor  # B x K
    T: int

    @property
    def num_candidates(self) -> int:
        return int(self.cand_start.numel())

    @property
    def valid_mask(self) -> torch.Tensor:
        return self.unflatten(self.cand_mask[..., None].to(torch.float64))[..., 0].bool()

    @property
    def features(self) -> torch.Tensor:
        return self.unflatten(self.flat)

    def unflatten(self, flat: torch.Tensor) -> torch.Tensor:
        """B x K x C -> B x T x T x C with zeros at non-candidate cells."""
        B, K, C = flat.shape
        grid = flat.new_zeros(B, self.T * self.T, C)
        index = (self.cand_start * self.T + self.cand_end).to(flat.device)
        grid = grid.index_copy(1, index, flat)
        return grid.view(B, self.T, self.T, C)

    def flatten(self, grid: torch.Tensor) -> torch.Tensor:
        B = grid.shape[0]
        return grid.reshape(B, self.T * self.T, *grid.shape[3:])[:, self.cand_start * self.T + self.cand_end]


def build_2d_map(v: torch.Tensor, v_mask: torch.Tensor | None = None) -> TemporalMap2D:
    """Cell (i, j) holds the elementwise max of frames i..j."""
    single = v.ndim == 2
    if single:
        v = v[None]
        v_mask = None if v_mask is None else v_mask[None]
    B, T, D = v.shape
    if T < 1:
        raise ValueError("empty sequence")
    if v_mask is None:
        v_mask = torch.ones(B, T, dtype=torch.bool, device=v.device)
    starts, ends = candidate_cells(T)
    diagonals = [v]
    for off in range(1, T):
        diagonals.append(torch.maximum(diagonals[-1][:, :-1], v[:, off:]))
    dense = torch.cat(diagonals, dim=1)  # every i <= j cell, ordered by offset then start
    if starts.numel() != dense.shape[1]:
        dense_index = _dense_index(T)
        dense = dense[:, dense_index[starts, ends]]
    n_valid = v_mask.sum(-1)
    cand_mask = ends[None, :].to(v.device) < n_valid[:, None]
    flat = dense * cand_mask[..., None].to(dense.dtype)
    return TemporalMap2D(flat, starts, ends, cand_mask, T)


@lru_cache(maxsize=8)
def _dense_index(T: int) -> torch.Tensor:
    idx = torch.full((T, T), -1, dtype=torch.long)
    pos = 0
    for off in range(T):
        i = torch.arange(T - off)
        idx[i, i + off] = torch.arange(pos, pos + T - off)
        pos += T - off
    return idx


class MatchHead(nn.Module):
    def __init__(self, D: int):
        super().__init__()
        self.conv = nn.Conv2d(D, 1, kernel_size=1)

    def forward(self, tmap: TemporalMap2D, fused_flat: torch.Tensor) -> torch.Tensor:
        grid = tmap.unflatten(fused_flat).permute(0, 3, 1, 2)  # B x D x T x T
        score = torch.sigmoid(self.conv(grid)).squeeze(1)
        flat = tmap.flatten(score[..., None])[..., 0]
        return flat * tmap.cand_mask.to(flat.dtype)


# -- full module ---------------------------------------------------------------------

@dataclass
class PGMFOutput:
    p_start: torch.Tensor
    p_end: torch.Tensor
    p_highlight: torch.Tensor
    p_match: torch.Tensor  # B x K over candidates
    tmap: TemporalMap2D

    @property
    def match_grid(self) -> torch.Tensor:
        return self.tmap.unflatten(self.p_match[..., None])[..., 0]


class PGMF(nn.Module):
    def __init__(self, D: int, num_heads: int, dropout: float = 0.0, start_layer: int = 1):
        super().__init__()
        self.frame_fusion = Fusion(D, num_heads, dropout)
        self.frame_cq = ContextQueryFusion(D)
        self.endpoints = EndpointHead(D, start_layer)
        self.highlight = HighlightHead(D)
        self.map_fusion = Fusion(D, num_heads, dropout, query_self=False)
        self.map_cq = ContextQueryFusion(D)
        self.match = MatchHead(D)

    def forward(self, v, v_mask, q_hat, q_mask) -> PGMFOutput:
        v2, q2, q_prime = self.frame_fusion(v, v_mask, q_hat, q_mask)
        v3 = self.frame_cq(v2, v_mask, q2, q_mask)
        p_start, p_end = self.endpoints(v3, v_mask)
        p_highlight = self.highlight(v3, v_mask)

        tmap = build_2d_map(v, v_mask)
        m2, mq2, _ = self.map_fusion(tmap.flat, tmap.cand_mask, None, q_mask, q_prime=q_prime)
        m3 = self.map_cq(m2, tmap.cand_mask, mq2, q_mask)
        p_match = self.match(tmap, m3)
        return PGMFOutput(p_start, p_end, p_highlight, p_match, tmap)


def decode_moment(p_start, p_end, match_grid, valid, gamma: float = 1.0):
    """argmax over valid i <= j of ``p_s[i] * p_e[j] * p_m[i, j] ** gamma``.

    Works on single (T,) / (T, T) inputs or batches; row-major argmax gives the
    smallest start, then the smallest end, on ties.
    """
    single = p_start.ndim == 1
    if single:
        p_start, p_end, match_grid, valid = p_start[None], p_end[None], match_grid[None], valid[None]
    T = p_start.shape[-1]
    upper = torch.triu(torch.ones(T, T, dtype=torch.bool, device=p_start.device))
    ok = valid.bool() & upper
    score = p_start[:, :, None] * p_end[:, None, :] * match_grid.pow(gamma)
    score = score.masked_fill(~ok, float("-inf")).reshape(score.shape[0], -1)
    flat = score.argmax(dim=-1)
    starts, ends = flat // T, flat % T
    if single:
        return int(starts[0]), int(ends[0])
    return starts, ends
