"""Visual/textual encoders, word embeddings and shared attention primitives."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .datamodel import MASK_ID, PAD_ID, Vocab


@dataclass
class EncoderConfig:
    D: int = 128
    num_heads: int = 8
    dropout: float = 0.2
    embed_dim_in: int = 300
    num_layers: int = 1

    def __post_init__(self):
        if self.D % self.num_heads:
            raise ValueError(f"D={self.D} is not divisible by num_heads={self.num_heads}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor | None, dim: int = -1) -> torch.Tensor:
    """Softmax with -inf logits at masked entries; an all-masked slice returns zeros."""
    if mask is None:
        return torch.softmax(logits, dim=dim)
    mask = mask.bool()
    any_valid = mask.any(dim=dim, keepdim=True)
    logits = logits.masked_fill(~mask, float("-inf")).masked_fill(~any_valid, 0.0)
    return torch.softmax(logits, dim=dim).masked_fill(~mask, 0.0)


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return pe.to(dtype)


class MultiHeadAttention(nn.Module):
    """Multi-head attention of ``x`` over ``context`` with a key-padding mask.

    ``scale`` defaults to 1/sqrt(head_dim). The fused kernel is used unless the
    attention weights are requested.
    """

    def __init__(self, D: int, num_heads: int, scale: float | None = None):
        super().__init__()
        if D % num_heads:
            raise ValueError(f"D={D} is not divisible by num_heads={num_heads}")
        self.D, self.num_heads = D, num_heads
        self.head_dim = D // num_heads
        self.scale = scale if scale is not None else self.head_dim ** -0.5
        self.q_proj = nn.Linear(D, D)
        self.k_proj = nn.Linear(D, D)
        self.v_proj = nn.Linear(D, D)
        self.out_proj = nn.Linear(D, D)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        B, n, _ = x.shape
        return x.view(B, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x, context, context_mask=None, need_weights: bool = False):
        if x.shape[-1] != self.D or context.shape[-1] != self.D:
            raise ValueError(f"expected feature dim {self.D}, got {x.shape[-1]} and {context.shape[-1]}")
        B, A, _ = x.shape
        q = self._heads(self.q_proj(x))
        k = self._heads(self.k_proj(context))
        v = self._heads(self.v_proj(context))
        key_mask = None
        if context_mask is not None:
            context_mask = context_mask.bool()
            # a sample with no valid keys attends uniformly; callers zero its rows anyway
            context_mask = context_mask | ~context_mask.any(-1, keepdim=True)
            key_mask = context_mask[:, None, None, :]
        weights = None
        if need_weights:
            logits = (q @ k.transpose(-1, -2)) * self.scale
            weights = masked_softmax(logits, key_mask, dim=-1)
            out = weights @ v
        else:
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=key_mask, scale=self.scale)
        out = out.transpose(1, 2).reshape(B, A, self.D)
        return self.out_proj(out), weights


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + feed-forward block; padded rows stay zero."""

    def __init__(self, D: int, num_heads: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(D)
        self.attn = MultiHeadAttention(D, num_heads)
        self.norm2 = nn.LayerNorm(D)
        self.ffn = nn.Sequential(nn.Linear(D, 2 * D), nn.GELU(), nn.Linear(2 * D, D))
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        m = mask[..., None].to(x.dtype)
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, mask)[0])
        x = x + self.drop(self.ffn(self.norm2(x)))
        return x * m


class VisualEncoder(nn.Module):
    def __init__(self, D_in: int, cfg: EncoderConfig):
        super().__init__()
        self.D_in = D_in
        self.proj = nn.Linear(D_in, cfg.D)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(TransformerBlock(cfg.D, cfg.num_heads, cfg.dropout) for _ in range(cfg.num_layers))

    def forward(self, video: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if video.shape[-1] != self.D_in:
            raise ValueError(f"visual input dim {video.shape[-1]} does not match projection input {self.D_in}")
        m = mask[..., None].to(video.dtype)
        x = self.drop(self.proj(video))
        x = (x + sinusoidal_positions(x.shape[1], x.shape[2], x.dtype)) * m
        for block in self.blocks:
            x = block(x, mask)
        return x


class EmbeddingTable(nn.Module):
    """Word embeddings with reserved pad (zero, untrained) and mask rows."""

    def __init__(self, vocab_size: int, dim: int, frozen: bool = False):
        super().__init__()
        if vocab_size <= MASK_ID:
            raise ValueError("vocabulary must include the reserved pad and mask rows")
        self.vocab_size, self.dim = vocab_size, dim
        self.embedding = nn.Embedding(vocab_size, dim, padding_idx=PAD_ID)
        self.frozen = frozen
        self.embedding.weight.requires_grad_(not frozen)

    @property
    def weights(self) -> torch.Tensor:
        return self.embedding.weight

    def load_vectors(self, path: str | Path, vocab: Vocab) -> int:
        """Copy vectors for tokens present in ``vocab`` from a ``token v1 .. vD`` file."""
        from .pseudoquery import read_embedding_file

        table = read_embedding_file(path)
        hits = 0
        with torch.no_grad():
            for tok, vec in table.items():
                idx = vocab.stoi.get(tok)
                if idx is None or idx == PAD_ID:
                    continue
                if vec.size != self.dim:
                    raise ValueError(f"embedding file dim {vec.size} does not match table dim {self.dim}")
                self.embedding.weight[idx] = torch.as_tensor(vec, dtype=self.embedding.weight.dtype)
                hits += 1
        return hits

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.numel():
            bad = ids[(ids < 0) | (ids >= self.vocab_size)]
            if bad.numel():
                raise IndexError(f"token id {int(bad[0])} is outside the vocabulary (size {self.vocab_size})")
        return self.embedding(ids)


class TextualEncoder(nn.Module):
    def __init__(self, vocab_size: int, cfg: EncoderConfig, frozen_embeddings: bool = False):
        super().__init__()
        self.embed = EmbeddingTable(vocab_size, cfg.embed_dim_in, frozen_embeddings)
        self.proj = nn.Linear(cfg.embed_dim_in, cfg.D)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(TransformerBlock(cfg.D, cfg.num_heads, cfg.dropout) for _ in range(cfg.num_layers))

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        m = mask[..., None]
        x = self.drop(self.proj(self.embed(ids)))
        x = (x + sinusoidal_positions(x.shape[1], x.shape[2], x.dtype)) * m.to(x.dtype)
        for block in self.blocks:
            x = block(x, mask)
        return x


class CrossSimilarity(nn.Module):
    """Frame-to-token similarity ``Softmax(FC(V) FC(Q)^T)`` and the residual update it drives.

    The update uses S for the visual stream and the column-renormalised S^T for the
    query stream, which is the dimensionally consistent reading.
    """

    def __init__(self, D: int):
        super().__init__()
        self.fc_v = nn.Linear(D, D)
        self.fc_q = nn.Linear(D, D)
        self.val_v = nn.Linear(D, D)
        self.val_q = nn.Linear(D, D)

    def forward(self, v, q, q_mask=None):
        logits = self.fc_v(v) @ self.fc_q(q).transpose(-1, -2)
        return masked_softmax(logits, None if q_mask is None else q_mask[:, None, :], dim=-1)

    def update(self, v, q, v_mask, q_mask):
        S = self.forward(v, q, q_mask)
        S = S * v_mask[..., None].to(S.dtype)
        col = S.sum(dim=1, keepdim=True)
        S_t = (S / col.clamp_min(torch.finfo(S.dtype).tiny)).transpose(1, 2)
        v_new = (v + S @ self.val_q(q)) * v_mask[..., None].to(v.dtype)
        q_new = (q + S_t @ self.val_v(v)) * q_mask[..., None].to(q.dtype)
        return v_new, q_new, S


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask[..., None].to(x.dtype)
    n = m.sum(dim=1)
    if (n == 0).any():
        raise ValueError("cannot pool a sequence with no valid rows")
    return (x * m).sum(dim=1) / n
