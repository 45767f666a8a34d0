"""Learnable pool of pseudo-query prompts with key-based top-1 retrieval."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import MultiHeadAttention


class PromptPool(nn.Module):
    def __init__(self, pool_size: int, N: int, D: int, key_std: float = 1.0, prompt_std: float = 0.02):
        super().__init__()
        if pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        self.pool_size, self.N, self.D = pool_size, N, D
        self.keys = nn.Parameter(torch.randn(pool_size, D) * key_std)
        self.prompts = nn.Parameter(torch.randn(pool_size, N, D) * prompt_std)

    def scores(self, key_feat: torch.Tensor) -> torch.Tensor:
        return F.normalize(key_feat, dim=-1) @ F.normalize(self.keys, dim=-1).T

    def retrieve(self, key_feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Prompt with the highest key cosine; ties go to the lowest index."""
        if not torch.isfinite(key_feat).all():
            raise ValueError("retrieval key is not finite")
        single = key_feat.ndim == 1
        k = key_feat[None] if single else key_feat
        with torch.no_grad():
            idx = self.scores(k.detach()).argmax(dim=-1)  # argmax returns the first maximum
        prompts = self.prompts[idx]
        return (prompts[0], idx[0]) if single else (prompts, idx)

    def key_pull_loss(self, idx: torch.Tensor, key_feat: torch.Tensor) -> torch.Tensor:
        """Mean ``1 - cos(selected key, key_feat)``; the query side is not trained by this term."""
        return (1 - F.cosine_similarity(self.keys[idx], key_feat.detach(), dim=-1)).mean()


class PromptRefiner(nn.Module):
    """Single self-attention layer over ``[prompt; pseudo-query]``; returns the prompt rows."""

    def __init__(self, D: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        self.norm = nn.LayerNorm(D)
        self.attn = MultiHeadAttention(D, num_heads)
        self.drop = nn.Dropout(dropout)

    def forward(self, prompt, p_feat=None, p_mask=None, need_weights: bool = False):
        B, N, _ = prompt.shape
        ones = torch.ones(B, N, dtype=torch.bool, device=prompt.device)
        if p_feat is None or p_feat.shape[1] == 0:
            seq, mask = prompt, ones
        else:
            seq = torch.cat([prompt, p_feat], dim=1)
            mask = torch.cat([ones, p_mask.bool()], dim=1)
        h = self.norm(seq)
        out, weights = self.attn(h, h, mask, need_weights=need_weights)
        refined = (seq + self.drop(out))[:, :N]
        return (refined, weights) if need_weights else refined


def prepend_prompt(prompt: torch.Tensor, q_feat: torch.Tensor, q_mask: torch.Tensor):
    """``[prompt; Q]`` with the prompt rows always valid."""
    B, N = prompt.shape[0], prompt.shape[1]
    if N == 0:
        return q_feat, q_mask
    ones = torch.ones(B, N, dtype=torch.bool, device=q_mask.device)
    return torch.cat([prompt, q_feat], dim=1), torch.cat([ones, q_mask.bool()], dim=1)
