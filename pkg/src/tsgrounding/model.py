"""The full grounding network: encoders, PIN branch, prompt pool and PGMF."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import EncoderConfig, TextualEncoder, VisualEncoder, masked_mean
from .objectives import LossWeights, loss_bound, loss_pre, total_loss
from .pgmf import PGMF, PGMFOutput, decode_moment
from .pin import PinParams, contrastive_loss, inject_batch
from .promptpool import PromptPool, PromptRefiner, prepend_prompt


@dataclass
class ModelConfig:
    D_in: int
    vocab_size: int
    D: int = 128
    num_heads: int = 8
    dropout: float = 0.2
    embed_dim: int = 300
    num_layers: int = 1
    N_prompt: int = 2
    pool_size: int = 20
    use_prompt: bool = True
    max_mask_slots: int = 64
    start_layer: int = 1

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.D, self.num_heads, self.dropout, self.embed_dim, self.num_layers)


@dataclass
class Batch:
    video: torch.Tensor
    v_mask: torch.Tensor
    query: torch.Tensor
    q_mask: torch.Tensor
    pq: torch.Tensor | None = None
    pq_mask: torch.Tensor | None = None
    mask_positions: list[list[int]] = field(default_factory=list)
    y_start: torch.Tensor | None = None
    y_end: torch.Tensor | None = None
    y_highlight: torch.Tensor | None = None
    y_match: torch.Tensor | None = None

    def to(self, dtype) -> "Batch":
        conv = {}
        for name in ("video", "y_start", "y_end", "y_highlight", "y_match"):
            val = getattr(self, name)
            conv[name] = None if val is None else val.to(dtype)
        return Batch(**{**self.__dict__, **conv})


@dataclass
class ModelOutput:
    pgmf: PGMFOutput
    v_tilde: torch.Tensor | None = None
    p_tilde: torch.Tensor | None = None
    epsilon: torch.Tensor | None = None
    prompt_index: torch.Tensor | None = None
    l_key: torch.Tensor | None = None


class GroundingModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        enc = cfg.encoder_config()
        self.visual = VisualEncoder(cfg.D_in, enc)
        self.textual = TextualEncoder(cfg.vocab_size, enc)
        self.pin = PinParams(cfg.D, cfg.max_mask_slots)
        self.use_prompt = cfg.use_prompt and cfg.N_prompt > 0
        if self.use_prompt:
            self.pool = PromptPool(cfg.pool_size, cfg.N_prompt, cfg.D)
            self.refiner = PromptRefiner(cfg.D, cfg.num_heads, cfg.dropout)
        self.pgmf = PGMF(cfg.D, cfg.num_heads, cfg.dropout, cfg.start_layer)

    def query_key(self, batch: Batch) -> torch.Tensor:
        """Retrieval key from the ground-truth query (the only key available at test time)."""
        return masked_mean(self.textual(batch.query, batch.q_mask), batch.q_mask)

    def forward(self, batch: Batch, use_pseudo: bool = True) -> ModelOutput:
        v_bar = self.visual(batch.video, batch.v_mask)
        q_bar = self.textual(batch.query, batch.q_mask)
        out = ModelOutput(pgmf=None)

        p_inj = None
        if use_pseudo and batch.pq is not None:
            p_bar = self.textual(batch.pq, batch.pq_mask)
            v_tilde = F.normalize(masked_mean(self.pin.f_theta(v_bar), batch.v_mask), dim=-1)
            p_inj = inject_batch(p_bar, v_tilde, batch.mask_positions, self.pin)
            p_tilde = F.normalize(masked_mean(self.pin.f_sigma(p_inj), batch.pq_mask), dim=-1)
            out.v_tilde, out.p_tilde, out.epsilon = v_tilde, p_tilde, self.pin.epsilon
            key = masked_mean(p_bar, batch.pq_mask)
        else:
            key = masked_mean(q_bar, batch.q_mask)

        q_hat, q_hat_mask = q_bar, batch.q_mask
        if self.use_prompt:
            prompt, idx = self.pool.retrieve(key)
            refined = self.refiner(prompt, p_inj, batch.pq_mask if p_inj is not None else None)
            q_hat, q_hat_mask = prepend_prompt(refined, q_bar, batch.q_mask)
            out.prompt_index = idx
            out.l_key = self.pool.key_pull_loss(idx, key)

        out.pgmf = self.pgmf(v_bar, batch.v_mask, q_hat, q_hat_mask)
        return out

    @torch.no_grad()
    def predict(self, batch: Batch, gamma: float = 1.0):
        """Inference path: no pseudo-queries; returns (start_frames, end_frames, output)."""
        out = self.forward(batch, use_pseudo=False)
        pg = out.pgmf
        starts, ends = decode_moment(pg.p_start, pg.p_end, pg.match_grid, pg.tmap.valid_mask, gamma)
        return starts, ends, out


@dataclass
class LossBreakdown:
    l_pre: torch.Tensor
    l_bound: torch.Tensor
    l_con: torch.Tensor
    l_key: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l_pre", "l_bound", "l_con", "l_key", "total")}


def compute_losses(out: ModelOutput, batch: Batch, weights: LossWeights, lambda_key: float = 0.1) -> LossBreakdown:
    pg = out.pgmf
    l_pre = loss_pre(
        pg.p_start, pg.p_end, pg.p_highlight, batch.y_start, batch.y_end, batch.y_highlight, weights.lambda1, batch.v_mask
    )
    l_bound = loss_bound(pg.p_match, batch.y_match, pg.tmap.cand_mask)
    zero = l_pre.new_zeros(())
    l_con = contrastive_loss(out.v_tilde, out.p_tilde, out.epsilon) if out.v_tilde is not None else zero
    l_key = out.l_key if out.l_key is not None else zero
    total = total_loss(l_pre, l_bound, l_con, weights, l_key, lambda_key if out.l_key is not None else 0.0)
    return LossBreakdown(l_pre, l_bound, l_con, l_key, total)
