from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from ..datamodel import ConfigError
from ..model import ModelConfig
from ..objectives import LossWeights


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 5e-4
    grad_clip_norm: float = 1.0
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    K: int = 3
    M_percent: float = 30.0
    N_prompt: int = 2
    pool_size: int = 20
    T: int = 128
    D: int = 128
    num_heads: int = 8
    dropout: float = 0.2
    embed_dim: int = 300
    num_layers: int = 1
    use_prompt: bool = True
    lambda_key: float = 0.1
    lr_schedule: str = "linear"
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    F: int = 16
    gamma: float = 1.0
    extend_ratio: float = 0.25
    t_min: float = 0.5
    t_max: float = 1.0
    start_layer: int = 1
    val_fraction: float = 0.2
    eval_every: int = 1
    max_steps: int | None = None
    target_train_iou7: float | None = None
    save_checkpoints: bool = True

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.betas = tuple(self.betas)
        if self.lr_schedule not in ("linear", "constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        for name in ("epochs", "batch_size", "K", "T", "D", "F"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 <= self.M_percent <= 100:
            raise ConfigError("M_percent must be in [0, 100]")

    @property
    def uses_pseudo_queries(self) -> bool:
        return self.loss_weights.lambda4 > 0 or (self.use_prompt and self.N_prompt > 0)

    def model_config(self, D_in: int, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            D_in=D_in,
            vocab_size=vocab_size,
            D=self.D,
            num_heads=self.num_heads,
            dropout=self.dropout,
            embed_dim=self.embed_dim,
            num_layers=self.num_layers,
            N_prompt=self.N_prompt,
            pool_size=self.pool_size,
            use_prompt=self.use_prompt,
            start_layer=self.start_layer,
        )

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _coerce(value: str) -> Any:
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def apply_overrides(data: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    data = json.loads(json.dumps(data))
    known = {f.name for f in fields(TrainConfig)}
    lw_known = {f.name for f in fields(LossWeights)}
    for key, value in overrides.items():
        if isinstance(value, str):
            value = _coerce(value)
        if key in lw_known:
            data.setdefault("loss_weights", {})[key] = value
        elif key in known:
            data[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return data


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> TrainConfig:
    """JSON config whose keys mirror ``TrainConfig``; lambda1..4 may sit at top level."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    lifted = {k: data.pop(k) for k in list(data) if k in {f.name for f in fields(LossWeights)}}
    data = apply_overrides(data, {**lifted, **(overrides or {})})
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**data)
