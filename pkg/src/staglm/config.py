"""Model configuration: the single source of truth for variant selection."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 259
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    total_layers: int = 8
    stacks: int = 2
    weight_sharing: bool = False
    cross_window: Optional[int] = None
    max_seq_len: int = 512
    rope_base: float = 10000.0
    seed: int = 0

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def layers_per_stack(self) -> int:
        # shared-weights mode runs every physical layer in each pass
        return self.total_layers if self.weight_sharing else self.total_layers // self.stacks

    def to_json(self) -> str:
        return json.dumps({"config_version": CONFIG_VERSION, **asdict(self)})


def validate_config(cfg: ModelConfig) -> ModelConfig:
    errs = []
    if cfg.vocab_size < 1:
        errs.append("vocab_size must be >= 1")
    if cfg.d_model < 1 or cfg.n_heads < 1 or cfg.d_model % cfg.n_heads != 0:
        errs.append(f"d_model ({cfg.d_model}) must be a positive multiple of n_heads ({cfg.n_heads})")
    elif cfg.head_dim % 2 != 0:
        errs.append(f"head_dim ({cfg.head_dim}) must be even for rotary embeddings")
    if cfg.d_ff < 1:
        errs.append("d_ff must be >= 1")
    if cfg.total_layers < 1:
        errs.append("total_layers must be >= 1")
    if cfg.stacks < 1:
        errs.append("stacks must be >= 1")
    if not cfg.weight_sharing and cfg.stacks >= 1 and cfg.total_layers % cfg.stacks != 0:
        errs.append(f"total_layers ({cfg.total_layers}) must be divisible by stacks ({cfg.stacks})")
    if cfg.stacks == 1 and cfg.cross_window is not None:
        errs.append("cross_window requires stacks >= 2 (a single stack has no cross-attention)")
    if cfg.cross_window is not None and cfg.cross_window < 1:
        errs.append("cross_window must be >= 1")
    if cfg.max_seq_len < 1:
        errs.append("max_seq_len must be >= 1")
    if errs:
        raise ConfigError("; ".join(errs))
    return cfg


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d.pop("config_version", None)
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = ModelConfig(**d)
    return validate_config(cfg)


def config_from_json(s: str) -> ModelConfig:
    return config_from_dict(json.loads(s))
