"""Shared types, model configuration and validation."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from typing import Mapping, NamedTuple

import numpy as np
import torch

MAX_STRIDE = 32


class ConfigError(ValueError):
    """Raised when a configuration value violates an invariant."""


@dataclass(frozen=True)
class ModelConfig:
    backbone_id: str = "res2net50"
    squeeze_channels: int = 32
    reduction_ratio: int = 4
    min_reduced_dim: int = 16
    use_lfm_ssfm: bool = True
    use_lfm_bwm: bool = True
    use_hfm: bool = True
    use_ssfm: bool = True
    use_pam: bool = True
    use_pa_ra: bool = True
    use_pa_ba: bool = True
    use_bwm: bool = True
    train_size: int = 352

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return format_kv(dataclasses.asdict(self))

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                kwargs[f.name] = coerce_value(values[f.name], type(f.default), f.name)
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_mapping(parse_kv(text))


def validate_config(cfg: ModelConfig) -> ModelConfig:
    """Return ``cfg`` unchanged, or raise :class:`ConfigError` naming the bad field."""
    for name in ("squeeze_channels", "reduction_ratio", "min_reduced_dim", "train_size"):
        value = getattr(cfg, name)
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    if cfg.train_size % MAX_STRIDE:
        raise ConfigError(f"train_size must be divisible by {MAX_STRIDE}, got {cfg.train_size}")
    if cfg.use_pam and not (cfg.use_pa_ra or cfg.use_pa_ba):
        raise ConfigError("use_pa_ra/use_pa_ba: at least one branch is required when use_pam is set")
    if not (cfg.use_lfm_ssfm or cfg.use_hfm):
        raise ConfigError("use_lfm_ssfm/use_hfm: the guidance map needs at least one input branch")
    if cfg.use_ssfm and not (cfg.use_lfm_ssfm and cfg.use_hfm):
        raise ConfigError("use_ssfm requires both use_lfm_ssfm and use_hfm")
    if cfg.use_pam and cfg.use_pa_ra and cfg.use_pa_ba and cfg.squeeze_channels % 2:
        raise ConfigError("squeeze_channels must be even when both attention branches are enabled")
    return cfg


def reduced_dim(C: int, r: int, L: int) -> int:
    """Width of the dense selection descriptor: ``max(ceil(C / r), L)``."""
    if min(C, r, L) < 1:
        raise ValueError("C, r and L must all be >= 1")
    return max(-(-C // r), L)


# -- flat ``key = value`` text files ---------------------------------------

def format_kv(values: Mapping[str, object]) -> str:
    lines = []
    for key, value in values.items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        values[key] = value
    return values


def coerce_value(value: object, kind: type, name: str):
    if not isinstance(value, str):
        return value
    try:
        if kind is bool:
            lowered = value.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {value!r} as {kind.__name__}") from None
    return value


# -- array-backed domain types ---------------------------------------------

class MultiScaleFeatures(NamedTuple):
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor
    f5: torch.Tensor


def feature_sizes(size: int, strides=(2, 4, 8, 16, 32)) -> list[int]:
    return [math.ceil(size / s) for s in strides]


def check_image_batch(batch: torch.Tensor) -> torch.Tensor:
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ValueError(f"image batch must have shape (B, 3, H, W), got {tuple(batch.shape)}")
    h, w = batch.shape[-2:]
    if h % MAX_STRIDE or w % MAX_STRIDE:
        raise ValueError(f"image height and width must be divisible by {MAX_STRIDE}, got {h}x{w}")
    if not torch.isfinite(batch).all():
        raise ValueError("image batch contains non-finite values")
    return batch


def as_binary_mask(mask) -> np.ndarray:
    """Validate a 2-D ground-truth mask and return it as a bool array."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
    if arr.dtype != bool:
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        arr = arr.astype(bool)
    return arr


def as_prob_map(pred) -> np.ndarray:
    """Validate a 2-D probability map and return it as float64."""
    arr = np.asarray(pred, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"probability map must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all() or arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
        raise ValueError("probability map values must lie in [0, 1]")
    return arr
