"""Model configuration and named presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .errors import ConfigError

TEMPORAL_MODES = ("none", "causal", "bidirectional")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    lora_rank: int = 8
    max_frames: int = 512
    proj_dim: int = 32
    ffn_mult: int = 4
    temporal_mode: str = "causal"
    dtype: str = "float32"

    def __post_init__(self):
        for f in fields(self):
            if f.type == "int" and (not isinstance(getattr(self, f.name), int) or getattr(self, f.name) <= 0):
                raise ConfigError(f"{f.name} must be a positive integer, got {getattr(self, f.name)!r}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0 < self.lora_rank < self.d_model:
            raise ConfigError(f"lora_rank must lie in (0, d_model), got {self.lora_rank}")
        if self.temporal_mode not in TEMPORAL_MODES:
            raise ConfigError(f"temporal_mode must be one of {TEMPORAL_MODES}, got {self.temporal_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, str]:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, items: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        known = {f.name: f.type for f in fields(cls)}
        for key, raw in items.items():
            if key not in known:
                raise ConfigError(f"unknown model config key {key!r}")
            try:
                kwargs[key] = int(raw) if known[key] == "int" else str(raw)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        return cls(**kwargs)


PRESETS: dict[str, ModelConfig] = {
    "desk": ModelConfig(),
    # reference scale: ViT-B/16 at 224px, LoRA rank 32
    "base": ModelConfig(
        image_size=224,
        patch_size=16,
        d_model=768,
        n_layers=12,
        n_heads=12,
        lora_rank=32,
        max_frames=4096,
        proj_dim=768,
        ffn_mult=4,
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return base.replace(**overrides) if overrides else base
