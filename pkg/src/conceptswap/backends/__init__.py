"""Denoiser backends and the config-driven factory."""

from __future__ import annotations

from typing import Any

from ..errors import ConfigError
from .adapter import DiffusionAdapterBackend, register_adapter_loader
from .base import (
    AttentionRecord,
    DenoiserBackend,
    LayerInfo,
    NoiseSchedule,
    ProjectionSet,
    TextEmbedding,
    add_noise,
)
from .toy import ToyBackend

__all__ = [
    "AttentionRecord",
    "DenoiserBackend",
    "DiffusionAdapterBackend",
    "LayerInfo",
    "NoiseSchedule",
    "ProjectionSet",
    "TextEmbedding",
    "ToyBackend",
    "add_noise",
    "build_backend",
    "register_adapter_loader",
]


def _parse_hot_rects(raw: dict[str, Any]) -> dict[str, tuple[int, int, int, int]]:
    rects: dict[str, tuple[int, int, int, int]] = {}
    for word, coords in raw.items():
        if not isinstance(coords, (list, tuple)) or len(coords) != 4:
            raise ConfigError(
                f"toy_hot_rects[{word!r}] must be [row_min, col_min, row_max, col_max]"
            )
        rects[word] = tuple(int(v) for v in coords)
    return rects


def build_backend(cfg: dict[str, Any]) -> DenoiserBackend:
    """Instantiate the backend a flat config names."""
    kind = cfg.get("backend", "toy")
    if kind == "toy":
        return ToyBackend(
            image_size=cfg.get("toy_image_size", 32),
            seed=cfg.get("toy_seed", 0),
            hot_rects=_parse_hot_rects(cfg.get("toy_hot_rects") or {}),
            self_attention=cfg.get("toy_self_attention", "identity"),
            include_coarse_layer=cfg.get("toy_coarse_layer", False),
            hook_gain=cfg.get("toy_hook_gain", 1e-4),
        )
    if kind == "diffusion-adapter":
        return DiffusionAdapterBackend(
            checkpoint=cfg.get("adapter_checkpoint", ""),
            image_size=cfg.get("adapter_image_size", 512),
            token_limit=cfg.get("adapter_token_limit", 77),
        )
    raise ConfigError(f"unknown backend {kind!r}")
