"""Adapter contract for a real latent-diffusion backend.

This module declares how model weights plug in; it never loads any.
Static metadata (latent dims, token limit) is available immediately so
configs validate and benchmarks can be planned, while every operation
that needs the actual network raises UnsupportedBackend until a loader
is registered. A loader receives the checkpoint reference and returns
an object implementing the DenoiserBackend operations; production
deployments register one at import time, test environments never do.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ConfigError, UnsupportedBackend
from .base import (
    AttentionRecord,
    DenoiserBackend,
    LayerInfo,
    NoiseSchedule,
    TextEmbedding,
)

# checkpoint reference -> loaded model; registered by deployment code.
AdapterLoader = Callable[[str], DenoiserBackend]

_LOADERS: dict[str, AdapterLoader] = {}


def register_adapter_loader(name: str, loader: AdapterLoader) -> None:
    _LOADERS[name] = loader


def registered_loaders() -> list[str]:
    return sorted(_LOADERS)


class DiffusionAdapterBackend(DenoiserBackend):
    """Latent-diffusion backend behind a declared loading seam.

    Default metadata mirrors the SD 2.1 deployment this toolkit
    targets: 512x512 images, 4x64x64 latents (8x spatial downsample),
    77-token prompts. A DreamBooth checkpoint carrying the customized
    concept is referenced by path and consumed opaquely.
    """

    name = "diffusion-adapter"

    def __init__(
        self,
        checkpoint: str = "",
        image_size: int = 512,
        latent_channels: int = 4,
        downsample_factor: int = 8,
        token_limit: int = 77,
        loader_name: str = "",
    ):
        super().__init__()
        if image_size % downsample_factor != 0:
            raise ConfigError(
                f"image_size {image_size} not divisible by {downsample_factor}"
            )
        self.checkpoint = checkpoint
        self.image_size = image_size
        self._token_limit = token_limit
        self._latent_dims = (
            latent_channels,
            image_size // downsample_factor,
            image_size // downsample_factor,
        )
        self._loader_name = loader_name
        self._model: DenoiserBackend | None = None

    # -- metadata, available without weights --------------------------------

    @property
    def latent_dims(self) -> tuple[int, int, int]:
        return self._latent_dims

    @property
    def token_limit(self) -> int:
        return self._token_limit

    @property
    def supports_hooks(self) -> bool:  # type: ignore[override]
        return self._model is not None and self._model.supports_hooks

    # -- loading seam --------------------------------------------------------

    def _require_model(self) -> DenoiserBackend:
        if self._model is not None:
            return self._model
        loader = _LOADERS.get(self._loader_name or "default")
        if loader is None:
            raise UnsupportedBackend(
                "diffusion-adapter has no model loader registered; install a "
                "deployment package that calls register_adapter_loader(), or "
                "use the toy backend"
            )
        self._model = loader(self.checkpoint)
        return self._model

    # -- delegated operations --------------------------------------------------

    @property
    def schedule(self) -> NoiseSchedule:
        return self._require_model().schedule

    @property
    def attention_layers(self) -> list[LayerInfo]:
        return self._require_model().attention_layers

    @property
    def capture_layer_ids(self) -> list[str]:
        return self._require_model().capture_layer_ids

    def embed(self, prompt: str) -> TextEmbedding:
        return self._require_model().embed(prompt)

    def predict_noise(
        self,
        z_t: np.ndarray,
        t: int,
        cond: TextEmbedding,
        capture: bool = False,
        branch: str | None = None,
    ) -> tuple[np.ndarray, AttentionRecord | None]:
        out = self._require_model().predict_noise(z_t, t, cond, capture, branch)
        self.forward_count += 1
        return out

    def encode(self, image: np.ndarray) -> np.ndarray:
        return self._require_model().encode(image)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        return self._require_model().decode(latent)

    def install_cross_attention_hook(self, branch, layer_id, fn) -> None:
        model = self._require_model()
        model.install_cross_attention_hook(branch, layer_id, fn)

    def remove_cross_attention_hook(self, branch, layer_id) -> None:
        model = self._require_model()
        model.remove_cross_attention_hook(branch, layer_id)

    def hook_for(self, branch, layer_id):
        if self._model is None:
            return None
        return self._model.hook_for(branch, layer_id)

    def installed_hooks(self):
        if self._model is None:
            return {}
        return self._model.installed_hooks()
