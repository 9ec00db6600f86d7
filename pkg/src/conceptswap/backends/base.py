"""Backend contract: what a denoiser must provide for swap optimization.

A backend bundles a text encoder, a noise-prediction network, an image
codec, and a noise schedule. The optimization loop, bbox generation and
regional injection all talk to this interface and never to a concrete
model, so the same pipeline drives the deterministic toy backend in
tests and a latent-diffusion adapter in production.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..errors import ContractError, ShapeError, TimestepError, UnsupportedBackend


@dataclass(frozen=True)
class TextEmbedding:
    """Encoded prompt: one row per token slot, padded to a fixed length.

    token_spans maps each prompt word to the indices of the rows it
    occupies, so callers can slice out the embedding of a single word.
    """

    values: np.ndarray
    token_spans: Mapping[str, tuple[int, ...]]

    def occupied_indices(self) -> list[int]:
        """Sorted indices of rows backed by real tokens (not padding)."""
        out: set[int] = set()
        for span in self.token_spans.values():
            out.update(span)
        return sorted(out)

    def rows_for(self, words: list[str]) -> list[int]:
        """Indices of the rows occupied by the given words, in order."""
        out: list[int] = []
        for word in words:
            out.extend(self.token_spans.get(word, ()))
        return out


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep signal and noise scales, z_t = alpha[t] * z + sigma[t] * eps."""

    alphas: np.ndarray
    sigmas: np.ndarray

    def __post_init__(self):
        if self.alphas.shape != self.sigmas.shape or self.alphas.ndim != 1:
            raise ShapeError(
                f"schedule arrays must be 1-D and equal length, got "
                f"{self.alphas.shape} and {self.sigmas.shape}"
            )
        if len(self.alphas) < 1:
            raise ShapeError("schedule must cover at least one timestep")

    @property
    def t_max(self) -> int:
        return len(self.alphas)

    def _check(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.t_max:
            raise TimestepError(f"t={t} outside [0, {self.t_max})")
        return t

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check(t)])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[self._check(t)])


def add_noise(
    latent: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule
) -> np.ndarray:
    """Forward-diffuse a clean latent to timestep t with the given draw."""
    if latent.shape != eps.shape:
        raise ShapeError(f"latent {latent.shape} vs eps {eps.shape}")
    return schedule.alpha(t) * latent + schedule.sigma(t) * eps


@dataclass(frozen=True)
class LayerInfo:
    """Static description of one cross-attention layer."""

    layer_id: str
    height: int
    width: int
    channels: int

    @property
    def grid(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True)
class ProjectionSet:
    """Q/K/V projection weights of one cross-attention layer.

    wq maps feature channels to the attention width d', wk maps token
    embeddings to d', wv maps token embeddings back to feature channels.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray

    def __post_init__(self):
        if self.wq.ndim != 2 or self.wk.ndim != 2 or self.wv.ndim != 2:
            raise ShapeError("projection weights must be 2-D matrices")
        if self.wq.shape[1] != self.wk.shape[1]:
            raise ShapeError(
                f"wq and wk must share the attention width, got "
                f"{self.wq.shape} and {self.wk.shape}"
            )
        if self.wk.shape[0] != self.wv.shape[0]:
            raise ShapeError(
                f"wk and wv must share the embedding dim, got "
                f"{self.wk.shape} and {self.wv.shape}"
            )

    @property
    def d_prime(self) -> int:
        return self.wq.shape[1]


# A hook receives (layer, input features (h, w, C), dense attention output
# (h, w, C), the layer's projections) and returns a replacement output.
CrossAttentionHook = Callable[
    [LayerInfo, np.ndarray, np.ndarray, ProjectionSet], np.ndarray
]


@dataclass
class AttentionRecord:
    """Attention maps captured during one forward pass.

    cross maps layer_id to an (N, K) array over N spatial positions and
    K token slots; self_attn maps layer_id to (N, N). layer_dims gives
    the (h, w) grid each layer's N positions flatten from.
    """

    cross: dict[str, np.ndarray] = field(default_factory=dict)
    self_attn: dict[str, np.ndarray] = field(default_factory=dict)
    layer_dims: dict[str, tuple[int, int]] = field(default_factory=dict)

    def validate(self, atol: float = 1e-5) -> None:
        """Every attention row must sum to 1 within atol."""
        for kind, maps in (("cross", self.cross), ("self", self.self_attn)):
            for layer_id, arr in maps.items():
                sums = arr.sum(axis=-1)
                if not np.allclose(sums, 1.0, atol=atol):
                    worst = float(np.abs(sums - 1.0).max())
                    raise ContractError(
                        f"{kind} attention rows of {layer_id} sum off by {worst:.2e}"
                    )


class DenoiserBackend(abc.ABC):
    """Everything the swap pipeline needs from a diffusion model."""

    name: str = "abstract"
    supports_hooks: bool = False

    def __init__(self):
        self.forward_count = 0
        self._hooks: dict[tuple[str, str], CrossAttentionHook] = {}

    # -- static metadata ------------------------------------------------

    @property
    @abc.abstractmethod
    def latent_dims(self) -> tuple[int, int, int]:
        """(channels, height, width) of the latent tensor."""

    @property
    @abc.abstractmethod
    def schedule(self) -> NoiseSchedule:
        ...

    @property
    @abc.abstractmethod
    def attention_layers(self) -> list[LayerInfo]:
        ...

    @property
    @abc.abstractmethod
    def token_limit(self) -> int:
        ...

    def layer(self, layer_id: str) -> LayerInfo:
        for info in self.attention_layers:
            if info.layer_id == layer_id:
                return info
        raise ContractError(f"unknown attention layer {layer_id!r}")

    # -- core operations -------------------------------------------------

    @abc.abstractmethod
    def embed(self, prompt: str) -> TextEmbedding:
        """Tokenize and encode a prompt. Empty string is the null prompt."""

    @abc.abstractmethod
    def predict_noise(
        self,
        z_t: np.ndarray,
        t: int,
        cond: TextEmbedding,
        capture: bool = False,
        branch: str | None = None,
    ) -> tuple[np.ndarray, AttentionRecord | None]:
        """One denoiser forward pass.

        branch selects which installed hook set applies; capture asks for
        attention maps from the capture layers.
        """

    @abc.abstractmethod
    def encode(self, image: np.ndarray) -> np.ndarray:
        ...

    @abc.abstractmethod
    def decode(self, latent: np.ndarray) -> np.ndarray:
        ...

    # -- hooks -------------------------------------------------------------

    def install_cross_attention_hook(
        self, branch: str, layer_id: str, fn: CrossAttentionHook
    ) -> None:
        if not self.supports_hooks:
            raise UnsupportedBackend(f"{self.name} backend does not expose hooks")
        self.layer(layer_id)
        self._hooks[(branch, layer_id)] = fn

    def remove_cross_attention_hook(self, branch: str, layer_id: str) -> None:
        if not self.supports_hooks:
            raise UnsupportedBackend(f"{self.name} backend does not expose hooks")
        if self._hooks.pop((branch, layer_id), None) is None:
            raise ContractError(f"no hook installed for {(branch, layer_id)}")

    def hook_for(self, branch: str | None, layer_id: str) -> CrossAttentionHook | None:
        if branch is None:
            return None
        return self._hooks.get((branch, layer_id))

    def installed_hooks(self) -> dict[tuple[str, str], CrossAttentionHook]:
        """Snapshot of the hook table, for locality checks."""
        return dict(self._hooks)
