"""Deterministic closed-form backend for CPU tests and demos.

The toy denoiser predicts noise = z_t - pattern(prompt), where the
pattern is a seeded pseudo-random array keyed by a digest of the
prompt embedding. That makes every distillation quantity analytic:
optimizing toward a prompt converges to its pattern, two branches
cancel exactly when their inputs agree, and attention maps carry a
planted hot rectangle per concept word so bbox recovery has a known
ground truth.

The noise schedule is variance-exploding: alpha is 1 everywhere, sigma
ramps from 0. Consistency with z_t = alpha*z + sigma*eps holds by
convention, and the added noise cancels identically in two-branch
gradients, which keeps the fixed points exact instead of stochastic.

Cross-attention hooks are supported per branch; a hook's effect enters
the prediction through a small linear lift with strictly local spatial
support, so hook changes inside a box move the prediction only inside
that box (at the default latent-resolution layers).
"""

from __future__ import annotations

import hashlib
from typing import Mapping

import numpy as np

from ..bbox import BBox, resize_bbox
from ..errors import ShapeError, TokenLimitExceeded
from ..secr import dense_cross_attention, FeatureMap
from .base import (
    AttentionRecord,
    DenoiserBackend,
    LayerInfo,
    NoiseSchedule,
    ProjectionSet,
    TextEmbedding,
)

_PAD_WORD = "\x00pad"


def _seed_from(text: str) -> int:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class ToyBackend(DenoiserBackend):
    name = "toy"
    supports_hooks = True

    def __init__(
        self,
        image_size: int = 32,
        embed_dim: int = 16,
        seq_len: int = 12,
        seed: int = 0,
        hot_rects: Mapping[str, tuple[int, int, int, int]] | None = None,
        hot_affinity: float = 12.0,
        cold_affinity: float = 0.2,
        self_attention: str = "identity",
        include_coarse_layer: bool = False,
        feature_channels: int = 6,
        attn_width: int = 6,
        hook_gain: float = 1e-4,
        t_max: int = 1000,
        sigma_max: float = 6.0,
    ):
        super().__init__()
        if image_size < 4 or image_size % 2 != 0:
            raise ShapeError(f"image_size must be even and >= 4, got {image_size}")
        if self_attention not in ("identity", "uniform", "local"):
            raise ShapeError(f"unknown self_attention mode {self_attention!r}")
        self.image_size = image_size
        self.embed_dim = embed_dim
        self.seq_len = seq_len
        self.hot_rects = dict(hot_rects or {})
        self.hot_affinity = float(hot_affinity)
        self.cold_affinity = float(cold_affinity)
        self.self_attention = self_attention
        self.hook_gain = float(hook_gain)
        lat = image_size // 2
        self._latent_dims = (4, lat, lat)
        sigmas = np.linspace(0.0, sigma_max, t_max)
        self._schedule = NoiseSchedule(alphas=np.ones(t_max), sigmas=sigmas)

        layers = [
            LayerInfo("attn0", lat, lat, feature_channels),
            LayerInfo("attn1", lat, lat, feature_channels),
        ]
        if include_coarse_layer:
            if lat % 2 != 0:
                raise ShapeError(f"coarse layer needs an even latent size, got {lat}")
            layers.append(LayerInfo("attn2_coarse", lat // 2, lat // 2, feature_channels))
        self._layers = layers

        # Per-layer weights, all drawn once from the instance seed.
        rng = np.random.default_rng(seed)
        self._w_feat: dict[str, np.ndarray] = {}
        self._proj: dict[str, ProjectionSet] = {}
        self._w_out: dict[str, np.ndarray] = {}
        for info in layers:
            c = info.channels
            self._w_feat[info.layer_id] = rng.standard_normal((4, c)) / np.sqrt(4)
            self._proj[info.layer_id] = ProjectionSet(
                wq=rng.standard_normal((c, attn_width)) / np.sqrt(c),
                wk=rng.standard_normal((embed_dim, attn_width)) / np.sqrt(embed_dim),
                wv=rng.standard_normal((embed_dim, c)) / np.sqrt(embed_dim),
            )
            self._w_out[info.layer_id] = rng.standard_normal((c, 4)) / np.sqrt(c)

        self._word_vecs: dict[str, np.ndarray] = {}
        self._patterns: dict[str, np.ndarray] = {}
        self._pattern_overrides: dict[str, np.ndarray] = {}

    # -- metadata ----------------------------------------------------------

    @property
    def latent_dims(self) -> tuple[int, int, int]:
        return self._latent_dims

    @property
    def latent_grid(self) -> tuple[int, int]:
        return (self._latent_dims[1], self._latent_dims[2])

    @property
    def schedule(self) -> NoiseSchedule:
        return self._schedule

    @property
    def attention_layers(self) -> list[LayerInfo]:
        return list(self._layers)

    @property
    def capture_layer_ids(self) -> list[str]:
        return [info.layer_id for info in self._layers]

    @property
    def token_limit(self) -> int:
        return self.seq_len

    def projections(self, layer_id: str) -> ProjectionSet:
        return self._proj[layer_id]

    # -- text --------------------------------------------------------------

    def _word_vector(self, word: str) -> np.ndarray:
        vec = self._word_vecs.get(word)
        if vec is None:
            vec = np.random.default_rng(_seed_from("word:" + word)).standard_normal(
                self.embed_dim
            )
            self._word_vecs[word] = vec
        return vec

    def embed(self, prompt: str) -> TextEmbedding:
        """One token per whitespace word, padded to seq_len rows."""
        words = prompt.split()
        if len(words) > self.seq_len:
            raise TokenLimitExceeded(
                f"{len(words)} words exceed the limit of {self.seq_len}"
            )
        values = np.empty((self.seq_len, self.embed_dim))
        spans: dict[str, tuple[int, ...]] = {}
        for i, word in enumerate(words):
            values[i] = self._word_vector(word)
            spans[word] = spans.get(word, ()) + (i,)
        pad = self._word_vector(_PAD_WORD)
        for i in range(len(words), self.seq_len):
            values[i] = pad
        values.flags.writeable = False
        return TextEmbedding(values=values, token_spans=spans)

    # -- patterns ------------------------------------------------------------

    def _digest(self, cond: TextEmbedding) -> str:
        return hashlib.sha256(np.ascontiguousarray(cond.values).tobytes()).hexdigest()

    def pattern(self, cond: TextEmbedding) -> np.ndarray:
        """The clean-latent target the denoiser steers toward for this prompt."""
        key = self._digest(cond)
        override = self._pattern_overrides.get(key)
        if override is not None:
            return override
        cached = self._patterns.get(key)
        if cached is None:
            rng = np.random.default_rng(_seed_from("pattern:" + key))
            cached = 0.5 * rng.standard_normal(self._latent_dims)
            cached.flags.writeable = False
            self._patterns[key] = cached
        return cached

    def pattern_for_prompt(self, prompt: str) -> np.ndarray:
        return self.pattern(self.embed(prompt))

    def set_pattern(self, prompt: str, values: np.ndarray) -> None:
        """Pin the pattern for a prompt; test oracles use this."""
        if values.shape != self._latent_dims:
            raise ShapeError(f"pattern shape {values.shape} != {self._latent_dims}")
        pinned = np.array(values, dtype=float)
        pinned.flags.writeable = False
        self._pattern_overrides[self._digest(self.embed(prompt))] = pinned

    # -- codec ---------------------------------------------------------------

    def encode(self, image: np.ndarray) -> np.ndarray:
        """Space-to-depth: 2x2 pixel blocks become the 4 latent channels."""
        if image.ndim != 2 or image.shape != (self.image_size, self.image_size):
            raise ShapeError(
                f"toy backend takes {self.image_size}x{self.image_size} grayscale "
                f"images, got {image.shape}"
            )
        z = np.empty(self._latent_dims)
        z[0] = image[0::2, 0::2]
        z[1] = image[0::2, 1::2]
        z[2] = image[1::2, 0::2]
        z[3] = image[1::2, 1::2]
        return z

    def decode(self, latent: np.ndarray) -> np.ndarray:
        if latent.shape != self._latent_dims:
            raise ShapeError(f"latent shape {latent.shape} != {self._latent_dims}")
        image = np.empty((self.image_size, self.image_size))
        image[0::2, 0::2] = latent[0]
        image[0::2, 1::2] = latent[1]
        image[1::2, 0::2] = latent[2]
        image[1::2, 1::2] = latent[3]
        return image

    # -- attention synthesis ---------------------------------------------------

    def _features(self, z_t: np.ndarray, info: LayerInfo) -> np.ndarray:
        k = self.latent_grid[0] // info.height
        pooled = z_t
        if k > 1:
            c, h, w = z_t.shape
            pooled = z_t.reshape(c, info.height, k, info.width, k).mean(axis=(2, 4))
        return np.einsum("chw,cf->hwf", pooled, self._w_feat[info.layer_id])

    def _synth_cross(self, info: LayerInfo, cond: TextEmbedding) -> np.ndarray:
        n = info.height * info.width
        affinity = np.ones((n, self.seq_len))
        for word, span in cond.token_spans.items():
            rect = self.hot_rects.get(word)
            if rect is None:
                continue
            box = resize_bbox(
                BBox(rect[0], rect[1], rect[2], rect[3], grid=self.latent_grid),
                info.grid,
            )
            inside = box.mask().ravel()
            for idx in span:
                affinity[:, idx] = np.where(inside, self.hot_affinity, self.cold_affinity)
        return affinity / affinity.sum(axis=1, keepdims=True)

    def _synth_self(self, info: LayerInfo) -> np.ndarray:
        n = info.height * info.width
        if self.self_attention == "identity":
            return np.eye(n)
        if self.self_attention == "uniform":
            return np.full((n, n), 1.0 / n)
        # local: self weight plus equal mass on 4-neighborhood
        h, w = info.grid
        out = np.zeros((n, n))
        for r in range(h):
            for c in range(w):
                i = r * w + c
                neighbors = [
                    (r + dr, c + dc)
                    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1))
                    if 0 <= r + dr < h and 0 <= c + dc < w
                ]
                out[i, i] = 0.6
                for nr, nc in neighbors:
                    out[i, nr * w + nc] = 0.4 / len(neighbors)
        return out

    # -- forward -----------------------------------------------------------------

    def predict_noise(
        self,
        z_t: np.ndarray,
        t: int,
        cond: TextEmbedding,
        capture: bool = False,
        branch: str | None = None,
    ) -> tuple[np.ndarray, AttentionRecord | None]:
        if z_t.shape != self._latent_dims:
            raise ShapeError(f"latent shape {z_t.shape} != {self._latent_dims}")
        if cond.values.shape != (self.seq_len, self.embed_dim):
            raise ShapeError(
                f"embedding shape {cond.values.shape} != {(self.seq_len, self.embed_dim)}"
            )
        self._schedule.alpha(t)  # validates the timestep range
        noise = z_t - self.pattern(cond)
        for info in self._layers:
            hook = self.hook_for(branch, info.layer_id)
            if hook is None:
                continue
            feat = self._features(z_t, info)
            proj = self._proj[info.layer_id]
            dense = dense_cross_attention(
                FeatureMap(feat, info.layer_id), cond.values, proj
            ).values
            hooked = hook(info, feat, dense, proj)
            if hooked.shape != dense.shape:
                raise ShapeError(
                    f"hook on {info.layer_id} returned {hooked.shape}, "
                    f"expected {dense.shape}"
                )
            delta = np.einsum("hwf,fc->chw", hooked - dense, self._w_out[info.layer_id])
            k = self.latent_grid[0] // info.height
            if k > 1:
                delta = delta.repeat(k, axis=1).repeat(k, axis=2)
            noise = noise - self.hook_gain * delta
        record = None
        if capture:
            record = AttentionRecord()
            for info in self._layers:
                record.cross[info.layer_id] = self._synth_cross(info, cond)
                record.self_attn[info.layer_id] = self._synth_self(info)
                record.layer_dims[info.layer_id] = info.grid
        self.forward_count += 1
        return noise, record
