"""Attention-derived bounding boxes around the concept to swap.

The source concept is localized by refining cross-attention with
self-attention, averaging the concept token columns into a saliency
map, thresholding, and taking the tight rectangle around the surviving
cells. The rectangle, not the raw mask, is what downstream masking and
regional injection consume: a box is a deliberately loose constraint
that tolerates shape differences between source and target concepts.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

import numpy as np

from .backends.base import DenoiserBackend, add_noise
from .errors import (
    ContractError,
    DegenerateAttention,
    EmptyMask,
    ParamError,
    PromptError,
    ShapeError,
)

if TYPE_CHECKING:  # pragma: no cover
    from .config import SwapConfig


@dataclass(frozen=True)
class BBox:
    """Inclusive rectangle on an (h, w) grid."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int
    grid: tuple[int, int]

    def __post_init__(self):
        h, w = self.grid
        if not (0 <= self.row_min <= self.row_max < h):
            raise ParamError(f"rows [{self.row_min}, {self.row_max}] invalid on grid h={h}")
        if not (0 <= self.col_min <= self.col_max < w):
            raise ParamError(f"cols [{self.col_min}, {self.col_max}] invalid on grid w={w}")

    @property
    def row_slice(self) -> slice:
        return slice(self.row_min, self.row_max + 1)

    @property
    def col_slice(self) -> slice:
        return slice(self.col_min, self.col_max + 1)

    @property
    def height(self) -> int:
        return self.row_max - self.row_min + 1

    @property
    def width(self) -> int:
        return self.col_max - self.col_min + 1

    def mask(self) -> np.ndarray:
        """Boolean (h, w) array, True inside the box."""
        out = np.zeros(self.grid, dtype=bool)
        out[self.row_slice, self.col_slice] = True
        return out

    def to_json(self) -> dict[str, Any]:
        return {
            "row_min": self.row_min,
            "col_min": self.col_min,
            "row_max": self.row_max,
            "col_max": self.col_max,
            "grid": [self.grid[0], self.grid[1]],
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "BBox":
        try:
            return cls(
                row_min=int(obj["row_min"]),
                col_min=int(obj["col_min"]),
                row_max=int(obj["row_max"]),
                col_max=int(obj["col_max"]),
                grid=(int(obj["grid"][0]), int(obj["grid"][1])),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ParamError(f"malformed bbox object: {exc}") from exc


def resize_bbox(bbox: BBox, to_grid: tuple[int, int]) -> BBox:
    """Map a bbox to another grid, rounding outward (floor mins, ceil maxes).

    Outward rounding guarantees the resized box never under-covers the
    region on the coarser grid.
    """
    to_h, to_w = int(to_grid[0]), int(to_grid[1])
    if to_h < 1 or to_w < 1:
        raise ParamError(f"target grid {to_grid} must be positive")
    sy = to_h / bbox.grid[0]
    sx = to_w / bbox.grid[1]
    return BBox(
        row_min=int(np.floor(bbox.row_min * sy)),
        col_min=int(np.floor(bbox.col_min * sx)),
        row_max=min(int(np.ceil(bbox.row_max * sy)), to_h - 1),
        col_max=min(int(np.ceil(bbox.col_max * sx)), to_w - 1),
        grid=(to_h, to_w),
    )


@dataclass(frozen=True)
class SaliencyMap:
    """Spatial concept-activation map; normalized means min 0, max 1."""

    values: np.ndarray
    normalized: bool


def refine_attention(
    self_map: np.ndarray,
    cross_map: np.ndarray,
    alpha: float,
    mode: str = "matmul",
) -> np.ndarray:
    """Sharpen cross-attention and propagate it along self-attention.

    The cross map is raised elementwise to alpha (suppressing weak
    activations), then multiplied by the self map. mode selects matrix
    product (default: self-attention spreads activation across related
    positions) or a strict same-shape elementwise product.
    """
    if alpha < 1:
        raise ParamError(f"alpha must be >= 1, got {alpha}")
    if self_map.ndim != 2 or self_map.shape[0] != self_map.shape[1]:
        raise ShapeError(f"self map must be square, got {self_map.shape}")
    if cross_map.ndim != 2 or cross_map.shape[0] != self_map.shape[0]:
        raise ShapeError(
            f"cross map {cross_map.shape} incompatible with self map {self_map.shape}"
        )
    powered = np.power(cross_map, alpha)
    if mode == "matmul":
        return self_map @ powered
    if mode == "elementwise":
        if self_map.shape != cross_map.shape:
            raise ShapeError(
                "elementwise refinement needs equal shapes, got "
                f"{self_map.shape} and {cross_map.shape}"
            )
        return self_map * powered
    raise ParamError(f"unknown refinement mode {mode!r}")


def token_saliency(
    refined: np.ndarray,
    token_indices: list[int],
    layer_dims: tuple[int, int],
) -> SaliencyMap:
    """Average the given token columns and min-max normalize spatially.

    Constant maps cannot be normalized and come back flagged
    normalized=False; callers decide whether that is fatal.
    """
    if len(token_indices) == 0:
        raise ParamError("token index list is empty")
    h, w = layer_dims
    if h * w != refined.shape[0]:
        raise ShapeError(f"{refined.shape[0]} positions do not fill a {h}x{w} grid")
    cols = np.asarray(token_indices)
    if cols.min() < 0 or cols.max() >= refined.shape[1]:
        raise ParamError(f"token indices {token_indices} out of range for K={refined.shape[1]}")
    sal = refined[:, cols].mean(axis=1).reshape(h, w)
    lo = float(sal.min())
    hi = float(sal.max())
    if hi - lo <= 1e-12:
        return SaliencyMap(values=sal, normalized=False)
    return SaliencyMap(values=(sal - lo) / (hi - lo), normalized=True)


def threshold_mask(sal: SaliencyMap, beta: float) -> np.ndarray:
    """Cells at or above beta. Degenerate maps are an error, never a full-image mask."""
    if not 0 < beta < 1:
        raise ParamError(f"beta must lie in (0,1), got {beta}")
    if not sal.normalized:
        raise DegenerateAttention("saliency map is constant; cannot threshold")
    return sal.values >= beta


def mask_to_bbox(mask: np.ndarray) -> BBox:
    """Tight rectangle over all foreground cells."""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise EmptyMask("no foreground cells above threshold")
    return BBox(
        row_min=int(rows.min()),
        col_min=int(cols.min()),
        row_max=int(rows.max()),
        col_max=int(cols.max()),
        grid=(mask.shape[0], mask.shape[1]),
    )


def bilinear_resize(values: np.ndarray, to_grid: tuple[int, int]) -> np.ndarray:
    """Bilinear resample with corner alignment; identity when grids match."""
    h, w = values.shape
    to_h, to_w = to_grid
    if (h, w) == (to_h, to_w):
        return values
    rows = np.linspace(0.0, h - 1, to_h) if to_h > 1 else np.zeros(1)
    cols = np.linspace(0.0, w - 1, to_w) if to_w > 1 else np.zeros(1)
    r0 = np.clip(np.floor(rows).astype(int), 0, h - 1)
    r1 = np.clip(r0 + 1, 0, h - 1)
    c0 = np.clip(np.floor(cols).astype(int), 0, w - 1)
    c1 = np.clip(c0 + 1, 0, w - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    top = values[np.ix_(r0, c0)] * (1 - fc) + values[np.ix_(r0, c1)] * fc
    bot = values[np.ix_(r1, c0)] * (1 - fc) + values[np.ix_(r1, c1)] * fc
    return top * (1 - fr) + bot * fr


def _fused_saliency(
    source: np.ndarray,
    source_prompt: str,
    concept_word: str,
    cfg: "SwapConfig",
    backend: DenoiserBackend,
    rng: np.random.Generator | None,
) -> SaliencyMap:
    words = concept_word.split()
    if not words:
        raise PromptError("concept word is empty")
    prompt_words = source_prompt.split()
    missing = [w for w in words if w not in prompt_words]
    if missing:
        raise PromptError(
            f"concept word(s) {missing} do not occur in prompt {source_prompt!r}"
        )
    emb = backend.embed(source_prompt)
    indices = emb.rows_for(words)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    lat_grid = (backend.latent_dims[1], backend.latent_dims[2])
    acc = np.zeros(lat_grid)
    n_used = 0
    for t in cfg.bbox_timesteps:
        eps = rng.standard_normal(source.shape)
        z_t = add_noise(source, int(t), eps, backend.schedule)
        _, record = backend.predict_noise(z_t, int(t), emb, capture=True)
        if record is None:
            raise ContractError("backend returned no attention record under capture")
        record.validate()
        for layer_id, cross in record.cross.items():
            refined = refine_attention(
                record.self_attn[layer_id], cross, cfg.alpha, mode=cfg.attn_refine
            )
            sal = token_saliency(refined, indices, record.layer_dims[layer_id])
            if not sal.normalized:
                continue  # a constant layer carries no location signal
            acc += bilinear_resize(sal.values, lat_grid)
            n_used += 1
    if n_used == 0:
        return SaliencyMap(values=acc, normalized=False)
    fused = acc / n_used
    lo = float(fused.min())
    hi = float(fused.max())
    if hi - lo <= 1e-12:
        return SaliencyMap(values=fused, normalized=False)
    return SaliencyMap(values=(fused - lo) / (hi - lo), normalized=True)


def generate_bbox_with_saliency(
    source: np.ndarray,
    source_prompt: str,
    concept_word: str,
    cfg: "SwapConfig",
    backend: DenoiserBackend,
    rng: np.random.Generator | None = None,
) -> tuple[BBox, SaliencyMap]:
    """generate_bbox plus the fused saliency map, for inspection dumps."""
    sal = _fused_saliency(source, source_prompt, concept_word, cfg, backend, rng)
    mask = threshold_mask(sal, cfg.beta)
    return mask_to_bbox(mask), sal


def generate_bbox(
    source: np.ndarray,
    source_prompt: str,
    concept_word: str,
    cfg: "SwapConfig",
    backend: DenoiserBackend,
    rng: np.random.Generator | None = None,
) -> BBox:
    """Localize the concept in the source latent.

    Runs three capture forward passes on the noised source latent at
    the configured timesteps, fuses refined saliency across passes and
    capture layers (bilinear-upsampled to the latent grid, averaged,
    re-normalized), thresholds at beta and boxes the result.
    """
    box, _ = generate_bbox_with_saliency(
        source, source_prompt, concept_word, cfg, backend, rng
    )
    return box
