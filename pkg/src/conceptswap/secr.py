"""Regional semantic injection into cross-attention layers.

Inside the concept bbox, a layer's cross-attention output is replaced
by attention computed between the cropped image features and the
concept's own text embedding, using that layer's projection weights.
Everything outside the box passes through untouched, so the injection
is exactly as local as the box that bounds it. Hooks install the
replacement per branch (source or target) on a backend.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .backends.base import (
    DenoiserBackend,
    LayerInfo,
    ProjectionSet,
    TextEmbedding,
)
from .bbox import BBox, resize_bbox
from .errors import ParamError, ShapeError, UnsupportedBackend

__all__ = [
    "FeatureMap",
    "ProjectionSet",
    "resize_bbox",
    "concept_rows",
    "regional_cross_attention",
    "dense_cross_attention",
    "install_secr",
    "SecrHandle",
]


@dataclass(frozen=True)
class FeatureMap:
    """One layer's spatial feature tensor, (h, w, channels)."""

    values: np.ndarray
    layer_id: str = ""

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ShapeError(f"feature map must be (h, w, c), got {self.values.shape}")
        if min(self.values.shape[:2]) < 1:
            raise ShapeError(f"feature map has empty spatial dims {self.values.shape}")

    @property
    def grid(self) -> tuple[int, int]:
        return (self.values.shape[0], self.values.shape[1])


def softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def concept_rows(emb: TextEmbedding) -> np.ndarray:
    """Embedding rows that carry the concept.

    Only the token span of the concept words matters, never a full
    sentence. A null prompt has no occupied rows; its padded sequence
    itself is the semantic input then (used by removal).
    """
    idx = emb.occupied_indices()
    if idx:
        return emb.values[idx]
    return emb.values


def _as_rows(concept: TextEmbedding | np.ndarray) -> np.ndarray:
    if isinstance(concept, TextEmbedding):
        return concept_rows(concept)
    rows = np.asarray(concept)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ShapeError(f"concept rows must be (k, embed_dim), got {rows.shape}")
    return rows


def _check_proj(channels: int, rows: np.ndarray, proj: ProjectionSet) -> None:
    if proj.wq.shape[0] != channels:
        raise ShapeError(
            f"wq expects {proj.wq.shape[0]} channels, features have {channels}"
        )
    if proj.wk.shape[0] != rows.shape[1]:
        raise ShapeError(
            f"wk expects embed dim {proj.wk.shape[0]}, concept rows have {rows.shape[1]}"
        )
    if proj.wv.shape[1] != channels:
        raise ShapeError(
            f"wv produces width {proj.wv.shape[1]}, features have {channels} channels"
        )


def region_attention(
    feat_values: np.ndarray, box: BBox, rows: np.ndarray, proj: ProjectionSet
) -> np.ndarray:
    """Attention output for the cropped region only, shape (bh, bw, channels).

    Q comes from the cropped features, K and V from the concept rows;
    the attention matrix is row-stochastic by construction.
    """
    channels = feat_values.shape[2]
    _check_proj(channels, rows, proj)
    crop = feat_values[box.row_slice, box.col_slice, :]
    bh, bw = crop.shape[0], crop.shape[1]
    q = crop.reshape(bh * bw, channels) @ proj.wq
    k = rows @ proj.wk
    v = rows @ proj.wv
    attn = softmax_rows(q @ k.T / np.sqrt(proj.d_prime))
    return (attn @ v).reshape(bh, bw, channels)


def regional_cross_attention(
    feat: FeatureMap,
    bbox_f: BBox,
    concept: TextEmbedding | np.ndarray,
    proj: ProjectionSet,
) -> FeatureMap:
    """Crop, attend against the concept embedding, paste back.

    The bbox region is REPLACED by the regional attention output; all
    positions outside it are bit-identical to the input.
    """
    if bbox_f.grid != feat.grid:
        raise ShapeError(f"bbox grid {bbox_f.grid} vs feature grid {feat.grid}")
    rows = _as_rows(concept)
    region = region_attention(feat.values, bbox_f, rows, proj)
    out = feat.values.copy()
    out[bbox_f.row_slice, bbox_f.col_slice, :] = region
    return FeatureMap(values=out, layer_id=feat.layer_id)


def dense_cross_attention(
    feat: FeatureMap,
    concept: TextEmbedding | np.ndarray,
    proj: ProjectionSet,
) -> FeatureMap:
    """Standard cross-attention over every position; reference semantics.

    Written without the crop-and-paste path on purpose: the regional op
    with a full-grid box must reproduce this to float tolerance.
    """
    rows = _as_rows(concept)
    h, w, channels = feat.values.shape
    _check_proj(channels, rows, proj)
    q = feat.values.reshape(h * w, channels) @ proj.wq
    k = rows @ proj.wk
    v = rows @ proj.wv
    attn = softmax_rows(q @ k.T / np.sqrt(proj.d_prime))
    return FeatureMap(values=(attn @ v).reshape(h, w, channels), layer_id=feat.layer_id)


@dataclass
class SecrHandle:
    """Owns the hooks one install placed; uninstall removes exactly those."""

    backend: DenoiserBackend
    branch: str
    layer_boxes: dict[str, BBox] = field(default_factory=dict)
    active: bool = True

    def uninstall(self) -> None:
        if not self.active:
            return
        for layer_id in self.layer_boxes:
            self.backend.remove_cross_attention_hook(self.branch, layer_id)
        self.active = False

    def debug_dump(self) -> dict:
        return {
            "branch": self.branch,
            "active": self.active,
            "layers": {lid: box.to_json() for lid, box in self.layer_boxes.items()},
        }


def install_secr(
    backend: DenoiserBackend,
    branch: str,
    concept_word_embedding: TextEmbedding,
    bbox: BBox,
    layer_ids: list[str] | None = None,
) -> SecrHandle:
    """Install regional injection on one branch.

    Each configured layer gets the bbox resized to its grid (outward
    rounding, never under-covering) and a hook that swaps the dense
    attention output inside that box for the regional computation with
    the layer's own projections. Installing a branch twice is a warned
    no-op; the returned handle then owns nothing.
    """
    if branch not in ("source", "target"):
        raise ParamError(f"branch must be 'source' or 'target', got {branch!r}")
    if not backend.supports_hooks:
        raise UnsupportedBackend(
            f"{backend.name} backend exposes no cross-attention interception"
        )
    if layer_ids is None:
        layer_ids = [info.layer_id for info in backend.attention_layers]
    already = [lid for lid in layer_ids if backend.hook_for(branch, lid) is not None]
    if already:
        warnings.warn(
            f"SECR already installed on branch {branch!r} (layers {already}); "
            "second install is a no-op",
            stacklevel=2,
        )
        return SecrHandle(backend=backend, branch=branch, layer_boxes={})
    rows = concept_rows(concept_word_embedding)
    handle = SecrHandle(backend=backend, branch=branch)
    for lid in layer_ids:
        info = backend.layer(lid)
        box_l = resize_bbox(bbox, info.grid)

        def hook(
            layer: LayerInfo,
            feat_values: np.ndarray,
            attn_out: np.ndarray,
            proj: ProjectionSet,
            _box: BBox = box_l,
            _rows: np.ndarray = rows,
        ) -> np.ndarray:
            region = region_attention(feat_values, _box, _rows, proj)
            out = attn_out.copy()
            out[_box.row_slice, _box.col_slice, :] = region
            return out

        backend.install_cross_attention_hook(branch, lid, hook)
        handle.layer_boxes[lid] = box_l
    return handle
