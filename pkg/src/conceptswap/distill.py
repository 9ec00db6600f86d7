"""Score-distillation gradients: SDS, the two-branch delta, and masking.

The single-branch gradient steers a latent toward a prompt but drags
blur and color-shift bias with it; differencing a second, frozen
branch on the source prompt cancels that bias and leaves only the
edit direction. Masking the difference to the concept bbox then stops
the background from drifting at all: outside entries are exact zeros,
so SGD leaves those latent positions bit-identical.

The weight w(t) is 1 for every t; the step size is controlled solely
by the learning rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backends.base import DenoiserBackend, TextEmbedding, add_noise
from .bbox import BBox
from .errors import ContractError, ParamError, ShapeError

FLAT_WEIGHT = 1.0


@dataclass(frozen=True)
class GradientField:
    """A latent-shaped gradient with the timestep and weight that formed it."""

    values: np.ndarray
    t: int
    weight: float = FLAT_WEIGHT


@dataclass(frozen=True)
class BranchInput:
    """One conditioning branch: a latent plus its prompt under guidance.

    label routes installed cross-attention hooks: passes made for this
    branch carry it to the backend.
    """

    latent: np.ndarray
    embedding: TextEmbedding
    uncond_embedding: TextEmbedding
    guidance: float = 1.0
    label: str | None = None

    def __post_init__(self):
        if self.guidance < 0:
            raise ParamError(f"guidance must be >= 0, got {self.guidance}")


def cfg_combine(
    eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float
) -> np.ndarray:
    """Classifier-free guidance: uncond + scale * (cond - uncond)."""
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError(f"{eps_uncond.shape} vs {eps_cond.shape}")
    return eps_uncond + scale * (eps_cond - eps_uncond)


def branch_prediction(
    branch: BranchInput, t: int, eps: np.ndarray, backend: DenoiserBackend
) -> np.ndarray:
    """Noise prediction for one branch at timestep t.

    guidance == 1 collapses CFG to the conditional pass alone, so no
    unconditional forward is spent. Hooks installed for the branch
    label apply to both passes, matching a batched-UNet execution where
    a layer hook sees every element of the batch.
    """
    z_t = add_noise(branch.latent, t, eps, backend.schedule)
    cond_pred, _ = backend.predict_noise(z_t, t, branch.embedding, branch=branch.label)
    if branch.guidance == 1.0:
        return cond_pred
    uncond_pred, _ = backend.predict_noise(
        z_t, t, branch.uncond_embedding, branch=branch.label
    )
    return cfg_combine(uncond_pred, cond_pred, branch.guidance)


def sds_gradient(
    branch: BranchInput, t: int, eps: np.ndarray, backend: DenoiserBackend
) -> GradientField:
    """Single-branch distillation gradient w(t) * (prediction - eps)."""
    if branch.latent.shape != eps.shape:
        raise ShapeError(f"latent {branch.latent.shape} vs eps {eps.shape}")
    pred = branch_prediction(branch, t, eps, backend)
    return GradientField(values=FLAT_WEIGHT * (pred - eps), t=int(t))


def dds_gradient(
    target: BranchInput,
    source: BranchInput,
    t: int,
    eps: np.ndarray,
    backend: DenoiserBackend,
) -> GradientField:
    """Two-branch delta gradient w(t) * (target pred - source pred).

    Both branches must be noised with the same draw at the same t and
    run under the same guidance so the shared bias cancels; mismatched
    setups are caller bugs, not numerics.
    """
    if target.latent.shape != source.latent.shape:
        raise ContractError(
            f"branch latents differ: {target.latent.shape} vs {source.latent.shape}"
        )
    if target.guidance != source.guidance:
        raise ContractError(
            f"branch guidance differs: {target.guidance} vs {source.guidance}"
        )
    if target.uncond_embedding.values.shape != source.uncond_embedding.values.shape:
        raise ContractError("branches must share the unconditional embedding shape")
    if target.latent.shape != eps.shape:
        raise ShapeError(f"latent {target.latent.shape} vs eps {eps.shape}")
    pred_t = branch_prediction(target, t, eps, backend)
    pred_s = branch_prediction(source, t, eps, backend)
    return GradientField(values=FLAT_WEIGHT * (pred_t - pred_s), t=int(t))


def bgm_apply(grad: GradientField, bbox: BBox) -> GradientField:
    """Zero the gradient outside the bbox, all channels per position."""
    values = grad.values
    if values.ndim != 3 or bbox.grid != (values.shape[1], values.shape[2]):
        raise ShapeError(
            f"bbox grid {bbox.grid} does not match gradient spatial dims "
            f"{values.shape}"
        )
    masked = np.zeros_like(values)
    masked[:, bbox.row_slice, bbox.col_slice] = values[
        :, bbox.row_slice, bbox.col_slice
    ]
    return GradientField(values=masked, t=grad.t, weight=grad.weight)
