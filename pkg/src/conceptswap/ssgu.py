"""Step-skipping gradient updating.

A full gradient needs two denoiser branches per step and the forward
passes dominate inference time, so gradients are computed only at
anchor iterations spaced a fixed period apart and the latest anchor
gradient is reused verbatim in between. Anchors are iteration indices
(0-based, i mod period == 0), not diffusion timesteps; index 0 is
always an anchor, so the cache is warm from the first reuse on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .distill import GradientField
from .errors import ContractError, ParamError, ShapeError


@dataclass(frozen=True)
class SSGUSchedule:
    period: int
    total_steps: int
    anchors: tuple[int, ...]

    def is_anchor(self, i: int) -> bool:
        return i % self.period == 0

    def forward_pass_count(self) -> int:
        """Number of gradient computations over the whole run."""
        return len(self.anchors)


@dataclass
class GradientCache:
    """Most recent anchor gradient; single-owner, one per run."""

    last_anchor_step: int = -1
    last_gradient: GradientField | None = None


def plan(total_steps: int, period: int) -> SSGUSchedule:
    """Anchor schedule for a run: {i : i mod period == 0, 0 <= i < T}.

    The anchor count is ceil(T / period); trailing steps past the last
    anchor reuse it, no extra anchor is appended at T-1.
    """
    if total_steps < 1:
        raise ParamError(f"total_steps must be >= 1, got {total_steps}")
    if period < 1:
        raise ParamError(f"period must be >= 1, got {period}")
    return SSGUSchedule(
        period=period,
        total_steps=total_steps,
        anchors=tuple(range(0, total_steps, period)),
    )


def gradient_for_step(
    i: int,
    schedule: SSGUSchedule,
    cache: GradientCache,
    compute: Callable[[], GradientField],
) -> tuple[GradientField, bool]:
    """The gradient to apply at iteration i, and whether it was computed.

    Anchor steps invoke the thunk and refresh the cache; every other
    step returns the cached gradient untouched (no reweighting).
    """
    if not 0 <= i < schedule.total_steps:
        raise ParamError(f"step {i} outside [0, {schedule.total_steps})")
    if schedule.is_anchor(i):
        grad = compute()
        cache.last_anchor_step = i
        cache.last_gradient = grad
        return grad, True
    if cache.last_gradient is None:
        raise ContractError(f"non-anchor step {i} with an empty gradient cache")
    return cache.last_gradient, False


def apply_update(latent: np.ndarray, grad: GradientField, eta: float) -> np.ndarray:
    """One SGD step: latent - eta * gradient."""
    if latent.shape != grad.values.shape:
        raise ShapeError(f"latent {latent.shape} vs gradient {grad.values.shape}")
    return latent - eta * grad.values
