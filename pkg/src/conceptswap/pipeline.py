"""End-to-end concept swap, insertion, removal, and sequential multi-swap.

A run localizes the source concept (three capture passes), installs
regional semantic injection on both branches inside the box, then
optimizes the latent with masked two-branch gradients under the
step-skipping schedule. There is no inversion phase and no training:
the source image's own latent is the starting point and the only
state optimized.

Randomness: one seed drives everything. It spawns two child streams,
one for bbox noise draws, one for the optimization loop; the loop draws
(t, eps) fresh per iteration in that order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .backends.base import DenoiserBackend
from .bbox import BBox, generate_bbox
from .config import SwapConfig
from .distill import BranchInput, bgm_apply, dds_gradient, sds_gradient
from .errors import (
    MultiSwapError,
    NumericalError,
    ParamError,
    PromptError,
    ShapeError,
    UnsupportedBackend,
)
from .secr import install_secr
from .ssgu import GradientCache, apply_update, gradient_for_step, plan

# Published single-GPU timings for the gradient-reuse extension on the
# plain distillation baselines (SD 2.1, RTX 3090, 512x512), for context
# next to toy-backend numbers: seconds per image at periods 1 / 3 / 5.
REFERENCE_TIMINGS = {
    "sds": {1: 40.37, 3: 14.12, 5: 8.62},
    "dds": {1: 66.89, 3: 22.65, 5: 13.90},
}


@dataclass(frozen=True)
class ConceptSpec:
    """Identity of a customized concept: its rare token and checkpoint.

    The token names the concept in prompts (e.g. "sks teapot"); the
    checkpoint reference is an opaque locator the backend may use to
    select fine-tuned weights. The toy backend ignores checkpoints.
    """

    token: str
    checkpoint_ref: str | None = None


@dataclass
class SwapResult:
    image: np.ndarray
    bbox_used: BBox
    forward_passes: int
    wall_clock: float
    per_step_log: list[dict] | None = None


def _check_concept_in_prompt(concept: str, prompt: str, role: str) -> None:
    words = concept.split()
    if not words:
        raise PromptError(f"{role} concept is empty")
    prompt_words = prompt.split()
    missing = [w for w in words if w not in prompt_words]
    if missing:
        raise PromptError(
            f"{role} concept word(s) {missing} do not occur in prompt {prompt!r}"
        )


def _validate_run(cfg: SwapConfig, backend: DenoiserBackend) -> None:
    if cfg.t_range[1] > backend.schedule.t_max:
        raise ParamError(
            f"t_range {cfg.t_range} exceeds backend t_max {backend.schedule.t_max}"
        )


def _secr_layer_ids(cfg: SwapConfig) -> list[str] | None:
    """None means all layers; an empty tuple disables injection."""
    if cfg.secr_layers is None:
        return None
    return list(cfg.secr_layers)


def _run(
    source_image: np.ndarray,
    cfg: SwapConfig,
    backend: DenoiserBackend,
    source_secr_text: str,
    target_secr_text: str,
    localize: bool = True,
) -> SwapResult:
    _validate_run(cfg, backend)
    z_src = backend.encode(source_image)
    lat_grid = (z_src.shape[1], z_src.shape[2])
    start = time.perf_counter()
    passes_before = backend.forward_count

    bbox_stream, loop_stream = np.random.SeedSequence(cfg.seed).spawn(2)
    if cfg.bbox_override is not None:
        if cfg.bbox_override.grid != lat_grid:
            raise ShapeError(
                f"bbox_override grid {cfg.bbox_override.grid} != latent grid {lat_grid}"
            )
        box = cfg.bbox_override
    elif localize:
        box = generate_bbox(
            z_src,
            cfg.source_prompt,
            cfg.source_concept,
            cfg,
            backend,
            rng=np.random.default_rng(bbox_stream),
        )
    else:
        raise ParamError("bbox_override required when no source concept is localizable")

    layer_ids = _secr_layer_ids(cfg)
    secr_enabled = layer_ids is None or len(layer_ids) > 0
    handles = []
    if secr_enabled:
        if not backend.supports_hooks:
            raise UnsupportedBackend(
                f"{backend.name} backend cannot install regional injection; "
                "set secr_layers = [] to run without it"
            )
        handles.append(
            install_secr(
                backend, "source", backend.embed(source_secr_text), box, layer_ids
            )
        )
        handles.append(
            install_secr(
                backend, "target", backend.embed(target_secr_text), box, layer_ids
            )
        )

    try:
        latent, log = _optimize(z_src, cfg, backend, box, loop_stream)
    finally:
        for handle in handles:
            handle.uninstall()

    image = backend.decode(latent)
    return SwapResult(
        image=image,
        bbox_used=box,
        forward_passes=backend.forward_count - passes_before,
        wall_clock=time.perf_counter() - start,
        per_step_log=log,
    )


def _optimize(
    z_src: np.ndarray,
    cfg: SwapConfig,
    backend: DenoiserBackend,
    box: BBox,
    loop_stream: np.random.SeedSequence,
) -> tuple[np.ndarray, list[dict] | None]:
    z = z_src.copy()
    log: list[dict] | None = [] if cfg.trace else None
    if cfg.total_steps == 0:
        return z, log

    rng = np.random.default_rng(loop_stream)
    schedule = plan(cfg.total_steps, cfg.lambda_)
    cache = GradientCache()
    emb_target = backend.embed(cfg.target_prompt)
    emb_source = backend.embed(cfg.source_prompt)
    emb_uncond = backend.embed("")
    t_min, t_max = cfg.t_range

    for i in range(cfg.total_steps):
        t = int(rng.integers(t_min, t_max))
        eps = rng.standard_normal(z_src.shape)

        def compute_grad(z_now=z):
            target = BranchInput(
                latent=z_now,
                embedding=emb_target,
                uncond_embedding=emb_uncond,
                guidance=cfg.guidance,
                label="target",
            )
            source = BranchInput(
                latent=z_src,
                embedding=emb_source,
                uncond_embedding=emb_uncond,
                guidance=cfg.guidance,
                label="source",
            )
            return bgm_apply(dds_gradient(target, source, t, eps, backend), box)

        grad, computed = gradient_for_step(i, schedule, cache, compute_grad)
        if not np.all(np.isfinite(grad.values)):
            raise NumericalError(f"non-finite gradient at step {i} (t={grad.t})")
        z = apply_update(z, grad, cfg.eta)
        if log is not None:
            log.append(
                {
                    "step": i,
                    "t": t,
                    "computed": computed,
                    "grad_max": float(np.abs(grad.values).max()),
                }
            )
    return z, log


def swap(
    source_image: np.ndarray,
    cfg: SwapConfig,
    concept: ConceptSpec | None,
    backend: DenoiserBackend,
) -> SwapResult:
    """Replace the source concept with the target concept inside its bbox.

    The target branch conditions on the target prompt; regional
    injection feeds the target concept's token embedding (from the
    ConceptSpec token when cfg.target_concept is empty). Background
    latents outside the box are never touched.
    """
    _check_concept_in_prompt(cfg.source_concept, cfg.source_prompt, "source")
    target_text = cfg.target_concept
    if concept is not None:
        if not concept.token.split():
            raise ParamError("ConceptSpec token is empty")
        if not target_text:
            target_text = concept.token
    return _run(
        source_image,
        cfg,
        backend,
        source_secr_text=cfg.source_concept,
        target_secr_text=target_text,
    )


def insert(
    source_image: np.ndarray,
    cfg: SwapConfig,
    concept: ConceptSpec | None,
    backend: DenoiserBackend,
) -> SwapResult:
    """Add the target concept inside an explicitly supplied bbox.

    Nothing exists to localize, so cfg.bbox_override is mandatory and
    the source branch's injection concept is the null embedding.
    """
    if cfg.bbox_override is None:
        raise ParamError("insert requires cfg.bbox_override; no source concept exists")
    target_text = cfg.target_concept
    if concept is not None:
        if not concept.token.split():
            raise ParamError("ConceptSpec token is empty")
        if not target_text:
            target_text = concept.token
    return _run(
        source_image,
        cfg,
        backend,
        source_secr_text="",
        target_secr_text=target_text,
        localize=False,
    )


def remove(
    source_image: np.ndarray, cfg: SwapConfig, backend: DenoiserBackend
) -> SwapResult:
    """Remove the source concept: swap toward the null prompt.

    The target prompt and the target injection concept are both forced
    to the null prompt; localization still runs on the source concept.
    """
    _check_concept_in_prompt(cfg.source_concept, cfg.source_prompt, "source")
    null_cfg = replace(cfg, target_prompt="", target_concept="")
    return _run(
        source_image,
        null_cfg,
        backend,
        source_secr_text=cfg.source_concept,
        target_secr_text="",
    )


def multi_swap(
    source_image: np.ndarray,
    cfgs: list[SwapConfig],
    concepts: list[ConceptSpec | None] | None,
    backend: DenoiserBackend,
) -> SwapResult:
    """Sequential single-concept swaps, each on the previous stage's output.

    forward_passes sums over stages; bbox_used is the final stage's.
    An empty list degenerates to the zero-step run on a full-grid box.
    """
    if concepts is None:
        concepts = [None] * len(cfgs)
    if len(concepts) != len(cfgs):
        raise ParamError(f"{len(cfgs)} configs but {len(concepts)} concepts")
    if not cfgs:
        z = backend.encode(source_image)
        grid = (z.shape[1], z.shape[2])
        full = BBox(0, 0, grid[0] - 1, grid[1] - 1, grid)
        return SwapResult(
            image=backend.decode(z),
            bbox_used=full,
            forward_passes=0,
            wall_clock=0.0,
            per_step_log=None,
        )
    image = source_image
    total_passes = 0
    total_time = 0.0
    logs: list[dict] | None = None
    result = None
    for stage, (cfg, concept) in enumerate(zip(cfgs, concepts)):
        try:
            result = swap(image, cfg, concept, backend)
        except Exception as exc:
            raise MultiSwapError(stage, exc) from exc
        image = result.image
        total_passes += result.forward_passes
        total_time += result.wall_clock
        if result.per_step_log is not None:
            logs = (logs or []) + [
                {**row, "stage": stage} for row in result.per_step_log
            ]
    assert result is not None
    return SwapResult(
        image=image,
        bbox_used=result.bbox_used,
        forward_passes=total_passes,
        wall_clock=total_time,
        per_step_log=logs,
    )


def accel_demo(
    cfg: SwapConfig,
    method: str,
    lambdas: list[int],
    backend_factory: Callable[[], DenoiserBackend],
    source_image: np.ndarray | None = None,
) -> list[dict]:
    """Run a plain distillation baseline under each gradient-reuse period.

    No masking or regional injection: this demonstrates that the
    step-skipping schedule transfers to the bare single-branch and
    two-branch methods. Each period gets a fresh backend and the same
    seeded draw sequence; rows report forward passes and wall clock,
    plus speedup relative to the period-1 row when present.
    """
    if method not in ("sds", "dds"):
        raise ParamError(f"method must be 'sds' or 'dds', got {method!r}")
    if not lambdas:
        raise ParamError("need at least one period to demo")
    rows: list[dict] = []
    for lam in lambdas:
        if lam < 1:
            raise ParamError(f"period must be >= 1, got {lam}")
        backend = backend_factory()
        image = source_image
        if image is None:
            image = backend.decode(np.zeros(backend.latent_dims))
        z_src = backend.encode(image)
        z = z_src.copy()
        emb_target = backend.embed(cfg.target_prompt)
        emb_source = backend.embed(cfg.source_prompt)
        emb_uncond = backend.embed("")
        rng = np.random.default_rng(cfg.seed)
        schedule = plan(cfg.total_steps, lam)
        cache = GradientCache()
        t_min, t_max = cfg.t_range
        passes_before = backend.forward_count
        start = time.perf_counter()
        for i in range(cfg.total_steps):
            t = int(rng.integers(t_min, t_max))
            eps = rng.standard_normal(z_src.shape)

            def compute_grad(z_now=z, t_now=t, eps_now=eps):
                target = BranchInput(
                    latent=z_now,
                    embedding=emb_target,
                    uncond_embedding=emb_uncond,
                    guidance=cfg.guidance,
                )
                if method == "sds":
                    return sds_gradient(target, t_now, eps_now, backend)
                source = BranchInput(
                    latent=z_src,
                    embedding=emb_source,
                    uncond_embedding=emb_uncond,
                    guidance=cfg.guidance,
                )
                return dds_gradient(target, source, t_now, eps_now, backend)

            grad, _ = gradient_for_step(i, schedule, cache, compute_grad)
            z = apply_update(z, grad, cfg.eta)
        rows.append(
            {
                "lambda": lam,
                "forward_passes": backend.forward_count - passes_before,
                "wall_clock": time.perf_counter() - start,
            }
        )
    base = next((r for r in rows if r["lambda"] == 1), None)
    for row in rows:
        row["speedup_vs_lambda1"] = (
            None if base is None or row["wall_clock"] == 0
            else base["wall_clock"] / row["wall_clock"]
        )
    return rows
