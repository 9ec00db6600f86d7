"""FastAPI service wrapping the swap toolkit.

Editing runs are CPU/GPU heavy and stateless between requests, so the
service holds no session state: each request carries its full config,
gets a fresh backend, and returns everything a client needs to write
its outputs. Domain errors map to a JSON body {error, detail} where
`error` is the toolkit exception class name; bad configs and inputs
are 400, runtime pipeline failures are 422.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..backends import build_backend
from ..bbox import generate_bbox_with_saliency
from ..config import effective_config, swap_config_from_dict
from ..errors import (
    ConceptSwapError,
    ConfigError,
    LayoutError,
    ParamError,
    PromptError,
    TokenLimitExceeded,
)
from ..evaluation import (
    StubClipScorer,
    StubPerceptualClient,
    identity_runner,
    load_layout,
    render_table,
    run_benchmark,
)
from ..imageio import b64_to_image, image_to_b64
from ..pipeline import (
    REFERENCE_TIMINGS,
    ConceptSpec,
    accel_demo,
    insert,
    remove,
    swap,
)
from .models import (
    AccelDemoRequest,
    AccelDemoResponse,
    AccelRow,
    BBoxModel,
    BBoxRequest,
    BBoxResponse,
    BenchRequest,
    BenchResponse,
    ErrorBody,
    SwapRequest,
    SwapResponse,
)

_CONFIG_ERRORS = (ConfigError, ParamError, PromptError, TokenLimitExceeded, LayoutError)


def _error_status(exc: ConceptSwapError) -> int:
    return 400 if isinstance(exc, _CONFIG_ERRORS) else 422


def _prepare(req_config: dict) -> tuple[dict, object]:
    cfg_dict = effective_config(overrides=req_config)
    backend = build_backend(cfg_dict)
    return cfg_dict, backend


def _concept_from(req: SwapRequest) -> ConceptSpec | None:
    if req.concept_token is None and req.concept_checkpoint is None:
        return None
    return ConceptSpec(
        token=req.concept_token or "", checkpoint_ref=req.concept_checkpoint
    )


def _swap_response(result, backend, cfg_dict) -> SwapResponse:
    return SwapResponse(
        image_b64=image_to_b64(np.clip(result.image, 0.0, 1.0)),
        bbox_used=BBoxModel(**result.bbox_used.to_json()),
        forward_passes=result.forward_passes,
        wall_clock=result.wall_clock,
        backend=backend.name,
        config=cfg_dict,
        per_step_log=result.per_step_log,
    )


def create_app() -> FastAPI:
    app = FastAPI(title="conceptswap", version=__version__)

    @app.exception_handler(ConceptSwapError)
    async def _domain_error(request: Request, exc: ConceptSwapError):
        body = ErrorBody(error=type(exc).__name__, detail=str(exc))
        return JSONResponse(status_code=_error_status(exc), content=body.model_dump())

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.post("/swap", response_model=SwapResponse)
    def swap_endpoint(req: SwapRequest) -> SwapResponse:
        cfg_dict, backend = _prepare(req.config)
        cfg = swap_config_from_dict(cfg_dict, backend.latent_dims[1:])
        image = b64_to_image(req.image_b64)
        result = swap(image, cfg, _concept_from(req), backend)
        return _swap_response(result, backend, cfg_dict)

    @app.post("/insert", response_model=SwapResponse)
    def insert_endpoint(req: SwapRequest) -> SwapResponse:
        cfg_dict, backend = _prepare(req.config)
        cfg = swap_config_from_dict(cfg_dict, backend.latent_dims[1:])
        image = b64_to_image(req.image_b64)
        result = insert(image, cfg, _concept_from(req), backend)
        return _swap_response(result, backend, cfg_dict)

    @app.post("/remove", response_model=SwapResponse)
    def remove_endpoint(req: SwapRequest) -> SwapResponse:
        cfg_dict, backend = _prepare(req.config)
        cfg = swap_config_from_dict(cfg_dict, backend.latent_dims[1:])
        image = b64_to_image(req.image_b64)
        result = remove(image, cfg, backend)
        return _swap_response(result, backend, cfg_dict)

    @app.post("/bbox", response_model=BBoxResponse)
    def bbox_endpoint(req: BBoxRequest) -> BBoxResponse:
        cfg_dict, backend = _prepare(req.config)
        cfg = swap_config_from_dict(cfg_dict, backend.latent_dims[1:])
        image = b64_to_image(req.image_b64)
        latent = backend.encode(image)
        box, saliency = generate_bbox_with_saliency(
            latent, cfg.source_prompt, cfg.source_concept, cfg, backend
        )
        heat = saliency.values
        if not saliency.normalized:
            heat = np.zeros_like(heat)
        return BBoxResponse(
            bbox=BBoxModel(**box.to_json()),
            saliency_b64=image_to_b64(heat),
            config=cfg_dict,
        )

    @app.post("/accel-demo", response_model=AccelDemoResponse)
    def accel_endpoint(req: AccelDemoRequest) -> AccelDemoResponse:
        cfg_dict, _ = _prepare(req.config)
        cfg = swap_config_from_dict(cfg_dict)
        rows = accel_demo(
            cfg, req.method, req.lambdas, lambda: build_backend(cfg_dict)
        )
        return AccelDemoResponse(
            method=req.method,
            total_steps=cfg.total_steps,
            rows=[AccelRow(**row) for row in rows],
            reference={str(k): v for k, v in REFERENCE_TIMINGS[req.method].items()},
        )

    @app.post("/bench", response_model=BenchResponse)
    def bench_endpoint(req: BenchRequest) -> BenchResponse:
        cfg_dict, _ = _prepare(req.config)
        layout = load_layout(req.layout_dir)
        clip_scorer = StubClipScorer() if cfg_dict["clip_client"] == "stub" else None
        lpips = StubPerceptualClient() if cfg_dict["lpips_client"] == "stub" else None
        if cfg_dict["runner"] == "identity":
            runner = identity_runner
            method = "identity"
        else:
            runner = _make_swap_runner(cfg_dict)
            method = "ours"
        report = run_benchmark(
            layout,
            runner,
            req.out_path,
            method=method,
            clip_scorer=clip_scorer,
            lpips_client=lpips,
            data_range=cfg_dict["data_range"],
            jobs=cfg_dict["jobs"],
            seed=cfg_dict["seed"],
        )
        return BenchResponse(report=report.to_json(), table=render_table(report))

    return app


def _make_swap_runner(cfg_dict: dict):
    """Bench runner executing a full swap per cell, one backend per call."""

    def runner(image: np.ndarray, task) -> np.ndarray:
        backend = build_backend(cfg_dict)
        base = swap_config_from_dict(cfg_dict, backend.latent_dims[1:])
        cfg = replace(
            base,
            source_prompt=task.source_prompt,
            target_prompt=task.target_prompt,
            source_concept=task.source_concept,
            target_concept=task.target_concept,
            seed=task.seed,
        )
        result = swap(image, cfg, ConceptSpec(token=task.target_concept), backend)
        return result.image

    return runner
