"""Request/response schemas for the editing service.

Images travel as base64-encoded PNG. Every editing request carries a
flat config mapping (same keys as the config file); the server merges
it over the defaults, rejects unknown keys, and echoes the effective
config back so clients can write faithful sidecars.
"""

from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field


class BBoxModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    row_min: int
    col_min: int
    row_max: int
    col_max: int
    grid: tuple[int, int] = Field(description="(h, w) coordinate space")


class SwapRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_b64: str = Field(description="Source image, base64 PNG")
    config: dict[str, Any] = Field(
        default_factory=dict, description="Flat config keys; unknown keys rejected"
    )
    concept_token: str | None = Field(
        default=None, description="Customized concept token, e.g. 'sks teapot'"
    )
    concept_checkpoint: str | None = Field(
        default=None, description="Opaque checkpoint reference for the backend"
    )


class SwapResponse(BaseModel):
    image_b64: str
    bbox_used: BBoxModel
    forward_passes: int
    wall_clock: float
    backend: str
    config: dict[str, Any] = Field(description="Effective config used by the run")
    per_step_log: list[dict[str, Any]] | None = None


class BBoxRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_b64: str
    config: dict[str, Any] = Field(default_factory=dict)


class BBoxResponse(BaseModel):
    bbox: BBoxModel
    saliency_b64: str = Field(description="Fused saliency heat map, base64 PNG")
    config: dict[str, Any]


class AccelDemoRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: Literal["sds", "dds"] = "dds"
    lambdas: list[int] = Field(default_factory=lambda: [1, 5])
    config: dict[str, Any] = Field(default_factory=dict)


class AccelRow(BaseModel):
    lambda_: int = Field(alias="lambda")
    forward_passes: int
    wall_clock: float
    speedup_vs_lambda1: float | None = None

    model_config = ConfigDict(populate_by_name=True)


class AccelDemoResponse(BaseModel):
    method: str
    total_steps: int
    rows: list[AccelRow]
    reference: dict[str, float] = Field(
        description="Published GPU seconds per image for this method, keyed by period"
    )


class BenchRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    layout_dir: str = Field(description="Server-local benchmark directory")
    out_path: str | None = Field(
        default=None, description="Server-local report path (json + txt)"
    )
    config: dict[str, Any] = Field(default_factory=dict)


class BenchResponse(BaseModel):
    report: dict[str, Any]
    table: str


class ErrorBody(BaseModel):
    error: str = Field(description="Toolkit error class name")
    detail: str
