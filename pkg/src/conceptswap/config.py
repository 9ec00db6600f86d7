"""Run configuration: a flat, typed key-value file plus CLI overrides.

One file drives a whole run so the sidecar written next to each output
re-parses into the identical run. Keys are validated against a single
registry; unknown keys are rejected rather than ignored.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

try:  # 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .bbox import BBox
from .errors import ConfigError, ParamError


@dataclass(frozen=True)
class SwapConfig:
    """Hyperparameters of one swap/insert/remove run.

    Defaults are the published settings: SGD step 0.1 for 550 steps,
    gradient reuse period 5, attention sharpening exponent 2, mask
    threshold 0.5, guidance 7.5, timesteps sampled in [50, 950).
    """

    source_prompt: str = ""
    target_prompt: str = ""
    source_concept: str = ""
    target_concept: str = ""
    eta: float = 0.1
    total_steps: int = 550
    lambda_: int = 5
    alpha: float = 2.0
    beta: float = 0.5
    guidance: float = 7.5
    t_range: tuple[int, int] = (50, 950)
    seed: int = 0
    bbox_override: BBox | None = None
    # extension knobs, not part of the published defaults
    attn_refine: str = "matmul"
    bbox_timesteps: tuple[int, ...] = (541, 521, 501)
    secr_layers: tuple[str, ...] | None = None  # None = all layers, () = disable
    trace: bool = False

    def __post_init__(self):
        if self.total_steps < 0:
            raise ParamError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.lambda_ < 1:
            raise ParamError(f"lambda must be >= 1, got {self.lambda_}")
        if self.alpha < 1:
            raise ParamError(f"alpha must be >= 1, got {self.alpha}")
        if not 0 < self.beta < 1:
            raise ParamError(f"beta must lie in (0,1), got {self.beta}")
        if not math.isfinite(self.eta) or not math.isfinite(self.guidance):
            raise ParamError("eta and guidance must be finite")
        t_min, t_max = self.t_range
        if not 0 < t_min < t_max:
            raise ParamError(f"need 0 < t_min < t_max, got {self.t_range}")
        if len(self.bbox_timesteps) < 1:
            raise ParamError("bbox_timesteps must name at least one timestep")
        if self.attn_refine not in ("matmul", "elementwise"):
            raise ParamError(f"unknown attn_refine mode {self.attn_refine!r}")

    def to_dict(self) -> dict[str, Any]:
        """Flat file-key representation (lambda_, t_range unpacked)."""
        out: dict[str, Any] = {
            "source_prompt": self.source_prompt,
            "target_prompt": self.target_prompt,
            "source_concept": self.source_concept,
            "target_concept": self.target_concept,
            "eta": self.eta,
            "total_steps": self.total_steps,
            "lambda": self.lambda_,
            "alpha": self.alpha,
            "beta": self.beta,
            "guidance": self.guidance,
            "t_min": self.t_range[0],
            "t_max": self.t_range[1],
            "seed": self.seed,
            "attn_refine": self.attn_refine,
            "bbox_timesteps": list(self.bbox_timesteps),
            "trace": self.trace,
        }
        if self.bbox_override is not None:
            out["bbox_override"] = [
                self.bbox_override.row_min,
                self.bbox_override.col_min,
                self.bbox_override.row_max,
                self.bbox_override.col_max,
            ]
            out["bbox_grid"] = list(self.bbox_override.grid)
        if self.secr_layers is not None:
            out["secr_layers"] = list(self.secr_layers)
        return out


# Registry of every legal flat config key: default and expected type(s).
# Backend and harness keys live here too so one file configures a run
# end to end and unknown keys can be rejected uniformly.
KNOWN_KEYS: dict[str, tuple[Any, tuple[type, ...]]] = {
    # run keys
    "source_prompt": ("", (str,)),
    "target_prompt": ("", (str,)),
    "source_concept": ("", (str,)),
    "target_concept": ("", (str,)),
    "eta": (0.1, (float, int)),
    "total_steps": (550, (int,)),
    "lambda": (5, (int,)),
    "alpha": (2.0, (float, int)),
    "beta": (0.5, (float, int)),
    "guidance": (7.5, (float, int)),
    "t_min": (50, (int,)),
    "t_max": (950, (int,)),
    "seed": (0, (int,)),
    "bbox_override": (None, (list,)),
    "bbox_grid": (None, (list,)),
    "attn_refine": ("matmul", (str,)),
    "bbox_timesteps": ([541, 521, 501], (list,)),
    "secr_layers": (None, (list,)),
    "trace": (False, (bool,)),
    # backend keys
    "backend": ("toy", (str,)),
    "toy_image_size": (32, (int,)),
    "toy_seed": (0, (int,)),
    "toy_hot_rects": ({}, (dict,)),
    "toy_self_attention": ("identity", (str,)),
    "toy_hook_gain": (1e-4, (float, int)),
    "toy_coarse_layer": (False, (bool,)),
    "adapter_checkpoint": ("", (str,)),
    "adapter_image_size": (512, (int,)),
    "adapter_token_limit": (77, (int,)),
    # harness keys
    "jobs": (1, (int,)),
    "data_range": (1.0, (float, int)),
    "clip_client": ("stub", (str,)),
    "lpips_client": ("stub", (str,)),
    "runner": ("swap", (str,)),
}


def default_config() -> dict[str, Any]:
    return {k: v for k, (v, _) in KNOWN_KEYS.items()}


def _check_key(key: str, value: Any) -> Any:
    if key not in KNOWN_KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    default, types = KNOWN_KEYS[key]
    if value is None and default is None:
        return None
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"key {key!r} expects {types}, got bool")
    if not isinstance(value, types):
        raise ConfigError(
            f"key {key!r} expects {' or '.join(t.__name__ for t in types)}, "
            f"got {type(value).__name__}"
        )
    if float in types and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def load_config(path: str | Path) -> dict[str, Any]:
    """Parse a TOML config file and merge it over the defaults."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        with open(p, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {p} does not parse: {exc}") from exc
    cfg = default_config()
    for key, value in raw.items():
        cfg[key] = _check_key(key, value)
    return cfg


def parse_overrides(pairs: list[str]) -> dict[str, Any]:
    """Parse --set key=value items; values are JSON, bare words are strings."""
    out: dict[str, Any] = {}
    for item in pairs:
        key, sep, text = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        out[key] = _check_key(key, value)
    return out


def effective_config(
    base: dict[str, Any] | None = None, overrides: dict[str, Any] | None = None
) -> dict[str, Any]:
    """Defaults, then file values, then overrides; overrides win."""
    cfg = default_config()
    for source in (base or {}), (overrides or {}):
        for key, value in source.items():
            cfg[key] = _check_key(key, value)
    return cfg


def swap_config_from_dict(
    cfg: dict[str, Any], latent_grid: tuple[int, int] | None = None
) -> SwapConfig:
    """Build a SwapConfig from flat keys.

    bbox_override entries are four ints on the latent grid; the grid
    comes from the bbox_grid key or, failing that, from latent_grid.
    """
    box = None
    if cfg.get("bbox_override") is not None:
        coords = cfg["bbox_override"]
        if len(coords) != 4:
            raise ConfigError(f"bbox_override needs 4 ints, got {coords}")
        grid = cfg.get("bbox_grid") or latent_grid
        if grid is None:
            raise ConfigError("bbox_override given without bbox_grid or a backend grid")
        try:
            box = BBox(
                row_min=int(coords[0]),
                col_min=int(coords[1]),
                row_max=int(coords[2]),
                col_max=int(coords[3]),
                grid=(int(grid[0]), int(grid[1])),
            )
        except ParamError as exc:
            raise ConfigError(f"bbox_override invalid: {exc}") from exc
    secr_layers = cfg.get("secr_layers")
    try:
        return SwapConfig(
            source_prompt=cfg["source_prompt"],
            target_prompt=cfg["target_prompt"],
            source_concept=cfg["source_concept"],
            target_concept=cfg["target_concept"],
            eta=cfg["eta"],
            total_steps=cfg["total_steps"],
            lambda_=cfg["lambda"],
            alpha=cfg["alpha"],
            beta=cfg["beta"],
            guidance=cfg["guidance"],
            t_range=(cfg["t_min"], cfg["t_max"]),
            seed=cfg["seed"],
            bbox_override=box,
            attn_refine=cfg["attn_refine"],
            bbox_timesteps=tuple(int(t) for t in cfg["bbox_timesteps"]),
            secr_layers=None if secr_layers is None else tuple(secr_layers),
            trace=cfg["trace"],
        )
    except ParamError as exc:
        raise ConfigError(str(exc)) from exc


__all__ = [
    "SwapConfig",
    "KNOWN_KEYS",
    "default_config",
    "load_config",
    "parse_overrides",
    "effective_config",
    "swap_config_from_dict",
]
