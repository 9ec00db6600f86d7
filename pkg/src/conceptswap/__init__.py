"""Training-free customized concept swapping.

Swap a concept in a real image for a customized one by optimizing the
image latent with masked two-branch score-distillation gradients,
localized by attention-derived bounding boxes, semantically sharpened
by regional cross-attention injection, and accelerated by periodic
gradient reuse.
"""

from .backends import (
    DenoiserBackend,
    DiffusionAdapterBackend,
    TextEmbedding,
    ToyBackend,
    build_backend,
    register_adapter_loader,
)
from .bbox import BBox, SaliencyMap, generate_bbox, resize_bbox
from .config import SwapConfig, effective_config, load_config, parse_overrides
from .distill import BranchInput, GradientField, bgm_apply, dds_gradient, sds_gradient
from .errors import ConceptSwapError
from .evaluation import MetricsReport, load_layout, run_benchmark
from .pipeline import ConceptSpec, SwapResult, insert, multi_swap, remove, swap
from .secr import install_secr, regional_cross_attention
from .ssgu import GradientCache, SSGUSchedule, apply_update, gradient_for_step, plan

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "BranchInput",
    "ConceptSpec",
    "ConceptSwapError",
    "DenoiserBackend",
    "DiffusionAdapterBackend",
    "GradientCache",
    "GradientField",
    "MetricsReport",
    "SSGUSchedule",
    "SaliencyMap",
    "SwapConfig",
    "SwapResult",
    "TextEmbedding",
    "ToyBackend",
    "apply_update",
    "bgm_apply",
    "build_backend",
    "dds_gradient",
    "effective_config",
    "generate_bbox",
    "gradient_for_step",
    "insert",
    "install_secr",
    "load_config",
    "load_layout",
    "multi_swap",
    "parse_overrides",
    "plan",
    "regional_cross_attention",
    "register_adapter_loader",
    "remove",
    "resize_bbox",
    "run_benchmark",
    "sds_gradient",
    "swap",
    "__version__",
]
