#!/usr/bin/env python3
"""Run the full-scale swap benchmark against a real diffusion backend.

This is the deployment-scale counterpart of the `conceptswap bench`
command: it sweeps every (target concept, source image) pair in a
benchmark directory (see docs/benchmark_layout.md), runs a complete
localized swap per pair on the diffusion-adapter backend, and writes
the aggregate table next to a JSON report.

The adapter backend loads no weights by itself. Point --loader-module
at a module that calls conceptswap.backends.register_adapter_loader()
at import time; it receives the --checkpoint reference and returns the
loaded model. Without one, this script exits with the adapter's own
error message. CLIP-I/CLIP-T and LPIPS columns need scoring clients;
--stub-metrics substitutes the deterministic test stubs, which is only
useful for dry runs of the harness itself.

Example:
    python3 scripts/run_paper_benchmark.py \\
        --layout /data/swapbench \\
        --checkpoint /ckpts/concepts.safetensors \\
        --loader-module mydeploy.sd21_loader \\
        --out reports/swapbench.json \\
        --set guidance=7.5 --set lambda=5
"""

from __future__ import annotations

import argparse
import importlib
import sys
from dataclasses import replace

import numpy as np

from conceptswap.backends import build_backend
from conceptswap.config import (
    effective_config,
    load_config,
    parse_overrides,
    swap_config_from_dict,
)
from conceptswap.errors import ConceptSwapError
from conceptswap.evaluation import (
    StubClipScorer,
    StubPerceptualClient,
    load_layout,
    render_table,
    run_benchmark,
)
from conceptswap.pipeline import ConceptSpec, swap


def make_runner(cfg_dict: dict, checkpoint: str):
    """One full swap per benchmark cell, a fresh backend each call."""

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
        spec = ConceptSpec(token=task.target_concept, checkpoint_ref=checkpoint)
        return swap(image, cfg, spec, backend).image

    return runner


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--layout", required=True, help="benchmark directory")
    parser.add_argument("--checkpoint", default="", help="concept checkpoint reference")
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override a config key (repeatable)",
    )
    parser.add_argument("--out", default="benchmark_report.json", help="report path")
    parser.add_argument("--jobs", type=int, default=1, help="parallel swap workers")
    parser.add_argument("--seed", type=int, default=0, help="seed used for every pair")
    parser.add_argument(
        "--loader-module",
        help="module imported for its register_adapter_loader() side effect",
    )
    parser.add_argument(
        "--stub-metrics", action="store_true",
        help="score with the deterministic test stubs instead of real clients",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_arg_parser().parse_args(argv)
    if args.loader_module:
        importlib.import_module(args.loader_module)

    base = load_config(args.config) if args.config else None
    overrides = parse_overrides(args.set)
    overrides["backend"] = "diffusion-adapter"
    overrides["adapter_checkpoint"] = args.checkpoint
    cfg_dict = effective_config(base, overrides)

    layout = load_layout(args.layout)
    report = run_benchmark(
        layout,
        make_runner(cfg_dict, args.checkpoint),
        args.out,
        method="ours",
        clip_scorer=StubClipScorer() if args.stub_metrics else None,
        lpips_client=StubPerceptualClient() if args.stub_metrics else None,
        data_range=cfg_dict["data_range"],
        jobs=args.jobs,
        seed=args.seed,
    )
    print(render_table(report), end="")
    if report.failures:
        print(f"{len(report.failures)} run(s) failed and were excluded:", file=sys.stderr)
        for line in report.failures:
            print(f"  {line}", file=sys.stderr)
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    try:
        sys.exit(main())
    except ConceptSwapError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        sys.exit(1)
