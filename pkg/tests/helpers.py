"""Shared builders for the test suite."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from conceptswap import SwapConfig
from conceptswap.backends import ToyBackend
from conceptswap.bbox import BBox
from conceptswap.imageio import save_image

# planted concept location on the 16x16 latent grid of a 32x32 toy image
RECT = (2, 3, 5, 8)

SOURCE_PROMPT = "a photo of a cat"
TARGET_PROMPT = "a photo of a dog"


def make_toy(**kwargs) -> ToyBackend:
    kwargs.setdefault("image_size", 32)
    kwargs.setdefault("hot_rects", {"cat": RECT})
    return ToyBackend(**kwargs)


def planted_cfg(**kwargs) -> SwapConfig:
    kwargs.setdefault("source_prompt", SOURCE_PROMPT)
    kwargs.setdefault("target_prompt", TARGET_PROMPT)
    kwargs.setdefault("source_concept", "cat")
    kwargs.setdefault("target_concept", "dog")
    kwargs.setdefault("guidance", 1.0)
    kwargs.setdefault("total_steps", 60)
    return SwapConfig(**kwargs)


def rand_image(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    return rng.random((size, size))


def write_layout(
    root: Path,
    concepts: tuple[str, ...] = ("dog", "duck"),
    n_images: int = 3,
    size: int = 16,
    bbox: tuple[int, int, int, int] = (4, 4, 9, 11),
    source_concept: str = "cat",
    seed: int = 0,
) -> Path:
    """Miniature benchmark directory: concept sets, swap images, gt boxes."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    for name in concepts:
        cdir = root / "concepts" / name
        cdir.mkdir(parents=True)
        save_image(cdir / "ref0.png", rng.random((size, size)))
    (root / "swaps").mkdir()
    (root / "gt_bboxes").mkdir()
    lines = ["\t".join(("image", "source_prompt", "source_concept", "target_template"))]
    box = BBox(bbox[0], bbox[1], bbox[2], bbox[3], grid=(size, size))
    for i in range(n_images):
        stem = f"img{i}"
        save_image(root / "swaps" / f"{stem}.png", rng.random((size, size)))
        (root / "gt_bboxes" / f"{stem}.json").write_text(json.dumps(box.to_json()))
        lines.append(
            "\t".join(
                (
                    f"{stem}.png",
                    f"a photo of a {source_concept}",
                    source_concept,
                    "a photo of a {concept}",
                )
            )
        )
    (root / "prompts.tsv").write_text("\n".join(lines) + "\n")
    return root
