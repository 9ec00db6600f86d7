"""Metrics and the benchmark harness.

Foreground fidelity is scored against the concept images (CLIP image
score on the bbox crop), background preservation with PSNR / LPIPS /
MSE / SSIM after zeroing the bbox region in BOTH images (so foreground
content cannot leak into background numbers), and overall prompt
agreement with a CLIP text score. LPIPS and CLIP run behind pluggable
clients; deterministic stubs keep the whole harness testable offline.

Reports carry raw metric values; the text table applies the display
scalings of its column headers (LPIPS x1e3, MSE x1e4, SSIM x1e2).
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .bbox import BBox, bilinear_resize
from .errors import LayoutError, ScorerUnavailable, ShapeError
from .imageio import load_image

REPORT_COLUMNS = (
    "CLIP-I",
    "PSNR",
    "LPIPS(x1e3)",
    "MSE(x1e4)",
    "SSIM(x1e2)",
    "CLIP-T",
    "Time(s)",
)


# -- fg/bg splitting -------------------------------------------------------


def split_fg_bg(image: np.ndarray, gt_bbox: BBox) -> tuple[np.ndarray, np.ndarray]:
    """Crop the bbox as foreground; zero it out of a copy as background."""
    if gt_bbox.grid != image.shape[:2]:
        raise ShapeError(f"bbox grid {gt_bbox.grid} vs image {image.shape[:2]}")
    fg = image[gt_bbox.row_slice, gt_bbox.col_slice].copy()
    bg = image.copy()
    bg[gt_bbox.row_slice, gt_bbox.col_slice] = 0.0
    return fg, bg


# -- scalar metrics ----------------------------------------------------------


def mse_metric(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"{a.shape} vs {b.shape}")
    return float(np.mean((a.astype(float) - b.astype(float)) ** 2))


def psnr_metric(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """10 log10(peak^2 / mse); +inf when the images are identical."""
    err = mse_metric(a, b)
    if err == 0.0:
        return math.inf
    return float(10.0 * np.log10(data_range**2 / err))


def _ssim_2d(a: np.ndarray, b: np.ndarray, data_range: float, win: int) -> float:
    from numpy.lib.stride_tricks import sliding_window_view

    wa = sliding_window_view(a, (win, win))
    wb = sliding_window_view(b, (win, win))
    np_pix = win * win
    cov_norm = np_pix / (np_pix - 1)  # unbiased, as the standard implementation uses
    ux = wa.mean(axis=(-2, -1))
    uy = wb.mean(axis=(-2, -1))
    uxx = (wa * wa).mean(axis=(-2, -1))
    uyy = (wb * wb).mean(axis=(-2, -1))
    uxy = (wa * wb).mean(axis=(-2, -1))
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / (
        (ux * ux + uy * uy + c1) * (vx + vy + c2)
    )
    return float(s.mean())


def ssim_metric(
    a: np.ndarray, b: np.ndarray, data_range: float = 1.0, win_size: int = 7
) -> float:
    """Mean windowed structural similarity, uniform win_size x win_size windows.

    Window statistics use the unbiased covariance and only fully valid
    windows enter the mean, matching the common reference
    implementation with uniform weighting.
    """
    if a.shape != b.shape:
        raise ShapeError(f"{a.shape} vs {b.shape}")
    if win_size % 2 == 0 or win_size < 3:
        raise ShapeError(f"win_size must be odd and >= 3, got {win_size}")
    if min(a.shape[0], a.shape[1]) < win_size:
        raise ShapeError(f"images {a.shape} smaller than window {win_size}")
    a = a.astype(float)
    b = b.astype(float)
    if a.ndim == 2:
        return _ssim_2d(a, b, data_range, win_size)
    if a.ndim == 3:
        vals = [_ssim_2d(a[..., c], b[..., c], data_range, win_size) for c in range(a.shape[2])]
        return float(np.mean(vals))
    raise ShapeError(f"expected 2-D or 3-D pixels, got {a.shape}")


# -- pluggable clients ---------------------------------------------------------


class PerceptualClient(Protocol):
    def distance(self, a: np.ndarray, b: np.ndarray) -> float: ...


class ClipClient(Protocol):
    def embed_image(self, image: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


def _pooled_gray(image: np.ndarray, grid: int = 8) -> np.ndarray:
    img = np.asarray(image, dtype=float)
    if img.ndim == 3:
        img = img.mean(axis=2)
    return bilinear_resize(img, (grid, grid))


class StubPerceptualClient:
    """Deterministic LPIPS stand-in: mean absolute difference of pooled pixels."""

    def distance(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.abs(_pooled_gray(a) - _pooled_gray(b)).mean())


class StubClipScorer:
    """Deterministic CLIP stand-in.

    Images embed as L2-normalized pooled pixels, text as a seeded hash
    vector, so identical images score cosine 1 and scores are stable
    across runs. Tests may override either embedding with a callable.
    """

    def __init__(
        self,
        image_fn: Callable[[np.ndarray], np.ndarray] | None = None,
        text_fn: Callable[[str], np.ndarray] | None = None,
    ):
        self.image_fn = image_fn
        self.text_fn = text_fn

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        if self.image_fn is not None:
            return np.asarray(self.image_fn(image), dtype=float)
        return _pooled_gray(image).ravel()

    def embed_text(self, text: str) -> np.ndarray:
        if self.text_fn is not None:
            return np.asarray(self.text_fn(text), dtype=float)
        seed = int.from_bytes(
            hashlib.sha256(("clip-text:" + text).encode()).digest()[:8], "little"
        )
        return np.random.default_rng(seed).standard_normal(64)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


# -- metric bundles -------------------------------------------------------------


def background_metrics(
    a: np.ndarray,
    b: np.ndarray,
    data_range: float = 1.0,
    lpips_client: PerceptualClient | None = None,
) -> dict[str, float | None]:
    """psnr / lpips / mse / ssim between two (already bg-masked) images.

    lpips is None when no perceptual client is configured; the other
    three are always computed.
    """
    if a.shape != b.shape:
        raise ShapeError(f"{a.shape} vs {b.shape}")
    return {
        "psnr": psnr_metric(a, b, data_range),
        "lpips": None if lpips_client is None else float(lpips_client.distance(a, b)),
        "mse": mse_metric(a, b),
        "ssim": ssim_metric(a, b, data_range),
    }


def clip_scores(
    generated: np.ndarray,
    concept_images: list[np.ndarray],
    target_prompt: str,
    fg_bbox: BBox,
    scorer: ClipClient | None,
) -> tuple[float, float]:
    """(clip_i, clip_t), each cosine similarity x100.

    clip_i averages the similarity of the generated foreground crop
    against every concept image, embedded whole; clip_t compares the
    full generated image with the target prompt.
    """
    if scorer is None:
        raise ScorerUnavailable("clip_scores needs an image-text embedding client")
    if not concept_images:
        raise ScorerUnavailable("no concept images to score against")
    fg, _ = split_fg_bg(generated, fg_bbox)
    fg_vec = scorer.embed_image(fg)
    sims = [cosine(fg_vec, scorer.embed_image(ci)) for ci in concept_images]
    clip_i = 100.0 * float(np.mean(sims))
    clip_t = 100.0 * cosine(
        scorer.embed_image(generated), scorer.embed_text(target_prompt)
    )
    return clip_i, clip_t


# -- benchmark layout ------------------------------------------------------------

PROMPTS_HEADER = ("image", "source_prompt", "source_concept", "target_template")


@dataclass
class BenchLayout:
    """Directory-backed benchmark: concepts/<name>/*.png, swaps/*.png,
    gt_bboxes/<stem>.json, prompts.tsv."""

    root: Path
    concepts: dict[str, list[Path]]
    swaps: list[Path]
    gt_bboxes: dict[str, BBox]
    prompts: dict[str, dict[str, str]]


def load_layout(root: str | Path) -> BenchLayout:
    root = Path(root)
    if not root.is_dir():
        raise LayoutError(f"benchmark root {root} is not a directory")
    concepts_dir = root / "concepts"
    swaps_dir = root / "swaps"
    bbox_dir = root / "gt_bboxes"
    prompts_path = root / "prompts.tsv"
    for p in (concepts_dir, swaps_dir, bbox_dir):
        if not p.is_dir():
            raise LayoutError(f"missing directory {p}")
    if not prompts_path.is_file():
        raise LayoutError(f"missing prompt table {prompts_path}")

    concepts: dict[str, list[Path]] = {}
    for sub in sorted(concepts_dir.iterdir()):
        if sub.is_dir():
            images = sorted(sub.glob("*.png"))
            if images:
                concepts[sub.name] = images
    if not concepts:
        raise LayoutError(f"no concept image sets under {concepts_dir}")

    swaps = sorted(swaps_dir.glob("*.png"))
    if not swaps:
        raise LayoutError(f"no swap images under {swaps_dir}")

    lines = prompts_path.read_text().splitlines()
    expected_header = "\t".join(PROMPTS_HEADER)
    if not lines or lines[0].rstrip("\n") != expected_header:
        raise LayoutError(f"prompts.tsv must start with header {expected_header!r}")
    prompts: dict[str, dict[str, str]] = {}
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != len(PROMPTS_HEADER):
            raise LayoutError(f"prompts.tsv line {ln}: expected 4 columns, got {len(parts)}")
        # the image column may carry the filename or the bare stem
        prompts[Path(parts[0]).stem] = dict(zip(PROMPTS_HEADER[1:], parts[1:]))

    gt_bboxes: dict[str, BBox] = {}
    for img in swaps:
        stem = img.stem
        bpath = bbox_dir / f"{stem}.json"
        if not bpath.is_file():
            raise LayoutError(f"swap image {img.name} has no gt bbox {bpath.name}")
        gt_bboxes[stem] = BBox.from_json(json.loads(bpath.read_text()))
        if stem not in prompts:
            raise LayoutError(f"swap image {img.name} has no prompts.tsv row")
    return BenchLayout(
        root=root, concepts=concepts, swaps=swaps, gt_bboxes=gt_bboxes, prompts=prompts
    )


# -- the harness --------------------------------------------------------------------


@dataclass(frozen=True)
class SwapTask:
    """Everything a runner needs for one (concept, image) benchmark cell."""

    concept: str
    concept_images: tuple[np.ndarray, ...]
    source_prompt: str
    source_concept: str
    target_prompt: str
    target_concept: str
    gt_bbox: BBox
    seed: int = 0


# runner: (source image, task) -> generated image
BenchRunner = Callable[[np.ndarray, SwapTask], np.ndarray]


def identity_runner(image: np.ndarray, task: SwapTask) -> np.ndarray:
    return image.copy()


@dataclass
class MetricsReport:
    method: str
    clip_i: float | None
    psnr: float | None
    lpips: float | None
    mse: float | None
    ssim: float | None
    clip_t: float | None
    time_s: float | None
    per_image: list[dict] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "columns": list(REPORT_COLUMNS),
            "summary": {
                "clip_i": _jsonable(self.clip_i),
                "psnr": _jsonable(self.psnr),
                "lpips": _jsonable(self.lpips),
                "mse": _jsonable(self.mse),
                "ssim": _jsonable(self.ssim),
                "clip_t": _jsonable(self.clip_t),
                "time_s": _jsonable(self.time_s),
            },
            "rows": [
                {k: _jsonable(v) for k, v in row.items()} for row in self.per_image
            ],
            "failures": list(self.failures),
        }


def _jsonable(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


def _fmt_cell(value: float | None, scale: float = 1.0, width: int = 12) -> str:
    if value is None:
        text = "n/a"
    elif isinstance(value, float) and math.isinf(value):
        text = "inf"
    else:
        text = f"{value * scale:.2f}"
    return text.rjust(width)


def render_table(report: MetricsReport) -> str:
    """Aligned text table, one summary row, columns in the published order."""
    header = "Method".ljust(16) + "".join(c.rjust(12) for c in REPORT_COLUMNS)
    row = report.method.ljust(16)
    row += _fmt_cell(report.clip_i)
    row += _fmt_cell(report.psnr)
    row += _fmt_cell(report.lpips, scale=1e3)
    row += _fmt_cell(report.mse, scale=1e4)
    row += _fmt_cell(report.ssim, scale=1e2)
    row += _fmt_cell(report.clip_t)
    row += _fmt_cell(report.time_s)
    return header + "\n" + row + "\n"


def _mean_or_none(values: list[float]) -> float | None:
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    if any(isinstance(v, float) and math.isinf(v) for v in vals):
        return math.inf
    return float(np.mean(vals))


def run_benchmark(
    layout: BenchLayout,
    runner: BenchRunner,
    out_path: str | Path | None = None,
    *,
    method: str = "ours",
    clip_scorer: ClipClient | None = None,
    lpips_client: PerceptualClient | None = None,
    data_range: float = 1.0,
    jobs: int = 1,
    seed: int = 0,
) -> MetricsReport:
    """Run every (concept, swap image) pair and aggregate metric means.

    Per-pair failures are recorded and excluded from the means rather
    than aborting the sweep. With out_path set, writes <out>.json and
    <out>.txt (the aligned table).
    """
    concept_images = {
        name: tuple(load_image(p) for p in paths)
        for name, paths in layout.concepts.items()
    }
    tasks: list[tuple[str, Path]] = [
        (name, img) for name in sorted(layout.concepts) for img in layout.swaps
    ]

    def run_one(item: tuple[str, Path]) -> dict:
        name, img_path = item
        stem = img_path.stem
        meta = layout.prompts[stem]
        template = meta["target_template"]
        target_prompt = (
            template.replace("{concept}", name) if "{concept}" in template else template
        )
        task = SwapTask(
            concept=name,
            concept_images=concept_images[name],
            source_prompt=meta["source_prompt"],
            source_concept=meta["source_concept"],
            target_prompt=target_prompt,
            target_concept=name,
            gt_bbox=layout.gt_bboxes[stem],
            seed=seed,
        )
        source = load_image(img_path)
        t0 = time.perf_counter()
        generated = runner(source, task)
        elapsed = time.perf_counter() - t0
        _, bg_gen = split_fg_bg(generated, task.gt_bbox)
        _, bg_src = split_fg_bg(source, task.gt_bbox)
        bg = background_metrics(bg_src, bg_gen, data_range, lpips_client)
        if clip_scorer is not None:
            clip_i, clip_t = clip_scores(
                generated, list(task.concept_images), target_prompt, task.gt_bbox, clip_scorer
            )
        else:
            clip_i = clip_t = None
        return {
            "concept": name,
            "image": img_path.name,
            "clip_i": clip_i,
            "psnr": bg["psnr"],
            "lpips": bg["lpips"],
            "mse": bg["mse"],
            "ssim": bg["ssim"],
            "clip_t": clip_t,
            "time_s": elapsed,
        }

    rows: list[dict] = []
    failures: list[str] = []
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(lambda it: _guard(run_one, it), tasks))
    else:
        outcomes = [_guard(run_one, it) for it in tasks]
    for (name, img_path), outcome in zip(tasks, outcomes):
        if isinstance(outcome, Exception):
            failures.append(f"{name}/{img_path.name}: {type(outcome).__name__}: {outcome}")
        else:
            rows.append(outcome)

    report = MetricsReport(
        method=method,
        clip_i=_mean_or_none([r["clip_i"] for r in rows]),
        psnr=_mean_or_none([r["psnr"] for r in rows]),
        lpips=_mean_or_none([r["lpips"] for r in rows]),
        mse=_mean_or_none([r["mse"] for r in rows]),
        ssim=_mean_or_none([r["ssim"] for r in rows]),
        clip_t=_mean_or_none([r["clip_t"] for r in rows]),
        time_s=_mean_or_none([r["time_s"] for r in rows]),
        per_image=rows,
        failures=failures,
    )
    if out_path is not None:
        base = Path(out_path)
        base.parent.mkdir(parents=True, exist_ok=True)
        json_path = base if base.suffix == ".json" else base.with_suffix(".json")
        json_path.write_text(json.dumps(report.to_json(), indent=2) + "\n")
        json_path.with_suffix(".txt").write_text(render_table(report))
    return report


def _guard(fn, item):
    try:
        return fn(item)
    except Exception as exc:  # per-pair isolation, reported not raised
        return exc
