"""Lossless image file handling and wire encoding.

Pixels travel as floats in [0, 1] inside the toolkit; files are 8-bit
PNG (grayscale or RGB). Base64 PNG is the wire form for the service.
"""

from __future__ import annotations

import base64
import io
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ShapeError


def _to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(arr, dtype=float) * 255.0), 0, 255).astype(
        np.uint8
    )


def _to_pil(arr: np.ndarray) -> Image.Image:
    if arr.ndim == 2:
        return Image.fromarray(_to_uint8(arr), mode="L")
    if arr.ndim == 3 and arr.shape[2] == 3:
        return Image.fromarray(_to_uint8(arr), mode="RGB")
    raise ShapeError(f"expected (h, w) or (h, w, 3) pixels, got {arr.shape}")


def _from_pil(img: Image.Image) -> np.ndarray:
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB") if len(img.getbands()) > 1 else img.convert("L")
    return np.asarray(img, dtype=float) / 255.0


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        return _from_pil(img)


def save_image(path: str | Path, arr: np.ndarray) -> None:
    _to_pil(arr).save(Path(path), format="PNG")


def image_to_b64(arr: np.ndarray) -> str:
    buf = io.BytesIO()
    _to_pil(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def b64_to_image(data: str) -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
    except Exception as exc:
        raise ShapeError(f"image payload is not valid base64: {exc}") from exc
    with Image.open(io.BytesIO(raw)) as img:
        return _from_pil(img)
