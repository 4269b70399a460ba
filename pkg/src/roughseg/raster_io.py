"""PNG persistence for masks and probability rasters, plus atomic writes.

Conventions (documented in the README):

* binary masks      -> 8-bit single-channel PNG, 0 and 255
* probability masks -> 16-bit single-channel PNG, value = round(p * 65535)
* grayscale images  -> 8-bit single-channel PNG, value = round(v * 255)

All writes go through a temp-file + rename so partially written files
never appear under the final name.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .rough import as_binary_mask, as_probability_mask

__all__ = [
    "atomic_write_bytes",
    "canonical_json",
    "write_json",
    "save_binary_png",
    "load_binary_png",
    "save_probability_png",
    "load_probability_png",
    "save_gray_png",
    "load_gray_png",
]


def atomic_write_bytes(path, data: bytes) -> Path:
    """Write bytes to ``path`` via a same-directory temp file + rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def canonical_json(obj) -> str:
    """Deterministic JSON encoding: sorted keys, no trailing whitespace."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path, obj) -> Path:
    return atomic_write_bytes(path, canonical_json(obj).encode("utf-8"))


def _png_bytes(img: Image.Image) -> bytes:
    import io

    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def save_binary_png(path, mask) -> Path:
    mask = as_binary_mask(mask)
    return atomic_write_bytes(path, _png_bytes(Image.fromarray(mask * np.uint8(255))))


def load_binary_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected single-channel PNG, got shape {arr.shape}")
    uniq = np.unique(arr)
    if not np.isin(uniq, (0, 255)).all():
        raise ValueError(f"{path}: binary PNG must contain only 0 and 255, got {uniq[:8]}")
    return (arr == 255).astype(np.uint8)


def save_probability_png(path, prob) -> Path:
    prob = as_probability_mask(prob)
    scaled = np.round(prob * 65535.0).astype(np.uint16)
    return atomic_write_bytes(path, _png_bytes(Image.fromarray(scaled)))


def load_probability_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected single-channel PNG, got shape {arr.shape}")
    if arr.dtype != np.uint16:
        raise ValueError(f"{path}: probability PNG must be 16-bit, got {arr.dtype}")
    return arr.astype(np.float64) / 65535.0


def save_gray_png(path, image) -> Path:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"grayscale image must be 2-D, got shape {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("grayscale image values must lie in [0, 1]")
    return atomic_write_bytes(path, _png_bytes(Image.fromarray(np.round(arr * 255.0).astype(np.uint8))))


def load_gray_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"))
    return arr.astype(np.float64) / 255.0
