"""Procedural noisy-label defect dataset with known uncertainty ground truth.

Each sample is a textured grayscale image carrying defects made of a
full-contrast *core* (certainly defective) surrounded by an *ambiguous
halo* ring whose contrast decays radially to the background.  Simulated
annotators then produce inconsistent labels: every label contains the
core, plus a bias-controlled, spatially coherent subset of the halo.
Over a dataset the same kind of halo pixel is sometimes labeled
defective (over-labeling) and sometimes not (under-labeling).

Because (core, halo) is exactly the true lower/upper approximation pair,
this generator provides the quantitative anchor that real inspection
datasets cannot: their suspicious regions have no clean truth.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import distance_transform_edt

from . import raster_io
from .rough import as_binary_mask

__all__ = [
    "SynthConfig",
    "SyntheticSample",
    "value_noise",
    "generate_image",
    "simulate_annotator",
    "generate_sample",
    "generate_dataset",
    "load_training_samples",
    "load_truth",
    "manifest_hash",
]


@dataclass(frozen=True)
class SynthConfig:
    count: int = 20
    size: int = 64
    defects_per_image: tuple[int, int] = (1, 3)
    halo_width: tuple[float, float] = (3.0, 6.0)
    annotator_bias_range: tuple[float, float] = (0.1, 0.9)
    texture_scale: float = 8.0
    seed: int = 0

    def __post_init__(self):
        if self.count < 0:
            raise ValueError(f"count must be non-negative, got {self.count}")
        if self.size < 8 or self.size % 8 != 0:
            raise ValueError(f"size must be a positive multiple of 8, got {self.size}")
        for name in ("defects_per_image", "halo_width", "annotator_bias_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty: ({lo}, {hi})")
        lo, hi = self.annotator_bias_range
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"annotator_bias_range must lie in [0, 1], got ({lo}, {hi})")
        if self.texture_scale <= 0:
            raise ValueError(f"texture_scale must be positive, got {self.texture_scale}")


@dataclass(frozen=True)
class SyntheticSample:
    """One generated image with its truth masks and noisy annotation.

    Invariant: core and halo are disjoint, and
    core <= noisy_label <= core | halo pixelwise.
    """

    image: np.ndarray
    core: np.ndarray
    halo: np.ndarray
    halo_inner: np.ndarray
    noisy_label: np.ndarray
    annotator_bias: float
    seed: tuple[int, int]

    def __post_init__(self):
        core, halo, label = self.core, self.halo, self.noisy_label
        if (core & halo).any():
            raise ValueError("core and halo overlap")
        if ((label == 1) & (core == 0) & (halo == 0)).any() or ((core == 1) & (label == 0)).any():
            raise ValueError("noisy label escapes the core <= label <= core|halo sandwich")


def value_noise(shape: tuple[int, int], scale: float, rng: np.random.Generator, octaves: int = 3) -> np.ndarray:
    """Multi-octave value noise in [0, 1]: coarse random grids, bilinearly
    upsampled and summed with halving amplitudes."""
    h, w = shape
    out = np.zeros((h, w))
    amp, total = 1.0, 0.0
    cells = max(2.0, scale)
    for _ in range(octaves):
        gh = max(2, int(round(h / cells)) + 1)
        gw = max(2, int(round(w / cells)) + 1)
        grid = rng.random((gh, gw))
        out += amp * cv2.resize(grid, (w, h), interpolation=cv2.INTER_LINEAR)
        total += amp
        amp *= 0.5
        cells = max(2.0, cells / 2.0)
    out /= total
    lo, hi = out.min(), out.max()
    if hi > lo:
        out = (out - lo) / (hi - lo)
    return out


def _segment_distance(h: int, w: int, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(ys - a[0], xs - a[1])
    t = np.clip(((ys - a[0]) * ab[0] + (xs - a[1]) * ab[1]) / denom, 0.0, 1.0)
    return np.hypot(ys - (a[0] + t * ab[0]), xs - (a[1] + t * ab[1]))


def _defect_core(size: int, margin: float, rng: np.random.Generator) -> np.ndarray:
    """Core mask of one random blob or scratch placed inside the margin."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    if rng.random() < 0.5:  # elliptical blob
        cy, cx = rng.uniform(margin, size - margin, size=2)
        ra, rb = rng.uniform(2.5, 6.5, size=2)
        theta = rng.uniform(0.0, np.pi)
        dy, dx = ys - cy, xs - cx
        u = dy * np.cos(theta) + dx * np.sin(theta)
        v = -dy * np.sin(theta) + dx * np.cos(theta)
        return ((u / ra) ** 2 + (v / rb) ** 2 <= 1.0).astype(np.uint8)
    # scratch: thick line segment
    a = rng.uniform(margin, size - margin, size=2)
    angle = rng.uniform(0.0, 2 * np.pi)
    length = rng.uniform(10.0, 0.45 * size)
    b = a + length * np.array([np.sin(angle), np.cos(angle)])
    b = np.clip(b, margin, size - margin)
    thickness = rng.uniform(1.0, 2.2)
    return (_segment_distance(size, size, a, b) <= thickness).astype(np.uint8)


def generate_image(cfg: SynthConfig, rng: np.random.Generator):
    """One textured image with exact core / halo / inner-half-halo masks.

    The core carries full defect contrast; across the halo ring the
    contrast decays linearly to zero at the outer edge.
    """
    size = cfg.size
    background = 0.45 + 0.35 * value_noise((size, size), cfg.texture_scale, rng)
    n_defects = int(rng.integers(cfg.defects_per_image[0], cfg.defects_per_image[1] + 1))
    halo_width = float(rng.uniform(*cfg.halo_width))

    core = np.zeros((size, size), dtype=np.uint8)
    # keep halos inside the frame when the canvas allows it
    margin = min(halo_width + 3.0, (size - 4) / 2.0)
    for _ in range(n_defects):
        core |= _defect_core(size, margin, rng)

    if core.any():
        dist = distance_transform_edt(core == 0)
        halo = ((dist > 0) & (dist <= halo_width)).astype(np.uint8)
        halo_inner = ((dist > 0) & (dist <= halo_width / 2.0)).astype(np.uint8)
        # the ring's contrast decays radially but inside a narrow band
        # (0.50 -> 0.40 of the core contrast): every halo pixel looks
        # comparably suspicious, none looks like the certain core
        ring = (0.50 - 0.10 * np.clip(dist / halo_width, 0.0, 1.0)) * (dist <= halo_width)
        strength = np.where(core == 1, 1.0, ring)
    else:
        halo = np.zeros_like(core)
        halo_inner = np.zeros_like(core)
        strength = np.zeros((size, size))

    # wide contrast range: strong defects are obvious, weak ones are the
    # suspicious kind that annotators disagree about
    amplitude = rng.uniform(0.20, 0.50)

    # phantom smudges: faint standalone marks with the same local look as a
    # halo ring but no defect core behind them; never labeled, true negatives
    phantom = np.zeros((size, size))
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(int(rng.integers(1, 4))):
        for _attempt in range(8):
            py, px = rng.uniform(4, size - 4, size=2)
            radius = rng.uniform(2.0, 4.5)
            d = np.hypot(ys - py, xs - px)
            blob = np.clip(1.0 - d / radius, 0.0, 1.0)
            near_defect = core.any() and ((blob > 0) & ((core | halo) == 1)).any()
            if not near_defect:
                phantom = np.maximum(phantom, rng.uniform(0.35, 0.65) * blob)
                break

    image = background - amplitude * np.maximum(strength, phantom)
    image = image + rng.normal(0.0, 0.02, size=(size, size))
    return np.clip(image, 0.0, 1.0), core, halo, halo_inner


def simulate_annotator(core, halo, bias: float, rng: np.random.Generator) -> np.ndarray:
    """Noisy label: the core plus a coherent bias-fraction of the halo.

    A smooth random field is thresholded at its bias-quantile over the
    halo, so the included pixels form contiguous patches rather than
    salt-and-pepper noise.  bias 0 -> label == core (pure under-labeling),
    bias 1 -> label == core | halo (pure over-labeling).
    """
    core = as_binary_mask(core)
    halo = as_binary_mask(halo)
    if (core & halo).any():
        raise ValueError("core and halo must be disjoint")
    if not (0.0 <= bias <= 1.0):
        raise ValueError(f"bias must lie in [0, 1], got {bias}")

    label = core.copy()
    n_halo = int(halo.sum())
    if n_halo == 0 or bias == 0.0:
        return label
    if bias == 1.0:
        return label | halo

    field = value_noise(core.shape, scale=max(4.0, core.shape[0] / 8.0), rng=rng, octaves=2)
    halo_idx = np.flatnonzero(halo)
    k = int(round(bias * n_halo))
    if k > 0:
        order = np.argsort(field.ravel()[halo_idx], kind="stable")
        chosen = halo_idx[order[:k]]
        label.ravel()[chosen] = 1
    return label


def generate_sample(cfg: SynthConfig, index: int) -> SyntheticSample:
    """Deterministically generate sample ``index`` of the dataset."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(index,)))
    image, core, halo, halo_inner = generate_image(cfg, rng)
    bias = float(rng.uniform(*cfg.annotator_bias_range))
    label = simulate_annotator(core, halo, bias, rng)
    return SyntheticSample(
        image=image,
        core=core,
        halo=halo,
        halo_inner=halo_inner,
        noisy_label=label,
        annotator_bias=bias,
        seed=(cfg.seed, index),
    )


def generate_dataset(cfg: SynthConfig, out_dir) -> dict:
    """Write the dataset to disk and return the manifest.

    Layout: images/ and labels/ are the training inputs; truth/core,
    truth/halo and truth/halo_inner hold the ground-truth masks that the
    training loader never reads.
    """
    out_dir = Path(out_dir)
    entries = []
    for i in range(cfg.count):
        sample = generate_sample(cfg, i)
        stem = f"sample_{i:04d}.png"
        raster_io.save_gray_png(out_dir / "images" / stem, sample.image)
        raster_io.save_binary_png(out_dir / "labels" / stem, sample.noisy_label)
        raster_io.save_binary_png(out_dir / "truth" / "core" / stem, sample.core)
        raster_io.save_binary_png(out_dir / "truth" / "halo" / stem, sample.halo)
        raster_io.save_binary_png(out_dir / "truth" / "halo_inner" / stem, sample.halo_inner)
        entries.append(
            {
                "id": stem,
                "seed": [cfg.seed, i],
                "annotator_bias": round(sample.annotator_bias, 10),
                "image": f"images/{stem}",
                "label": f"labels/{stem}",
            }
        )
    manifest = {
        "config": asdict(cfg),
        "samples": entries,
        "formats": {
            "image": "8-bit gray PNG, v = round(value * 255)",
            "label": "8-bit binary PNG, 0/255",
            "truth": "8-bit binary PNG, 0/255 (not for training)",
        },
    }
    raster_io.write_json(out_dir / "manifest.json", manifest)
    return manifest


def manifest_hash(dataset_dir) -> str:
    """SHA-256 of the manifest file bytes."""
    data = (Path(dataset_dir) / "manifest.json").read_bytes()
    return hashlib.sha256(data).hexdigest()


def load_training_samples(dataset_dir) -> list[tuple[np.ndarray, np.ndarray]]:
    """Load (image, noisy_label) pairs.  Ground truth stays untouched:
    this loader only ever reads images/ and labels/."""
    dataset_dir = Path(dataset_dir)
    import json

    manifest = json.loads((dataset_dir / "manifest.json").read_text())
    pairs = []
    for entry in manifest["samples"]:
        image = raster_io.load_gray_png(dataset_dir / entry["image"])
        label = raster_io.load_binary_png(dataset_dir / entry["label"])
        pairs.append((image, label))
    return pairs


def load_truth(dataset_dir, sample_id: str) -> dict[str, np.ndarray]:
    """Ground-truth masks for one sample; for evaluation only."""
    dataset_dir = Path(dataset_dir)
    return {
        "core": raster_io.load_binary_png(dataset_dir / "truth" / "core" / sample_id),
        "halo": raster_io.load_binary_png(dataset_dir / "truth" / "halo" / sample_id),
        "halo_inner": raster_io.load_binary_png(dataset_dir / "truth" / "halo_inner" / sample_id),
    }
