"""Test-time Monte-Carlo inference.

The segmentation probability is the pixelwise mean of T stochastic
forward passes.  Rough bounds come from the binarized passes themselves:
their intersection is the lower approximation, their union the upper --
not from thresholding the averaged probability, which differs for
continuous outputs.  The probability map is reported alongside.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import raster_io
from .rough import RegionPartition, RoughLabel, rough_from_samples
from .unet import SegmentationModel, parameter_count

__all__ = [
    "InferenceConfig",
    "mc_probability",
    "infer_rough",
    "timing_report",
    "write_inference_artifacts",
]


@dataclass(frozen=True)
class InferenceConfig:
    passes: int = 16
    binarize_threshold: float = 0.5
    tol: float = 1e-6

    def __post_init__(self):
        if self.passes < 1:
            raise ValueError(f"passes must be >= 1, got {self.passes}")
        if not (0.0 < self.binarize_threshold < 1.0):
            raise ValueError(f"binarize_threshold must lie in (0, 1), got {self.binarize_threshold}")


def _stochastic(model: SegmentationModel) -> bool:
    # the model's own config decides whether masking stays live at test time
    return bool(model.spec.block_placements) and model.spec.block_dropout.active_in_eval


def _sample_passes(model, image, passes: int, rng) -> np.ndarray:
    stochastic = _stochastic(model)
    return np.stack([model.predict(image, stochastic=stochastic, rng=rng) for _ in range(passes)])


def mc_probability(model: SegmentationModel, image, cfg: InferenceConfig, rng) -> np.ndarray:
    """Pixelwise mean of ``cfg.passes`` stochastic forward passes."""
    return _sample_passes(model, image, cfg.passes, rng).mean(axis=0)


def infer_rough(model: SegmentationModel, image, cfg: InferenceConfig, rng):
    """Probability map plus rough bounds extracted from binarized passes.

    Returns (probability, RoughLabel, RegionPartition) where the
    partition is anomaly = lower, boundary = upper - lower,
    normal = complement of upper.
    """
    if cfg.passes < 2:
        raise ValueError(f"rough inference needs at least 2 passes, got {cfg.passes}")
    preds = _sample_passes(model, image, cfg.passes, rng)
    samples = [(p >= cfg.binarize_threshold).astype(np.uint8) for p in preds]
    rough = rough_from_samples(samples)
    prob = preds.mean(axis=0)
    part = RegionPartition(
        anomaly=rough.lower,
        boundary=rough.upper - rough.lower,
        normal=1 - rough.upper,
    )
    return prob, rough, part


def timing_report(model: SegmentationModel, images, cfg: InferenceConfig, rng=None) -> dict:
    """Mean per-image wall time of full MC inference, plus parameter count."""
    images = list(images)
    if not images:
        raise ValueError("timing_report needs at least one image")
    rng = rng if rng is not None else np.random.default_rng(0)
    per_image = []
    for image in images:
        t0 = time.perf_counter()
        mc_probability(model, image, cfg, rng)
        per_image.append(time.perf_counter() - t0)
    return {
        "images": len(images),
        "passes": cfg.passes,
        "mean_seconds_per_image": float(np.mean(per_image)),
        "total_seconds": float(np.sum(per_image)),
        "parameter_count": parameter_count(model),
    }


def write_inference_artifacts(out_dir, stem: str, prob, rough: RoughLabel, part: RegionPartition, extra: dict | None = None) -> dict:
    """Persist one image's outputs: 16-bit probability PNG, three 8-bit
    region PNGs, and a JSON summary.  Returns the summary."""
    out_dir = Path(out_dir)
    raster_io.save_probability_png(out_dir / f"{stem}_prob.png", prob)
    raster_io.save_binary_png(out_dir / f"{stem}_lower.png", rough.lower)
    raster_io.save_binary_png(out_dir / f"{stem}_upper.png", rough.upper)
    raster_io.save_binary_png(out_dir / f"{stem}_boundary.png", part.boundary)
    summary = {
        "id": stem,
        "area_lower_px": int(np.asarray(rough.lower).sum()),
        "area_upper_px": int(np.asarray(rough.upper).sum()),
        "area_boundary_px": int(part.boundary.sum()),
        "prob_max": round(float(np.max(prob)), 10),
        "prob_mean": round(float(np.mean(prob)), 10),
    }
    if extra:
        summary.update(extra)
    raster_io.write_json(out_dir / f"{stem}_summary.json", summary)
    return summary
