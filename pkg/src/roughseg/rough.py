"""Pixel-level rough-set representation of segmentation masks.

A segmentation whose pixels cannot all be classified with certainty is
represented by two crisp masks that bound it from below and above:

* lower approximation -- pixels that certainly belong to the anomaly,
* upper approximation -- pixels that possibly belong to the anomaly.

Both are derived either from a per-pixel anomaly-probability raster or
from a set of binary segmentation samples (intersection / union).  The
difference ``upper - lower`` is the boundary region: the suspicious
pixels that cannot be uniquely classified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "RoughLabel",
    "RegionPartition",
    "as_probability_mask",
    "as_binary_mask",
    "lower_of",
    "upper_of",
    "partition",
    "rough_from_samples",
]


def as_probability_mask(values) -> np.ndarray:
    """Validate and return an H x W float raster with entries in [0, 1]."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"probability mask must be 2-D and non-empty, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("probability mask contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(
            f"probability mask values must lie in [0, 1], got range "
            f"[{arr.min():.6g}, {arr.max():.6g}]"
        )
    return arr


def as_binary_mask(values) -> np.ndarray:
    """Validate and return an H x W uint8 raster with entries in {0, 1}."""
    arr = np.asarray(values)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"binary mask must be 2-D and non-empty, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    uniq = np.unique(arr)
    if not np.isin(uniq, (0, 1)).all():
        raise ValueError(f"binary mask values must be 0 or 1, got {uniq[:8]}")
    return arr.astype(np.uint8)


@dataclass(frozen=True)
class RoughLabel:
    """Paired lower/upper approximation masks, ``lower <= upper`` pixelwise.

    Crisp labels use {0, 1} masks; label correction during training
    produces soft-valued bounds in [0, 1].
    """

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower)
        upper = np.asarray(self.upper)
        if lower.shape != upper.shape:
            raise ValueError(f"lower/upper shape mismatch: {lower.shape} vs {upper.shape}")
        if lower.ndim != 2:
            raise ValueError(f"rough label masks must be 2-D, got shape {lower.shape}")
        for name, arr in (("lower", lower), ("upper", upper)):
            a = arr.astype(np.float64)
            if not np.isfinite(a).all() or a.min() < 0.0 or a.max() > 1.0:
                raise ValueError(f"{name} mask values must lie in [0, 1]")
        if (lower.astype(np.float64) > upper.astype(np.float64)).any():
            raise ValueError("containment violated: lower > upper at some pixel")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def boundary(self) -> np.ndarray:
        """Pixels in the upper but not the lower approximation."""
        return np.asarray(self.upper, dtype=np.float64) - np.asarray(self.lower, dtype=np.float64)

    def is_crisp(self) -> bool:
        lo, up = np.asarray(self.lower), np.asarray(self.upper)
        return bool(np.isin(np.unique(lo), (0, 1)).all() and np.isin(np.unique(up), (0, 1)).all())


@dataclass(frozen=True)
class RegionPartition:
    """Disjoint anomaly / boundary / normal masks covering every pixel once."""

    anomaly: np.ndarray
    boundary: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        ano = as_binary_mask(self.anomaly)
        bnd = as_binary_mask(self.boundary)
        nor = as_binary_mask(self.normal)
        if not (ano.shape == bnd.shape == nor.shape):
            raise ValueError("partition masks must share one shape")
        total = ano.astype(np.int64) + bnd + nor
        if (total != 1).any():
            raise ValueError("partition must assign each pixel to exactly one region")
        object.__setattr__(self, "anomaly", ano)
        object.__setattr__(self, "boundary", bnd)
        object.__setattr__(self, "normal", nor)


def _check_tol(tol: float) -> float:
    tol = float(tol)
    if not (0.0 <= tol < 0.5):
        raise ValueError(f"tol must satisfy 0 <= tol < 0.5, got {tol}")
    return tol


def lower_of(prob, tol: float = 1e-6) -> np.ndarray:
    """Lower approximation: pixels whose anomaly probability is 1.

    Float probabilities come out of Monte-Carlo averaging, so exact
    equality with 1 is relaxed: a pixel qualifies when it is strictly
    within ``tol`` of certainty (``prob > 1 - tol``) or exactly 1, so
    ``tol = 0`` recovers the exact rule.
    """
    arr = as_probability_mask(prob)
    tol = _check_tol(tol)
    return ((arr > 1.0 - tol) | (arr >= 1.0)).astype(np.uint8)


def upper_of(prob, tol: float = 1e-6) -> np.ndarray:
    """Upper approximation: pixels whose anomaly probability is positive.

    The exact ``prob > 0`` is relaxed to ``prob > tol``.
    """
    arr = as_probability_mask(prob)
    tol = _check_tol(tol)
    return (arr > tol).astype(np.uint8)


def partition(prob, tol: float = 1e-6) -> RegionPartition:
    """Split a probability mask into anomaly / boundary / normal regions.

    anomaly = lower approximation, normal = complement of the upper
    approximation, boundary = the difference; each pixel lands in
    exactly one region.
    """
    lo = lower_of(prob, tol)
    up = upper_of(prob, tol)
    return RegionPartition(anomaly=lo, boundary=up - lo, normal=1 - up)


def rough_from_samples(samples) -> RoughLabel:
    """Rough label from binary segmentation samples.

    The lower approximation is the pixelwise intersection of the
    samples, the upper approximation their union, so containment holds
    by construction.

    Args:
        samples: non-empty sequence of equally shaped {0, 1} masks.
    """
    masks = [as_binary_mask(s) for s in samples]
    if not masks:
        raise ValueError("rough_from_samples requires at least one sample")
    shape = masks[0].shape
    for i, m in enumerate(masks):
        if m.shape != shape:
            raise ValueError(f"sample {i} has shape {m.shape}, expected {shape}")
    stack = np.stack(masks, axis=0)
    return RoughLabel(lower=stack.min(axis=0), upper=stack.max(axis=0))
