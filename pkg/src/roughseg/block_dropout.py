"""Block-structured Bernoulli feature masking with renormalization.

Drops contiguous square blocks from a feature map instead of independent
units, then rescales the survivors so the expected activation sum is
preserved.  A single spatial mask is shared across channels.  Keeping the
masking active at test time turns a deterministic network into an
approximate Bayesian one whose forward passes can be sampled.

Seed placement follows the DropBlock convention: one Bernoulli seed per
valid spatial location (the centered ``(h - L + 1) x (w - L + 1)``
region), each seed zeroing the ``L x L`` block around it via a stride-1
max pool.  The classic seed probability

    gamma = ((1 - p) / L^2) * (W^2 / (W - L + 1)^2)

is a first-order design target for a dropped-area fraction of ``1 - p``;
it ignores block overlap, which at p = 0.5 loses ~0.1 of drop mass.
``sample_block_mask`` therefore calibrates the actual seed rate so the
*expected* dropped fraction equals gamma's no-overlap target exactly
(see ``_calibrated_seed_rate``).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn
from scipy.ndimage import maximum_filter
from scipy.signal import convolve2d

__all__ = [
    "BlockDropoutConfig",
    "BlockMask",
    "MaskResampleRequired",
    "gamma",
    "sample_block_mask",
    "apply_block_mask",
    "block_dropout",
    "BlockDropout2d",
]

MAX_RESAMPLE_ATTEMPTS = 100


class MaskResampleRequired(RuntimeError):
    """Raised when a sampled mask keeps zero cells; the caller must redraw."""


@dataclass(frozen=True)
class BlockDropoutConfig:
    """Parameters of the block-dropout layer.

    Attributes:
        p: target keep probability in (0, 1]; the drop fraction is 1 - p.
        block_size: odd side length L of the dropped square blocks.
        active_in_eval: keep masking stochastic at test time (the default;
            switching it off reduces Monte-Carlo inference to a single
            deterministic pass).
    """

    p: float = 0.5
    block_size: int = 3
    active_in_eval: bool = True

    def __post_init__(self):
        if not (0.0 < self.p <= 1.0):
            raise ValueError(f"keep probability p must lie in (0, 1], got {self.p}")
        if self.block_size < 1 or self.block_size % 2 == 0:
            raise ValueError(f"block_size must be an odd positive integer, got {self.block_size}")

    @property
    def drop_fraction(self) -> float:
        return 1.0 - self.p


@dataclass(frozen=True)
class BlockMask:
    """A sampled {0, 1} spatial mask whose zero set is a union of blocks."""

    values: np.ndarray
    block_size: int
    kept_count: int
    total_count: int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.uint8)
        if vals.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {vals.shape}")
        kept = int(vals.sum())
        if kept != self.kept_count or vals.size != self.total_count:
            raise ValueError("kept_count/total_count inconsistent with mask values")
        object.__setattr__(self, "values", vals)

    @property
    def dropped_fraction(self) -> float:
        return 1.0 - self.kept_count / self.total_count

    def stats(self) -> dict:
        """JSON-ready mask statistics."""
        h, w = self.values.shape
        return {
            "height": h,
            "width": w,
            "block_size": self.block_size,
            "kept_count": self.kept_count,
            "total_count": self.total_count,
            "dropped_fraction": self.dropped_fraction,
        }


def _gamma_rect(p: float, block_size: int, h: int, w: int) -> float:
    if not (0.0 < p <= 1.0):
        raise ValueError(f"keep probability p must lie in (0, 1], got {p}")
    if block_size < 1 or block_size > min(h, w):
        raise ValueError(f"block_size {block_size} must satisfy 1 <= L <= min({h}, {w})")
    g = ((1.0 - p) / block_size**2) * ((h * w) / ((h - block_size + 1) * (w - block_size + 1)))
    return min(1.0, g)


def gamma(p: float, block_size: int, feat_size: int) -> float:
    """Seed-sampling probability for a square feature map.

    gamma = ((1 - p) / L^2) * (W^2 / (W - L + 1)^2), clamped at 1 for
    extreme L/W.  p = 1 (keep everything) gives 0.
    """
    return _gamma_rect(p, block_size, feat_size, feat_size)


@lru_cache(maxsize=256)
def _coverage_counts(h: int, w: int, block_size: int) -> np.ndarray:
    """Per-cell count of valid seed positions whose block covers the cell."""
    half = block_size // 2
    indicator = np.zeros((h, w))
    indicator[half : h - half, half : w - half] = 1.0
    return convolve2d(indicator, np.ones((block_size, block_size)), mode="same")


@lru_cache(maxsize=1024)
def _calibrated_seed_rate(h: int, w: int, block_size: int, g: float) -> float:
    """Seed rate whose expected dropped fraction hits gamma's design target.

    With i.i.d. Bernoulli(g) seeds the expected dropped fraction is
    ``mean_c(1 - (1 - g)^{n_c})`` where n_c counts the seed positions
    covering cell c; block overlap makes this fall short of the
    no-overlap target ``g * L^2 * (h-L+1)(w-L+1) / (h*w)``.  The target
    is monotone in the seed rate, so solve for it by bisection.
    """
    if g <= 0.0:
        return 0.0
    target = min(1.0, g * block_size**2 * (h - block_size + 1) * (w - block_size + 1) / (h * w))
    if target >= 1.0:
        return 1.0
    counts = _coverage_counts(h, w, block_size)
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if float(np.mean(1.0 - (1.0 - mid) ** counts)) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sample_block_mask(h: int, w: int, g: float, block_size: int, rng: np.random.Generator) -> BlockMask:
    """Draw one block-structured {0, 1} mask of shape (h, w).

    Seeds are drawn i.i.d. over the centered valid region at a rate
    calibrated from ``g`` (see module docstring); every seed zeroes the
    ``block_size x block_size`` block around it.
    """
    block_size = int(block_size)
    if block_size % 2 == 0 or block_size < 1:
        raise ValueError(f"block_size must be an odd positive integer, got {block_size}")
    if block_size > min(h, w):
        raise ValueError(f"block_size {block_size} exceeds feature size ({h}, {w})")
    if not (0.0 <= g <= 1.0):
        raise ValueError(f"gamma must lie in [0, 1], got {g}")

    rate = _calibrated_seed_rate(int(h), int(w), block_size, float(g))
    half = block_size // 2
    seeds = np.zeros((h, w), dtype=np.uint8)
    valid = (h - block_size + 1, w - block_size + 1)
    seeds[half : half + valid[0], half : half + valid[1]] = rng.random(valid) < rate
    blocked = maximum_filter(seeds, size=block_size, mode="constant", cval=0)
    values = (1 - blocked).astype(np.uint8)
    return BlockMask(
        values=values,
        block_size=block_size,
        kept_count=int(values.sum()),
        total_count=values.size,
    )


def apply_block_mask(features, mask: BlockMask):
    """Mask a (..., H, W) feature tensor and renormalize the survivors.

    Every channel is multiplied by the shared spatial mask, then scaled by
    total/kept so masked cells are exactly zero and the rest are scaled up.
    Accepts numpy arrays or torch tensors.
    """
    if mask.kept_count == 0:
        raise MaskResampleRequired("block mask kept zero cells; redraw the mask")
    h, w = mask.values.shape
    if features.shape[-2:] != (h, w):
        raise ValueError(f"feature shape {tuple(features.shape)} does not match mask ({h}, {w})")
    scale = mask.total_count / mask.kept_count
    if isinstance(features, torch.Tensor):
        m = torch.from_numpy(mask.values).to(dtype=features.dtype, device=features.device)
        return features * m * scale
    return features * mask.values.astype(features.dtype) * scale


def block_dropout(features, config: BlockDropoutConfig, stochastic: bool, rng: np.random.Generator | None):
    """Full layer forward: sample a fresh mask and apply it.

    ``stochastic=False`` (or p = 1) is the identity.  A mask that keeps
    zero cells is redrawn; pathological configs that can never keep a
    cell fail after MAX_RESAMPLE_ATTEMPTS.
    """
    if not stochastic or config.p >= 1.0:
        return features
    if rng is None:
        raise ValueError("stochastic block dropout requires an rng stream")
    h, w = features.shape[-2:]
    g = _gamma_rect(config.p, config.block_size, h, w)
    for _ in range(MAX_RESAMPLE_ATTEMPTS):
        mask = sample_block_mask(h, w, g, config.block_size, rng)
        if mask.kept_count > 0:
            return apply_block_mask(features, mask)
    raise MaskResampleRequired(
        f"no mask with surviving cells after {MAX_RESAMPLE_ATTEMPTS} draws "
        f"(p={config.p}, L={config.block_size}, feature {h}x{w})"
    )


class BlockDropout2d(nn.Module):
    """Torch layer form; sits at normalization slots inside backbones.

    The stochastic flag and rng stream are passed per call rather than
    read from module state, so shared models stay safe under concurrent
    forward passes.  ``fixed_mask`` overrides sampling, which gradient
    checks use to freeze the stochastic path.
    """

    def __init__(self, config: BlockDropoutConfig):
        super().__init__()
        self.config = config
        self.fixed_mask: BlockMask | None = None

    def forward(self, x, stochastic: bool = False, rng: np.random.Generator | None = None):
        if self.fixed_mask is not None:
            return apply_block_mask(x, self.fixed_mask)
        if not stochastic or self.config.p >= 1.0:
            return x
        # one independent mask per batch element
        return torch.stack(
            [block_dropout(x[b], self.config, True, rng) for b in range(x.shape[0])], dim=0
        )

    def extra_repr(self):
        return f"p={self.config.p}, block_size={self.config.block_size}"
