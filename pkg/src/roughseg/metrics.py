"""Evaluation protocol: recall against the upper approximation, precision
against the lower approximation, IoU, plus oracle metrics that are only
possible on synthetic data with known core/halo ground truth.

Empty-denominator cases are legal (defect-free images) and resolve by
convention rather than erroring: empty label -> recall 1, empty
prediction -> precision 1, both masks empty -> IoU 1.
"""

from __future__ import annotations

import numpy as np

from .rough import RoughLabel, as_binary_mask

__all__ = ["recall_upper", "precision_lower", "iou", "oracle_eval"]


def _pair(pred, label) -> tuple[np.ndarray, np.ndarray]:
    p, l = as_binary_mask(pred), as_binary_mask(label)
    if p.shape != l.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {l.shape}")
    return p, l


def recall_upper(pred_upper, label) -> float:
    """|pred_upper & label| / |label|; 1.0 when the label is empty."""
    p, l = _pair(pred_upper, label)
    denom = int(l.sum())
    if denom == 0:
        return 1.0
    return float((p & l).sum() / denom)


def precision_lower(pred_lower, label) -> float:
    """|pred_lower & label| / |pred_lower|; 1.0 when the prediction is empty."""
    p, l = _pair(pred_lower, label)
    denom = int(p.sum())
    if denom == 0:
        return 1.0
    return float((p & l).sum() / denom)


def iou(pred, label) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    p, l = _pair(pred, label)
    union = int((p | l).sum())
    if union == 0:
        return 1.0
    return float((p & l).sum() / union)


def oracle_eval(pred: RoughLabel, truth_core, truth_halo) -> dict:
    """Score a predicted rough label against synthetic ground truth.

    Returns IoU of the predicted lower approximation vs the certain core,
    predicted upper vs core + halo, and predicted boundary vs the halo.
    Requires a crisp prediction.
    """
    core = as_binary_mask(truth_core)
    halo = as_binary_mask(truth_halo)
    lower = as_binary_mask(pred.lower)
    upper = as_binary_mask(pred.upper)
    if core.shape != halo.shape or core.shape != lower.shape:
        raise ValueError("shape mismatch between prediction and truth masks")
    boundary = (upper & ~lower.astype(bool)).astype(np.uint8)
    return {
        "iou_lower_vs_core": iou(lower, core),
        "iou_upper_vs_core_halo": iou(upper, core | halo),
        "boundary_agreement": iou(boundary, halo),
    }
