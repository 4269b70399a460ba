"""Tversky-style loss against rough (lower/upper bounded) labels.

The precision penalty is computed against the lower approximation (the
certainly-anomalous pixels) and the recall penalty against the upper
approximation (the possibly-anomalous pixels), so inconsistently
annotated boundary pixels stop pulling the model in both directions:

    P = sum(lower * pred) / (sum(lower * pred) + sum((1 - lower) * pred) + eps)
    R = sum(upper * pred) / (sum(upper * pred) + sum(upper * (1 - pred)) + eps)
    loss = 1 - alpha * P - beta * R,   alpha + beta = 1

With a crisp label (lower == upper == y) this reduces to
1 - alpha * precision - beta * recall of the soft confusion counts.
The eps smoothing keeps empty predictions/labels off 0/0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .rough import RoughLabel

__all__ = ["LossConfig", "rough_tversky", "rough_tversky_batch", "l2_penalty"]


@dataclass(frozen=True)
class LossConfig:
    """alpha weights the precision penalty; beta is derived as 1 - alpha."""

    alpha: float = 0.5
    epsilon: float = 1e-6
    weight_decay: float = 1e-4

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.weight_decay < 0.0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")

    @property
    def beta(self) -> float:
        return 1.0 - self.alpha


def rough_tversky_batch(
    pred: torch.Tensor,
    lower: torch.Tensor,
    upper: torch.Tensor,
    alpha: float,
    epsilon: float,
) -> torch.Tensor:
    """Per-image losses for (B, H, W) tensors; differentiable w.r.t. pred."""
    beta = 1.0 - alpha
    dims = tuple(range(1, pred.ndim))
    tp_lower = (lower * pred).sum(dim=dims)
    fp = ((1.0 - lower) * pred).sum(dim=dims)
    tp_upper = (upper * pred).sum(dim=dims)
    fn = (upper * (1.0 - pred)).sum(dim=dims)
    precision = tp_lower / (tp_lower + fp + epsilon)
    recall = tp_upper / (tp_upper + fn + epsilon)
    return 1.0 - alpha * precision - beta * recall


def rough_tversky(pred, label, cfg: LossConfig | None = None):
    """Loss of one predicted probability mask against a rough label.

    Args:
        pred: H x W probabilities, numpy array or torch tensor.
        label: RoughLabel (soft-valued bounds allowed) or (lower, upper) pair.
        cfg: LossConfig; defaults apply when omitted.

    Returns a float for numpy input, a scalar tensor (with gradients)
    for torch input.
    """
    cfg = cfg or LossConfig()
    if isinstance(label, RoughLabel):
        lower, upper = label.lower, label.upper
    else:
        lower, upper = label
        lower, upper = np.asarray(lower), np.asarray(upper)
        if (lower.astype(np.float64) > upper.astype(np.float64)).any():
            raise ValueError("containment violated: lower > upper at some pixel")

    is_tensor = isinstance(pred, torch.Tensor)
    pred_t = pred if is_tensor else torch.as_tensor(np.asarray(pred, dtype=np.float64))
    lower_t = torch.as_tensor(np.asarray(lower), dtype=pred_t.dtype)
    upper_t = torch.as_tensor(np.asarray(upper), dtype=pred_t.dtype)
    if pred_t.shape != lower_t.shape:
        raise ValueError(f"pred shape {tuple(pred_t.shape)} != label shape {tuple(lower_t.shape)}")

    loss = rough_tversky_batch(
        pred_t.unsqueeze(0), lower_t.unsqueeze(0), upper_t.unsqueeze(0), cfg.alpha, cfg.epsilon
    )[0]
    return loss if is_tensor else float(loss)


def l2_penalty(model: torch.nn.Module, weight_decay: float) -> torch.Tensor:
    """weight_decay * sum of squared L2 norms over weight matrices/kernels.

    Only parameters of dimension >= 2 enter (conv/linear weights); biases
    and normalization affine parameters are excluded.  Dropout masks carry
    no trainable bias, so they contribute nothing by construction.
    """
    if weight_decay < 0.0:
        raise ValueError(f"weight_decay must be non-negative, got {weight_decay}")
    if weight_decay == 0.0:
        return torch.tensor(0.0)
    total = None
    for p in model.parameters():
        if p.requires_grad and p.dim() >= 2:
            term = p.pow(2).sum()
            total = term if total is None else total + term
    if total is None:
        return torch.tensor(0.0)
    return weight_decay * total
