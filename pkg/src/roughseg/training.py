"""Training loop with variance-based label correction.

Each step after the warm-up phase runs the stochastic model several
times without gradients, turns the per-pixel variance of those passes
into a normalized uncertainty map, and relaxes the crisp noisy label
into a rough (lower, upper) pair: certainly-labeled pixels keep their
value, uncertain ones get slack proportional to the model's own
disagreement.  One additional stochastic pass, this time with
gradients, is scored against that rough label.

The correction passes are pure reads of frozen weights (eval mode,
no_grad), so they contribute no gradients and do not perturb batch-norm
statistics; only the gradient pass trains.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import metrics as metrics_mod
from .losses import LossConfig, l2_penalty, rough_tversky_batch
from .raster_io import atomic_write_bytes
from .rough import RoughLabel, as_binary_mask
from .unet import SegmentationModel, config_hash, save_checkpoint

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "FitResult",
    "mc_stats",
    "normalize_var",
    "correct_label",
    "fit",
]


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; training aborted with diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.003
    lr_decay: float = 0.0001
    batch_size: int = 4
    epochs: int = 10
    correction_passes: int = 8
    warmup_epochs: int = 2
    loss: LossConfig = field(default_factory=LossConfig)
    metric_images: int = 16
    metric_passes: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.lr_decay < 0:
            raise ValueError(f"lr_decay must be non-negative, got {self.lr_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.correction_passes < 2:
            raise ValueError(f"correction_passes must be >= 2, got {self.correction_passes}")
        if self.warmup_epochs < 0:
            raise ValueError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")


@dataclass
class FitResult:
    model: SegmentationModel
    metrics: list[dict]
    checkpoint_base: Path | None
    containment_pixels_checked: int
    containment_violations: int
    wall_seconds: float


def mc_stats(model: SegmentationModel, image, passes: int, rng: np.random.Generator):
    """Pixelwise mean and (population) variance of ``passes`` stochastic
    forward passes.  No gradients are tracked."""
    if passes < 2:
        raise ValueError(f"need at least 2 passes for variance, got {passes}")
    preds = np.stack([model.predict(image, stochastic=True, rng=rng) for _ in range(passes)])
    mean = preds.mean(axis=0)
    variance = ((preds - mean) ** 2).mean(axis=0)
    return mean, variance


# spans at or below this are float accumulation noise, not model disagreement
# (single-precision passes jitter at the 1e-7 level, variance ~1e-14)
_VARIANCE_NOISE_FLOOR = 1e-10


def normalize_var(variance) -> np.ndarray:
    """Min-max normalize a non-negative variance raster per image.

    A (near-)constant raster maps to all zeros: min-max scaling would
    otherwise amplify last-bit float jitter of a deterministic model
    into a full-scale correction signal.
    """
    arr = np.asarray(variance, dtype=np.float64)
    if (arr < 0).any() or not np.isfinite(arr).all():
        raise ValueError("variance raster must be finite and non-negative")
    lo, hi = arr.min(), arr.max()
    if hi - lo <= _VARIANCE_NOISE_FLOOR:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def correct_label(y, sigma_hat) -> RoughLabel:
    """Relax a crisp noisy label into rough bounds using normalized variance.

    lower = y * (1 - sigma_hat), upper = min(1, y + sigma_hat);
    lower <= y <= upper holds pixelwise by construction.
    """
    yb = as_binary_mask(y).astype(np.float64)
    s = np.asarray(sigma_hat, dtype=np.float64)
    if s.shape != yb.shape:
        raise ValueError(f"shape mismatch: label {yb.shape} vs sigma_hat {s.shape}")
    if s.min() < 0.0 or s.max() > 1.0:
        raise ValueError("sigma_hat must lie in [0, 1]")
    return RoughLabel(lower=yb * (1.0 - s), upper=np.minimum(1.0, yb + s))


def _normalize_var_batch(var: torch.Tensor) -> torch.Tensor:
    flat = var.flatten(1)
    lo = flat.min(dim=1).values[:, None, None]
    hi = flat.max(dim=1).values[:, None, None]
    span = hi - lo
    live = span > _VARIANCE_NOISE_FLOOR
    return torch.where(
        live, (var - lo) / torch.where(live, span, torch.ones_like(span)), torch.zeros_like(var)
    )


def _epoch_metrics(model, images, labels, passes: int, rng) -> dict:
    from .rough import rough_from_samples

    rec, prec, jac = [], [], []
    for image, label in zip(images, labels):
        preds = np.stack([model.predict(image, stochastic=True, rng=rng) for _ in range(passes)])
        samples = [(p >= 0.5).astype(np.uint8) for p in preds]
        rough = rough_from_samples(samples)
        prob = preds.mean(axis=0)
        rec.append(metrics_mod.recall_upper(rough.upper, label))
        prec.append(metrics_mod.precision_lower(rough.lower, label))
        jac.append(metrics_mod.iou((prob >= 0.5).astype(np.uint8), label))
    return {
        "recall_upper": float(np.mean(rec)),
        "precision_lower": float(np.mean(prec)),
        "iou": float(np.mean(jac)),
    }


def fit(model: SegmentationModel, dataset, cfg: TrainConfig, out_dir=None) -> FitResult:
    """Train ``model`` on (image, noisy_label) pairs.

    During ``warmup_epochs`` the rough label is the crisp (y, y); after
    that each step corrects the batch labels from the current weights.
    Every corrected label is hard-checked for lower <= y <= upper at
    every pixel.  A checkpoint and one metric-log line are emitted per
    epoch when ``out_dir`` is given; everything is reproducible under
    ``cfg.seed``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    t0 = time.perf_counter()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    images = [np.asarray(img, dtype=np.float64) for img, _ in dataset]
    labels = [as_binary_mask(lbl) for _, lbl in dataset]
    x_all = torch.from_numpy(np.stack(images)[:, None, :, :].astype(np.float32))
    y_all = torch.from_numpy(np.stack(labels).astype(np.float32))

    # independent streams: batch shuffling, dropout masks, metric sampling
    shuffle_rng, mask_rng, metric_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(3)
    )
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate)
    cfg_hash = config_hash(asdict(cfg))

    n = len(dataset)
    metric_count = min(cfg.metric_images, n)
    checked = 0
    violations = 0
    log: list[dict] = []
    checkpoint_base = out_dir / "checkpoint" if out_dir is not None else None

    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * max(0.0, 1.0 - cfg.lr_decay * epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        order = shuffle_rng.permutation(n)
        epoch_losses = []
        # an inert stochastic path (no placements, or keep probability 1)
        # yields identical passes: sigma is zero by construction, so the
        # correction reduces to crisp labels without sampling
        corrigible = bool(model.spec.block_placements) and model.spec.block_dropout.p < 1.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = x_all[idx]
            y = y_all[idx]

            if epoch < cfg.warmup_epochs or not corrigible:
                lower, upper = y, y
            else:
                model.eval()
                with torch.no_grad():
                    stack = torch.stack(
                        [model(x, stochastic=True, rng=mask_rng)[:, 0] for _ in range(cfg.correction_passes)]
                    )
                    mean = stack.mean(dim=0)
                    var = ((stack - mean) ** 2).mean(dim=0)
                    sigma = _normalize_var_batch(var)
                    lower = y * (1.0 - sigma)
                    upper = torch.clamp(y + sigma, max=1.0)
                checked += int(y.numel())
                bad = int(((lower > y) | (upper < y)).sum())
                violations += bad
                assert bad == 0, f"label-correction containment violated on {bad} pixels"

            model.train()
            pred = model(x, stochastic=True, rng=mask_rng)[:, 0]
            loss = rough_tversky_batch(pred, lower, upper, cfg.loss.alpha, cfg.loss.epsilon).mean()
            if cfg.loss.weight_decay > 0:
                loss = loss + l2_penalty(model, cfg.loss.weight_decay)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {start // cfg.batch_size} (lr={lr:.3g})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))

        model.eval()
        entry = {"epoch": epoch, "loss": float(np.mean(epoch_losses))}
        entry.update(
            _epoch_metrics(
                model, images[:metric_count], labels[:metric_count], cfg.metric_passes, metric_rng
            )
        )
        log.append(entry)
        if out_dir is not None:
            save_checkpoint(checkpoint_base, model, training_config_hash=cfg_hash, epoch=epoch)
            lines = "".join(json.dumps(e, sort_keys=True) + "\n" for e in log)
            atomic_write_bytes(out_dir / "metrics.jsonl", lines.encode("utf-8"))

    model.eval()
    return FitResult(
        model=model,
        metrics=log,
        checkpoint_base=checkpoint_base,
        containment_pixels_checked=checked,
        containment_violations=violations,
        wall_seconds=time.perf_counter() - t0,
    )
