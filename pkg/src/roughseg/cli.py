"""Operator CLI: dataset synthesis, training, inference, evaluation, grading.

Configuration is a flat JSON file; precedence is CLI flag > config file >
built-in default.  Every subcommand is deterministic under an explicit
--seed.  Relative --out paths resolve under $ROUGHSEG_OUTPUT_ROOT when it
is set.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np

from . import grading, inference, raster_io, synthetic, training, unet
from .block_dropout import BlockDropoutConfig
from .losses import LossConfig
from .metrics import iou as iou_metric
from .metrics import oracle_eval, precision_lower, recall_upper

OUTPUT_ROOT_ENV = "ROUGHSEG_OUTPUT_ROOT"


def _out_path(p) -> Path:
    p = Path(p)
    if p.is_absolute():
        return p
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / p


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise click.ClickException(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(data, dict):
        raise click.ClickException(f"{path}: config must be a flat JSON object")
    return data


def _merged(defaults: dict, config: dict, flags: dict, *, context: str) -> dict:
    out = dict(defaults)
    for key, value in config.items():
        if key not in defaults:
            click.echo(f"warning: ignoring unknown {context} config key '{key}'", err=True)
            continue
        out[key] = value
    for key, value in flags.items():
        if value is not None:
            out[key] = value
    return out


def _require(merged: dict, key: str, context: str):
    if merged.get(key) is None:
        raise click.ClickException(f"{context} requires key '{key}' (flag or config file)")
    return merged[key]


@click.group()
def main():
    """Uncertainty-aware defect segmentation from inconsistent labels."""


# ---------------------------------------------------------------- synth

_SYNTH_DEFAULTS = {
    "count": None,  # required
    "size": 64,
    "defects_min": 1,
    "defects_max": 3,
    "halo_min": 3.0,
    "halo_max": 6.0,
    "bias_min": 0.1,
    "bias_max": 0.9,
    "texture_scale": 8.0,
    "seed": 0,
    "out": "dataset",
}


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--count", type=int, default=None)
@click.option("--size", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(file_okay=False), default=None)
def synth(config_path, count, size, seed, out):
    """Generate a synthetic noisy-label dataset."""
    cfgd = _merged(
        _SYNTH_DEFAULTS,
        _load_config(config_path),
        {"count": count, "size": size, "seed": seed, "out": out},
        context="synth",
    )
    _require(cfgd, "count", "synth")
    try:
        cfg = synthetic.SynthConfig(
            count=int(cfgd["count"]),
            size=int(cfgd["size"]),
            defects_per_image=(int(cfgd["defects_min"]), int(cfgd["defects_max"])),
            halo_width=(float(cfgd["halo_min"]), float(cfgd["halo_max"])),
            annotator_bias_range=(float(cfgd["bias_min"]), float(cfgd["bias_max"])),
            texture_scale=float(cfgd["texture_scale"]),
            seed=int(cfgd["seed"]),
        )
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    out_dir = _out_path(cfgd["out"])
    synthetic.generate_dataset(cfg, out_dir)
    click.echo(str(out_dir / "manifest.json"))


# ---------------------------------------------------------------- train

_TRAIN_DEFAULTS = {
    "lr": 0.003,
    "lr_decay": 0.0001,
    "batch_size": 4,
    "epochs": 10,
    "passes": 8,
    "warmup": 2,
    "alpha": 0.5,
    "epsilon": 1e-6,
    "weight_decay": 1e-4,
    "seed": 0,
    "depth": 4,
    "base_channels": 16,
    "p": 0.5,
    "block_size": 3,
    "placements": "default",
    "metric_images": 16,
}


def _parse_placements(value, depth: int) -> tuple[str, ...]:
    if isinstance(value, (list, tuple)):
        return tuple(value)
    value = str(value).strip()
    if value == "default":
        return unet.default_placements(depth)
    if value == "all":
        return tuple(unet.layer_names(depth))
    if value in ("none", ""):
        return ()
    return tuple(s.strip() for s in value.split(",") if s.strip())


@main.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), default="run")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--lr", type=float, default=None)
@click.option("--lr-decay", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--passes", type=int, default=None, help="stochastic passes per correction step")
@click.option("--warmup", type=int, default=None)
@click.option("--alpha", type=float, default=None)
@click.option("--weight-decay", type=float, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--depth", type=int, default=None)
@click.option("--base-channels", type=int, default=None)
@click.option("--p", type=float, default=None, help="block-dropout keep probability")
@click.option("--block-size", type=int, default=None)
@click.option("--placements", type=str, default=None, help="comma list, 'default', 'all' or 'none'")
@click.option("--no-psbm", is_flag=True, default=False, help="plain deterministic baseline")
def train(data, out, config_path, no_psbm, **flags):
    """Train a model on a synthesized dataset."""
    cfgd = _merged(_TRAIN_DEFAULTS, _load_config(config_path), flags, context="train")
    depth = int(cfgd["depth"])
    placements = () if no_psbm else _parse_placements(cfgd["placements"], depth)
    try:
        spec = unet.ModelSpec(
            input_channels=1,
            base_channels=int(cfgd["base_channels"]),
            depth=depth,
            block_placements=placements,
            block_dropout=BlockDropoutConfig(p=float(cfgd["p"]), block_size=int(cfgd["block_size"])),
            seed=int(cfgd["seed"]),
        )
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    report = unet.validate_placement(spec)
    for warning in report.warnings:
        click.echo(f"warning: {warning}", err=True)
    if not report.ok:
        raise click.ClickException("placement rejected: " + "; ".join(report.errors))
    if not placements:
        click.echo("baseline mode: no stochastic placements, crisp-label deterministic training")

    dataset = synthetic.load_training_samples(data)
    if not dataset:
        raise click.ClickException(f"no training samples found under {data}")
    train_cfg = training.TrainConfig(
        learning_rate=float(cfgd["lr"]),
        lr_decay=float(cfgd["lr_decay"]),
        batch_size=int(cfgd["batch_size"]),
        epochs=int(cfgd["epochs"]),
        correction_passes=int(cfgd["passes"]),
        warmup_epochs=int(cfgd["warmup"]),
        loss=LossConfig(
            alpha=float(cfgd["alpha"]),
            epsilon=float(cfgd["epsilon"]),
            weight_decay=float(cfgd["weight_decay"]),
        ),
        metric_images=int(cfgd["metric_images"]),
        seed=int(cfgd["seed"]),
    )
    model = unet.build(spec)
    out_dir = _out_path(out)
    try:
        result = training.fit(model, dataset, train_cfg, out_dir=out_dir)
    except training.TrainingDiverged as exc:
        raise click.ClickException(f"training diverged: {exc}") from exc
    click.echo(str(result.checkpoint_base) + ".bin")
    click.echo(str(out_dir / "metrics.jsonl"))


# ---------------------------------------------------------------- infer

@main.command()
@click.option("--checkpoint", type=str, required=True, help="checkpoint base path (or .bin/.json)")
@click.option("--images", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--out", type=click.Path(file_okay=False), default="inferred")
@click.option("-T", "--passes", type=int, default=16, show_default=True)
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--timing", is_flag=True, default=False, help="also write a timing report")
def infer(checkpoint, images, out, passes, threshold, seed, timing):
    """Monte-Carlo inference over a directory of grayscale PNGs."""
    base = Path(checkpoint)
    if base.suffix in (".bin", ".json"):
        base = base.with_suffix("")
    try:
        model, _ = unet.load_checkpoint(base)
    except unet.CheckpointError as exc:
        raise click.ClickException(str(exc)) from exc
    cfg = inference.InferenceConfig(passes=passes, binarize_threshold=threshold)
    image_paths = sorted(Path(images).glob("*.png"))
    if not image_paths:
        raise click.ClickException(f"no PNG images under {images}")
    out_dir = _out_path(out)
    root = np.random.SeedSequence(seed)
    streams = root.spawn(len(image_paths))
    for path, stream in zip(image_paths, streams):
        image = raster_io.load_gray_png(path)
        prob, rough, part = inference.infer_rough(model, image, cfg, np.random.default_rng(stream))
        inference.write_inference_artifacts(
            out_dir, path.stem, prob, rough, part, extra={"passes": passes, "threshold": threshold}
        )
    if timing:
        report = inference.timing_report(
            model,
            [raster_io.load_gray_png(p) for p in image_paths],
            cfg,
            np.random.default_rng(root.spawn(1)[0]),
        )
        raster_io.write_json(out_dir / "timing.json", report)
    click.echo(str(out_dir))


# ---------------------------------------------------------------- eval

def _load_prediction(pred_dir: Path, stem: str):
    """Rough prediction triple for a stem: either infer artifacts
    ({stem}_prob/_lower/_upper.png) or a single crisp mask {stem}.png."""
    lower_p = pred_dir / f"{stem}_lower.png"
    if lower_p.exists():
        lower = raster_io.load_binary_png(lower_p)
        upper = raster_io.load_binary_png(pred_dir / f"{stem}_upper.png")
        prob = raster_io.load_probability_png(pred_dir / f"{stem}_prob.png")
        return lower, upper, prob
    crisp_p = pred_dir / f"{stem}.png"
    if crisp_p.exists():
        mask = raster_io.load_binary_png(crisp_p)
        return mask, mask, mask.astype(np.float64)
    return None


@main.command("eval")
@click.option("--pred", "pred_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--labels", "labels_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--truth", "truth_dir", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def eval_cmd(pred_dir, labels_dir, truth_dir, threshold, out):
    """Score predictions against labels (and optionally synthetic truth)."""
    pred_dir, labels_dir = Path(pred_dir), Path(labels_dir)
    label_paths = sorted(labels_dir.glob("*.png"))
    if not label_paths:
        raise click.ClickException(f"no label PNGs under {labels_dir}")
    unmatched = [p.name for p in label_paths if _load_prediction(pred_dir, p.stem) is None]
    if unmatched:
        raise click.ClickException(
            f"no predictions for {len(unmatched)} labels: {', '.join(unmatched[:10])}"
        )
    if truth_dir is not None:
        truth_dir = Path(truth_dir)
    per_image = {}
    for path in label_paths:
        label = raster_io.load_binary_png(path)
        lower, upper, prob = _load_prediction(pred_dir, path.stem)
        entry = {
            "recall_upper": recall_upper(upper, label),
            "precision_lower": precision_lower(lower, label),
            "iou": iou_metric((prob >= threshold).astype(np.uint8), label),
        }
        if truth_dir is not None:
            from .rough import RoughLabel

            core = raster_io.load_binary_png(truth_dir / "core" / path.name)
            halo = raster_io.load_binary_png(truth_dir / "halo" / path.name)
            entry["oracle"] = oracle_eval(RoughLabel(lower=lower, upper=upper), core, halo)
        per_image[path.stem] = entry
    keys = ["recall_upper", "precision_lower", "iou"]
    aggregate = {k: float(np.mean([v[k] for v in per_image.values()])) for k in keys}
    if truth_dir is not None:
        for k in ("iou_lower_vs_core", "iou_upper_vs_core_halo", "boundary_agreement"):
            aggregate[f"oracle_{k}"] = float(
                np.mean([v["oracle"][k] for v in per_image.values()])
            )
    result = {"per_image": per_image, "aggregate": aggregate}
    if out is not None:
        raster_io.write_json(_out_path(out), result)
    click.echo(raster_io.canonical_json(aggregate).strip())


# ---------------------------------------------------------------- grade

@main.command()
@click.option("--probs", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--standards", "standards_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--pixel-equiv", type=float, default=0.014, show_default=True, help="mm per pixel")
@click.option("--grid-levels", type=int, default=101, show_default=True)
@click.option("--min-confidence", type=float, default=50.0, show_default=True)
@click.option("--policy", type=click.Choice(["any", "all"]), default="any", show_default=True)
@click.option("--out", type=click.Path(file_okay=False), default="graded")
def grade(probs, standards_path, pixel_equiv, grid_levels, min_confidence, policy, out):
    """Grade probability maps against factory standards."""
    try:
        standards = grading.load_standards(standards_path)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    prob_paths = sorted(Path(probs).glob("*.png"))
    if not prob_paths:
        raise click.ClickException(f"no probability PNGs under {probs}")
    out_dir = _out_path(out)
    grid = grading.uniform_lambda_grid(levels=grid_levels)
    for path in prob_paths:
        prob = raster_io.load_probability_png(path)
        stem = path.stem.removesuffix("_prob")
        reports = grading.grade(prob, standards, pixel_equiv, lambda_grid=grid, policy=policy)
        raster_io.write_json(out_dir / f"{stem}_report.json", grading.reports_to_json(reports))
        grading.render_overlay(prob, reports, out_dir / f"{stem}_overlay.png", min_confidence)
    click.echo(str(out_dir))


if __name__ == "__main__":
    main()
