"""Acceptance suite: one test per release criterion.

Each test prints an ``ACCEPTANCE PASS/FAIL: <criterion>`` line directly to
the terminal (bypassing capture) and then asserts.  The end-to-end
training experiment is shared by several criteria through a
session-scoped fixture; expect the full suite to run for several
minutes on a desktop CPU.
"""

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from click.testing import CliRunner

from roughseg import metrics as M
from roughseg.block_dropout import gamma, sample_block_mask
from roughseg.cli import main as cli_main
from roughseg.grading import Standard, discrimination_confidence, g_curve, grade, uniform_lambda_grid
from roughseg.inference import InferenceConfig, infer_rough
from roughseg.losses import LossConfig, rough_tversky
from roughseg.rough import RoughLabel, rough_from_samples
from roughseg.synthetic import SynthConfig, generate_sample
from roughseg.training import TrainConfig, fit
from roughseg.unet import ModelSpec, build
from roughseg.block_dropout import BlockDropoutConfig

PIXEL_EQUIV = 0.014

# end-to-end experiment recipe (desk scale, CPU): a long crisp warm-up keeps
# both arms in the same training regime; the correction phase then separates
# the bounds without moving the point mask much
E2E = dict(
    images=200,
    size=48,
    train_count=160,
    seeds=(0, 1, 2, 3, 4),
    epochs=14,
    learning_rate=0.25,
    lr_decay=0.03,
    warmup_epochs=10,
    correction_passes=8,
    alpha=0.6,
    weight_decay=1e-3,
    base_channels=12,
    placements=("enc3", "enc4", "center"),
    keep_probability=0.5,
    block_size=3,
    eval_passes=16,
)


@pytest.fixture()
def criterion(capsys):
    def _report(name: str, ok: bool, detail: str = ""):
        with capsys.disabled():
            line = f"ACCEPTANCE {'PASS' if ok else 'FAIL'}: {name}"
            if detail:
                line += f"  [{detail}]"
            print(line, flush=True)
        assert ok, f"{name}: {detail}"

    return _report


# ------------------------------------------------------------------ 1

def test_psbm_mask_statistics(criterion):
    t0 = time.perf_counter()
    from scipy.ndimage import maximum_filter, minimum_filter

    fractions = {}
    structured = True
    for L in (3, 5, 7):
        g = gamma(0.5, L, 16)
        rng = np.random.default_rng(20_000 + L)
        dropped = 0.0
        for i in range(10_000):
            mask = sample_block_mask(16, 16, g, L, rng)
            dropped += mask.dropped_fraction
            if i % 1000 == 0:
                z = mask.values == 0
                eroded = minimum_filter(z, size=L, mode="constant", cval=0)
                opened = maximum_filter(eroded, size=L, mode="constant", cval=0)
                structured &= bool((opened == z).all())
        fractions[L] = dropped / 10_000
    elapsed = time.perf_counter() - t0
    in_band = all(abs(f - 0.5) <= 0.05 for f in fractions.values())
    detail = ", ".join(f"L={L}: {f:.4f}" for L, f in fractions.items()) + f"; {elapsed:.1f}s"
    criterion("PSBM dropped-area statistics", in_band and structured and elapsed < 30.0, detail)


# ------------------------------------------------------------------ 2

def test_gamma_formula(criterion):
    exact = abs(gamma(0.5, 3, 8) - 32 / 324) <= 1e-9 * (32 / 324)
    zero = all(gamma(1.0, L, W) == 0.0 for L, W in ((1, 4), (3, 8), (7, 32)))
    criterion("seed-probability formula", exact and zero,
              f"gamma(0.5,3,8)={gamma(0.5, 3, 8):.12f}")


# ------------------------------------------------------------------ 3

def test_loss_correctness(criterion):
    t0 = time.perf_counter()
    cfg9 = LossConfig(alpha=0.5, epsilon=1e-9)

    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    perfect = abs(rough_tversky(y, RoughLabel(lower=y, upper=y), cfg9)) <= 1e-5

    lower = np.array([[1.0, 0.0, 0.0, 0.0]])
    upper = np.array([[1.0, 1.0, 0.0, 0.0]])
    pred = np.array([[1.0, 0.5, 0.0, 0.0]])
    worked = rough_tversky(pred, RoughLabel(lower=lower, upper=upper), cfg9)
    worked_ok = abs(worked - 0.29166666666) <= 1e-6

    rng = np.random.default_rng(99)
    cfg = LossConfig(alpha=0.4, epsilon=1e-6)
    worst = 0.0
    for _ in range(50):
        lo = (rng.random((8, 8)) > 0.6).astype(float)
        up = np.maximum(lo, (rng.random((8, 8)) > 0.5).astype(float))
        p = rng.uniform(0.02, 0.98, (8, 8))
        t = torch.tensor(p, dtype=torch.float64, requires_grad=True)
        rough_tversky(t, (lo, up), cfg).backward()
        grad_ad = t.grad.numpy()
        h = 1e-6
        grad_fd = np.zeros_like(p)
        for r in range(8):
            for c in range(8):
                pp, pm = p.copy(), p.copy()
                pp[r, c] += h
                pm[r, c] -= h
                grad_fd[r, c] = (
                    rough_tversky(pp, (lo, up), cfg) - rough_tversky(pm, (lo, up), cfg)
                ) / (2 * h)
        worst = max(worst, np.abs(grad_ad - grad_fd).max() / max(np.abs(grad_fd).max(), 1e-8))
    elapsed = time.perf_counter() - t0
    criterion(
        "rough loss correctness",
        perfect and worked_ok and worst < 1e-4 and elapsed < 60.0,
        f"worked={worked:.9f}, grad rel err={worst:.2e}, {elapsed:.1f}s",
    )


# ------------------------------------------------------------------ shared experiment

def _evaluate_arm(model, test_samples, passes, rng_seed):
    rng = np.random.default_rng(rng_seed)
    stochastic = bool(model.spec.block_placements)
    rec, prec, jac, bnd = [], [], [], []
    for s in test_samples:
        preds = np.stack(
            [model.predict(s.image, stochastic=stochastic, rng=rng) for _ in range(passes)]
        )
        prob = preds.mean(axis=0)
        rough = rough_from_samples([(p >= 0.5).astype(np.uint8) for p in preds])
        rec.append(M.recall_upper(rough.upper, s.core | s.halo))
        prec.append(M.precision_lower(rough.lower, s.core))
        jac.append(M.iou((prob >= 0.5).astype(np.uint8), s.core | s.halo_inner))
        bnd.append(M.iou(rough.upper - rough.lower, s.halo))
    return {
        "recall_upper": float(np.mean(rec)),
        "precision_lower": float(np.mean(prec)),
        "iou": float(np.mean(jac)),
        "boundary_iou": float(np.mean(bnd)),
    }


@pytest.fixture(scope="session")
def e2e_results():
    t0 = time.perf_counter()
    cfg = SynthConfig(
        count=E2E["images"],
        size=E2E["size"],
        halo_width=(3.0, 6.0),
        annotator_bias_range=(0.1, 0.9),
        seed=101,
    )
    samples = [generate_sample(cfg, i) for i in range(cfg.count)]
    train_set = [(s.image, s.noisy_label) for s in samples[: E2E["train_count"]]]
    test_samples = samples[E2E["train_count"]:]

    per_seed = []
    for seed in E2E["seeds"]:
        arms = {}
        fits = {}
        for arm, placements in (("full", E2E["placements"]), ("baseline", ())):
            spec = ModelSpec(
                base_channels=E2E["base_channels"],
                depth=4,
                block_placements=placements,
                block_dropout=BlockDropoutConfig(
                    p=E2E["keep_probability"], block_size=E2E["block_size"]
                ),
                seed=seed,
            )
            model = build(spec)
            tc = TrainConfig(
                learning_rate=E2E["learning_rate"],
                lr_decay=E2E["lr_decay"],
                epochs=E2E["epochs"],
                warmup_epochs=E2E["warmup_epochs"],
                correction_passes=E2E["correction_passes"],
                loss=LossConfig(alpha=E2E["alpha"], weight_decay=E2E["weight_decay"]),
                metric_images=2,
                metric_passes=2,
                seed=seed,
            )
            result = fit(model, train_set, tc)
            passes = E2E["eval_passes"] if placements else 2
            arms[arm] = _evaluate_arm(model, test_samples, passes, 7000 + seed)
            fits[arm] = result
        per_seed.append({"seed": seed, "arms": arms, "fits": fits})
    return {
        "per_seed": per_seed,
        "wall_seconds": time.perf_counter() - t0,
        "test_samples": test_samples,
    }


# ------------------------------------------------------------------ 4

def test_label_correction_sandwich(criterion, e2e_results):
    checked = 0
    violations = 0
    for entry in e2e_results["per_seed"]:
        res = entry["fits"]["full"]
        checked += res.containment_pixels_checked
        violations += res.containment_violations
    criterion(
        "label-correction sandwich",
        checked > 0 and violations == 0,
        f"{checked} pixels checked, {violations} violations",
    )


# ------------------------------------------------------------------ 5

def test_rough_bound_containment(criterion):
    spec = ModelSpec(
        base_channels=4, depth=3, block_placements=("enc2", "enc3", "center"), seed=5
    )
    model = build(spec)
    cfg = SynthConfig(count=50, size=32, seed=77)
    icfg = InferenceConfig(passes=8)
    rng = np.random.default_rng(3)
    violations = 0
    for i in range(50):
        sample = generate_sample(cfg, i)
        prob, rough, part = infer_rough(model, sample.image, icfg, rng)
        if (rough.lower > rough.upper).any():
            violations += 1
        total = part.anomaly.astype(int) + part.boundary + part.normal
        if (total != 1).any():
            violations += 1
    criterion("rough-bound containment", violations == 0, f"{violations} violations over 50 images")


# ------------------------------------------------------------------ 6

def test_confidence_monotonicity(criterion):
    grid = uniform_lambda_grid()
    monotone = True
    # fixture suite: solid bars, ramped blobs, two-level bars
    fixtures = []
    for n in (30, 70, 143):
        prob = np.zeros((20, 200))
        prob[10, 3 : 3 + n] = 1.0
        fixtures.append((prob, (10, 3)))
    yy, xx = np.mgrid[0:40, 0:40]
    for radius in (6.0, 11.0):
        prob = np.clip(1.0 - np.hypot(yy - 20, xx - 20) / radius, 0.0, 1.0)
        fixtures.append((prob, (20, 20)))
    for prob, anchor in fixtures:
        lengths, widths = g_curve(prob, anchor, grid, PIXEL_EQUIV)
        monotone &= bool((np.diff(lengths) <= 1e-9).all() and (np.diff(widths) <= 1e-9).all())

    # crossing fixture: 106 certain pixels plus two at probability 0.7, so
    # the length curve crosses 1.5 mm exactly at lambda = 0.7
    prob = np.zeros((20, 120))
    prob[10, 2:108] = 1.0
    prob[10, 108:110] = 0.7
    lengths, widths = g_curve(prob, (10, 2), grid, PIXEL_EQUIV)
    conf = discrimination_confidence(grid, lengths, widths, Standard("tin_color", 1.5, 1.5))

    dense = np.linspace(0.0001, 1.0, 20000)
    lengths_d, widths_d = g_curve(prob, (10, 2), dense, PIXEL_EQUIV)
    meets = (lengths_d >= 1.5) | (widths_d >= 1.5)
    oracle = 100.0 * dense[int(np.max(np.nonzero(meets)[0]))]

    criterion(
        "confidence monotonicity and crossing",
        monotone and abs(conf - 70.0) <= 2.0 and abs(conf - oracle) <= 2.0,
        f"confidence={conf:.2f}%, dense oracle={oracle:.2f}%",
    )


# ------------------------------------------------------------------ 7

def test_end_to_end_directional(criterion, e2e_results):
    wins = 0
    rows = []
    for entry in e2e_results["per_seed"]:
        full, base = entry["arms"]["full"], entry["arms"]["baseline"]
        d_recall = full["recall_upper"] - base["recall_upper"]
        d_precision = full["precision_lower"] - base["precision_lower"]
        d_iou = full["iou"] - base["iou"]
        ok = d_recall >= 0.03 and d_precision >= 0.03 and d_iou >= -0.02
        wins += ok
        rows.append(
            f"seed {entry['seed']}: dR={100 * d_recall:+.1f} dP={100 * d_precision:+.1f} "
            f"dI={100 * d_iou:+.1f} {'ok' if ok else 'MISS'}"
        )
    wall = e2e_results["wall_seconds"]
    criterion(
        "end-to-end directional improvement",
        wins >= 4 and wall <= 1200.0,
        f"{wins}/5 seeds; {wall:.0f}s;  " + "; ".join(rows),
    )


# ------------------------------------------------------------------ 8

def test_boundary_recovery(criterion, e2e_results):
    scores = [e["arms"]["full"]["boundary_iou"] for e in e2e_results["per_seed"]]
    mean_score = float(np.mean(scores))

    # contrast: an untrained model's boundary has no halo alignment
    spec = ModelSpec(
        base_channels=E2E["base_channels"],
        depth=4,
        block_placements=E2E["placements"],
        block_dropout=BlockDropoutConfig(p=E2E["keep_probability"], block_size=E2E["block_size"]),
        seed=123,
    )
    untrained = build(spec)
    untrained_score = np.mean(
        [
            M.iou(r.upper - r.lower, s.halo)
            for s in e2e_results["test_samples"][:10]
            for r in [
                infer_rough(
                    untrained, s.image, InferenceConfig(passes=8), np.random.default_rng(1)
                )[1]
            ]
        ]
    )
    criterion(
        "boundary recovery localizes ambiguity",
        mean_score >= 0.25 and untrained_score < 0.15,
        f"trained={mean_score:.3f}, untrained={untrained_score:.3f}",
    )


# ------------------------------------------------------------------ 9

def test_reproducibility(criterion, tmp_path):
    runner = CliRunner()

    def pipeline(root: Path) -> dict[str, str]:
        ds = root / "ds"
        run = root / "run"
        inf = root / "inf"
        graded = root / "graded"
        std = root / "standards.json"
        std.write_text(json.dumps([{"class": "tin_color", "length_mm": 1.5, "width_mm": 1.5}]))
        steps = [
            ["synth", "--count", "6", "--size", "32", "--seed", "5", "--out", str(ds)],
            ["train", "--data", str(ds), "--out", str(run), "--depth", "2",
             "--base-channels", "2", "--epochs", "2", "--warmup", "1", "--passes", "2",
             "--seed", "3", "--placements", "enc2,center"],
            ["infer", "--checkpoint", str(run / "checkpoint"), "--images", str(ds / "images"),
             "--out", str(inf), "-T", "4", "--seed", "11"],
            ["eval", "--pred", str(inf), "--labels", str(ds / "labels"),
             "--truth", str(ds / "truth"), "--out", str(root / "metrics.json")],
            ["grade", "--probs", str(inf), "--standards", str(std), "--pixel-equiv", "0.014",
             "--out", str(graded)],
        ]
        for step in steps:
            result = runner.invoke(cli_main, step, catch_exceptions=False)
            assert result.exit_code == 0, result.output
        digests = {}
        for path in sorted(root.rglob("*")):
            if path.is_file():
                digests[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
        return digests

    a = pipeline(tmp_path / "a")
    b = pipeline(tmp_path / "b")
    differing = [k for k in a if a[k] != b.get(k)]
    criterion(
        "fixed-seed byte reproducibility",
        a == b,
        f"{len(a)} artifacts compared" + (f"; differing: {differing[:5]}" if differing else ""),
    )


# ------------------------------------------------------------------ 10

def test_grading_pipeline(criterion):
    tin = Standard("tin_color", 1.5, 1.5)

    long_prob = np.zeros((30, 260))
    long_prob[5, 2:145] = 1.0  # 143 px ~ 2.0 mm
    long_reports = grade(long_prob, [tin], PIXEL_EQUIV)

    short_prob = np.zeros((30, 260))
    short_prob[5, 2:72] = 1.0  # 70 px ~ 0.98 mm
    short_reports = grade(short_prob, [tin], PIXEL_EQUIV)

    length_mm = long_reports[0].g_length_mm[-1]
    ok = (
        len(long_reports) == 1
        and long_reports[0].confidence_pct == 100.0
        and short_reports[0].confidence_pct == 0.0
        and abs(length_mm - 2.002) < 1e-9
    )
    criterion(
        "grading pipeline thresholds",
        ok,
        f"143px -> {long_reports[0].confidence_pct:.0f}% at {length_mm:.3f} mm, "
        f"70px -> {short_reports[0].confidence_pct:.0f}%",
    )
