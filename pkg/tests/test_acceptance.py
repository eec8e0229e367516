"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines as they complete.
"""

import contextlib
import csv
import math
import time

import numpy as np
import pytest
import torch

from test_metrics import oracle_average_precision, person

from promptpatch.attack import EOTConfig, apply_transform, sample_transform
from promptpatch.cli import main
from promptpatch.detectors import AnalyticColorDetector, DetectionSet
from promptpatch.losses import LossWeights
from promptpatch.metrics import map50, mean_asr
from promptpatch.optimizer import (
    OptimizerConfig,
    build_pipeline,
    evaluate_losses,
    initialize_run,
    optimize,
)
from promptpatch.rng import stable_seed
from promptpatch.sampler import LatentState, ddim_step, ddpm_step
from promptpatch.schedule import build_schedule

PROMPT = "a picture full of leaf-like green colors"
SEED = 0
DTYPE = torch.float64


@contextlib.contextmanager
def criterion(number, name):
    try:
        yield
    except BaseException:
        print(f"[FAIL] criterion {number}: {name}")
        raise
    print(f"[PASS] criterion {number}: {name}")


def run_toy_attack(toy_dataset, weights, seed=SEED, epochs=100):
    pipeline = build_pipeline(seed=seed)
    state = initialize_run(pipeline, PROMPT, seed=seed)
    opt = OptimizerConfig(epochs=epochs, seed=seed, weights=weights)
    patch, state = optimize(
        state,
        toy_dataset,
        AnalyticColorDetector(threshold=0.0),
        EOTConfig(),
        opt,
        patch_scale=0.4,
    )
    return patch, state


def test_criterion_1_sampler_oracle():
    with criterion(1, "sampler oracle (scalar steps 1e-6, alpha-bar 1e-12)"):
        started = time.perf_counter()

        out = ddim_step(
            LatentState(torch.tensor([1.0], dtype=DTYPE), 5),
            torch.tensor([0.5], dtype=DTYPE),
            abar_t=0.25,
            abar_prev=0.64,
        )
        assert float(out.values) == pytest.approx(1.2071797, abs=1e-6)

        sched = build_schedule(1, 0.1, 0.1, 1)
        out = ddpm_step(
            LatentState(torch.tensor([1.0], dtype=DTYPE), 1),
            torch.tensor([math.sqrt(0.1)], dtype=DTYPE),
            sched,
        )
        assert float(out.values) == pytest.approx(0.9486833, abs=1e-6)

        for timesteps in (1, 2, 10, 250, 1000):
            sched = build_schedule(timesteps, 1e-4, 0.02, 1)
            product = 1.0
            expected = []
            for beta in sched.betas:
                product *= 1.0 - beta
                expected.append(product)
            np.testing.assert_allclose(sched.alpha_bars, expected, rtol=1e-12)

        assert time.perf_counter() - started < 1.0


def test_criterion_2_full_run_determinism(tmp_path, toy_dataset_path):
    with criterion(2, "byte-identical patches and histories across reruns"):
        started = time.perf_counter()
        dirs = [tmp_path / "run_a", tmp_path / "run_b"]
        for outdir in dirs:
            code = main(
                [
                    "generate",
                    "--dataset",
                    str(toy_dataset_path),
                    "--seed",
                    str(SEED),
                    "--output",
                    str(outdir),
                ]
            )
            assert code == 0
        patch_a = (dirs[0] / "patch.png").read_bytes()
        patch_b = (dirs[1] / "patch.png").read_bytes()
        assert patch_a == patch_b
        history_a = (dirs[0] / "history.csv").read_bytes()
        history_b = (dirs[1] / "history.csv").read_bytes()
        assert history_a == history_b
        with open(dirs[0] / "history.csv", newline="") as fh:
            assert len(list(csv.reader(fh))) == 101  # header plus 100 epochs
        assert time.perf_counter() - started < 300.0


def test_criterion_3_gradient_suite(toy_dataset):
    with criterion(3, "analytic gradients match central differences (rtol 1e-2)"):
        pipeline = build_pipeline(seed=SEED)
        state = initialize_run(pipeline, PROMPT, seed=SEED)
        detector = AnalyticColorDetector(threshold=0.0)
        eot = EOTConfig()
        weights = LossWeights()
        eot_seed = stable_seed(SEED, "acceptance-gradients")

        def loss_of(values):
            total, _, _ = evaluate_losses(
                state, values, toy_dataset, detector, eot, weights, 0.4, eot_seed
            )
            return total

        leaf = state.z_seed.clone().requires_grad_(True)
        (gradient,) = torch.autograd.grad(loss_of(leaf), leaf)

        rng = np.random.default_rng(17)
        flat_indices = rng.choice(state.z_seed.numel(), size=20, replace=False)
        step = 1e-5
        checked = 0
        for flat in flat_indices:
            index = np.unravel_index(int(flat), state.z_seed.shape)
            plus = state.z_seed.clone()
            plus[index] += step
            minus = state.z_seed.clone()
            minus[index] -= step
            fd = (float(loss_of(plus)) - float(loss_of(minus))) / (2 * step)
            analytic = float(gradient[index])
            assert abs(fd - analytic) <= 1e-2 * max(abs(fd), abs(analytic)) + 1e-10, (
                index,
                fd,
                analytic,
            )
            checked += 1
        assert checked >= 20


def test_criterion_4_anchor_property(toy_dataset):
    with criterion(4, "alignment losses exactly zero at anchors, positive after a step"):
        _, state = run_toy_attack(toy_dataset, LossWeights(), epochs=2)
        assert state.history[0].prompt == 0.0
        assert state.history[0].latent == 0.0
        # The first Adam step moved the seed latent, so both alignment losses
        # must leave zero strictly.
        assert state.history[1].prompt > 0.0
        assert state.history[1].latent > 0.0


def test_criterion_5_toy_attack_efficacy(toy_dataset):
    with criterion(5, "attack halves within 100 epochs; alignment restrains drift"):
        _, state = run_toy_attack(toy_dataset, LossWeights())
        best = state.history[state.best_epoch]
        assert best.attack <= 0.5 * state.history[0].attack
        _, free_state = run_toy_attack(toy_dataset, LossWeights(alpha=1.0, beta=0.0, gamma=0.0))
        assert free_state.history[-1].latent > state.history[-1].latent


def test_criterion_6_map_oracle():
    with criterion(6, "mAP@50 matches brute-force PR integration (1e-9)"):
        preds = [
            DetectionSet(
                (
                    person((50, 50, 60, 60), 0.9),
                    person((0, 0, 10, 10), 0.8),
                )
            )
        ]
        assert map50(preds, [[(0, 0, 10, 10)]]) == 0.5

        rng = np.random.default_rng(1234)
        instances = 0
        while instances < 100:
            predictions, ground_truth = [], []
            for _ in range(10):
                gt_boxes = []
                for _ in range(rng.integers(0, 6)):
                    x1, y1 = rng.uniform(0, 60, 2)
                    w, h = rng.uniform(8, 40, 2)
                    gt_boxes.append((x1, y1, x1 + w, y1 + h))
                detections = []
                for gt in gt_boxes:
                    if rng.random() < 0.7:
                        dx, dy = rng.uniform(-6, 6, 2)
                        detections.append(
                            person(
                                (gt[0] + dx, gt[1] + dy, gt[2] + dx, gt[3] + dy),
                                float(rng.random()),
                            )
                        )
                for _ in range(rng.integers(0, 4)):
                    x1, y1 = rng.uniform(0, 60, 2)
                    w, h = rng.uniform(5, 30, 2)
                    detections.append(person((x1, y1, x1 + w, y1 + h), float(rng.random())))
                predictions.append(DetectionSet(tuple(detections)))
                ground_truth.append(gt_boxes)
            if sum(len(g) for g in ground_truth) == 0:
                continue
            expected = oracle_average_precision(predictions, ground_truth)
            assert abs(map50(predictions, ground_truth) - expected) <= 1e-9
            instances += 1


def test_criterion_7_asr_arithmetic(tmp_path):
    with criterion(7, "frame ASR arithmetic matches the published scene means"):
        # eval-frames computes its mean row with mean_asr; the published
        # per-scene values average to 94.135, i.e. 94.14 after rounding.
        table_mean = mean_asr([95.59, 93.41, 92.75, 94.79])
        assert table_mean == pytest.approx(94.135, abs=1e-12)
        assert abs(round(table_mean, 2) - 94.14) <= 0.01

        frames = tmp_path / "frames.csv"
        lines = ["posture,frame,evaded"]
        for index in range(300):
            lines.append(f"front,{index},{1 if index < 282 else 0}")
        frames.write_text("\n".join(lines) + "\n")
        outdir = tmp_path / "report"
        assert main(["eval-frames", str(frames), "--output", str(outdir)]) == 0
        with open(outdir / "asr_report.csv", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        by_name = {row[0]: float(row[3]) for row in rows}
        assert by_name["front"] == 94.0
        assert by_name["mean"] == 94.0


def test_criterion_8_eot_ranges():
    with criterion(8, "10,000 transform draws inside configured ranges"):
        config = EOTConfig()
        rng = np.random.default_rng(8)
        for _ in range(10_000):
            params = sample_transform(rng, config, (3, 4, 4))
            assert 0.8 <= params.contrast <= 1.2
            assert -0.1 <= params.brightness <= 0.1
            assert np.all(np.abs(params.noise) <= 0.1)
            assert -20.0 <= params.rotate_degrees <= 20.0
            assert all(abs(t) <= 0.1 for t in params.translation)

        pixels = torch.full((3, 4, 4), 0.5, dtype=DTYPE)
        for contrast in (0.8, 0.97, 1.2):
            collapsed = EOTConfig(
                contrast_range=(contrast, contrast),
                brightness_range=0.0,
                noise_range=0.0,
                rotate_range=0.0,
                location_range=0.0,
            )
            params = sample_transform(rng, collapsed, (3, 4, 4))
            assert params.contrast == contrast
            out, _ = apply_transform(pixels, params)
            assert float((out - 0.5).abs().max()) <= 1e-7


def test_criterion_9_ablation_plumbing(tmp_path, toy_dataset_path):
    with criterion(9, "steps sweep emits six complete cells with steps-by-layers grids"):
        outdir = tmp_path / "sweep"
        code = main(
            [
                "ablate",
                "--kind",
                "steps",
                "--grid",
                "4,5,6,7,8,9",
                "--dataset",
                str(toy_dataset_path),
                "--epochs",
                "2",
                "--seed",
                str(SEED),
                "--output",
                str(outdir),
            ]
        )
        assert code == 0
        with open(outdir / "sweep.csv", newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        assert len(rows) == 6
        for row, steps in zip(rows, (4, 5, 6, 7, 8, 9)):
            assert row[3] == "ok"
            assert int(row[9]) == steps * 2
            cell = outdir / f"cell_steps_{steps}"
            for name in ("patch.png", "metadata.json", "history.csv", "config.json"):
                assert (cell / name).is_file()
