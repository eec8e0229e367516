"""Command-line interface: generate, eval-digital, eval-frames, ablate.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numerical failure. ``PROMPTPATCH_SEED`` overrides the configured seed for
any command. Outputs are plain files (PNG patch, JSON metadata, CSV tables,
PNG plots); nothing interactive.
"""

from __future__ import annotations

import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import click
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch
from PIL import Image

from .attack import AdversarialPatch, apply_transform, place_patch, sample_transform
from .config import DETECTOR_CHOICES, RunConfig, load_config, save_config
from .data import load_dataset
from .detectors import AnalyticColorDetector, ConvScoreDetector, Detector, score_value
from .errors import ConfigError, DataError, NumericalError
from .metrics import asr, map50, mean_asr
from .optimizer import initialize_run, optimize
from .rng import numpy_rng, stable_seed

EVAL_THRESHOLD = 0.5

HISTORY_HEADER = ["epoch", "l_attack", "l_prompt", "l_latent", "total"]
METRICS_HEADER = ["scale", "map50_baseline", "map50_patched"]
CONFIDENCE_HEADER = ["scale", "image", "max_confidence"]
FRAMES_HEADER = ["posture", "frames", "evaded", "asr_percent"]
SWEEP_HEADER = [
    "kind",
    "label",
    "seed",
    "status",
    "best_epoch",
    "attack_initial",
    "attack_best",
    "map50_baseline",
    "map50_patched",
    "attention_maps",
]


def build_detector(name: str, seed: int, threshold: float) -> Detector:
    if name == "analytic":
        return AnalyticColorDetector(threshold=threshold)
    if name == "conv":
        return ConvScoreDetector(seed=stable_seed(seed, "detector"), threshold=threshold)
    raise ConfigError(f"unknown detector {name!r}; choose from {DETECTOR_CHOICES}")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def save_patch_outputs(patch: AdversarialPatch, history, config: RunConfig, outdir: Path) -> dict:
    outdir.mkdir(parents=True, exist_ok=True)
    patch_path = outdir / "patch.png"
    Image.fromarray(patch.to_uint8().transpose(1, 2, 0)).save(patch_path)
    np.save(outdir / "patch.npy", patch.pixels)
    (outdir / "metadata.json").write_text(
        json.dumps(patch.metadata, indent=2, sort_keys=True) + "\n"
    )
    _write_csv(
        outdir / "history.csv",
        HISTORY_HEADER,
        [[r.epoch, r.attack, r.prompt, r.latent, r.total] for r in history],
    )
    save_config(config, outdir / "config.json")
    return {"patch": patch_path, "metadata": outdir / "metadata.json"}


def run_generation(config: RunConfig) -> tuple[AdversarialPatch, list, Path]:
    """Shared generate flow: validate, load data, optimize, write outputs."""
    config.validate()
    if not config.dataset:
        raise DataError("no dataset configured; pass --dataset or set it in the config")
    dataset = load_dataset(config.dataset)
    pipeline = config.pipeline()
    detector = build_detector(config.detector, config.seed, threshold=0.0)
    state = initialize_run(pipeline, config.prompt, config.seed)
    patch, state = optimize(
        state,
        dataset,
        detector,
        config.eot_config(),
        config.optimizer_config(),
        patch_scale=config.patch_scale,
    )
    outdir = Path(config.output_dir)
    save_patch_outputs(patch, state.history, config, outdir)
    return patch, state.history, outdir


def evaluate_patch(
    patch_pixels: torch.Tensor | None,
    dataset,
    detector: Detector,
    eot,
    scale: float,
    seed: int,
) -> tuple[float, list[float]]:
    """mAP@50 and per-image max person confidence for one patch rendering pass."""
    rng = numpy_rng(stable_seed(seed, "eval", f"{scale:.6f}"))
    predictions = []
    confidences = []
    for record in dataset:
        adversarial = record.image
        if patch_pixels is not None:
            params = sample_transform(rng, eot, tuple(patch_pixels.shape))
            transformed, mask = apply_transform(patch_pixels, params)
            for box in record.boxes:
                adversarial = place_patch(
                    adversarial, transformed, box, scale, params.translation, mask
                )
        detections = detector.detect(adversarial, candidates=record.boxes)
        predictions.append(detections)
        scores = [score_value(s) for s in detections.person_scores(detector.person_class)]
        confidences.append(max(scores) if scores else 0.0)
    ground_truth = [record.boxes for record in dataset]
    return map50(predictions, ground_truth, detector.person_class), confidences


def _parse_scales(text: str) -> list[float]:
    try:
        scales = [float(tok) for tok in text.replace(";", ",").split(",") if tok.strip()]
    except ValueError as exc:
        raise click.UsageError(f"invalid scale list {text!r}: {exc}") from exc
    if not scales:
        raise click.UsageError("empty scale list")
    return scales


@click.group()
def cli() -> None:
    """Prompt-guided adversarial patch toolkit."""


@cli.command()
@click.option("--config", "config_path", type=click.Path(), default=None, help="JSON run config.")
@click.option("--dataset", default=None, help="Annotation file (overrides config).")
@click.option("--output", "output_dir", default=None, help="Output directory (overrides config).")
@click.option("--prompt", default=None, help="Environment prompt (overrides config).")
@click.option("--seed", type=int, default=None, help="Run seed (overrides config).")
@click.option("--epochs", type=int, default=None)
@click.option("--steps", "num_steps", type=int, default=None, help="Denoising steps.")
@click.option("--scale", "patch_scale", type=float, default=None, help="Patch scale.")
@click.option("--detector", type=click.Choice(DETECTOR_CHOICES), default=None)
def generate(config_path, dataset, output_dir, prompt, seed, epochs, num_steps, patch_scale, detector):
    """Optimize a patch and write patch.png, metadata.json, history.csv, config.json."""
    config = load_config(
        config_path,
        dataset=dataset,
        output_dir=output_dir,
        prompt=prompt,
        seed=seed,
        epochs=epochs,
        num_steps=num_steps,
        patch_scale=patch_scale,
        detector=detector,
    )
    patch, history, outdir = run_generation(config)
    best = patch.metadata["losses"]
    click.echo(f"patch written to {outdir / 'patch.png'}")
    click.echo(
        f"best epoch {patch.metadata['epoch']}: attack={best['attack']:.4f} "
        f"prompt={best['prompt']:.4f} latent={best['latent']:.4f} total={best['total']:.4f}"
    )


@cli.command("eval-digital")
@click.option("--patch", "patch_path", type=click.Path(), required=True, help="Patch image (PNG).")
@click.option("--dataset", required=True, help="Annotation file.")
@click.option("--config", "config_path", type=click.Path(), default=None, help="Base config for EOT/detector/seed.")
@click.option("--scale", "scale_text", default=None, help="Scale or comma-separated scale sweep.")
@click.option("--detector", type=click.Choice(DETECTOR_CHOICES), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--output", "output_dir", default="eval", help="Directory for metrics.csv/confidences.csv.")
def eval_digital(patch_path, dataset, config_path, scale_text, detector, seed, output_dir):
    """Evaluate a patch digitally: mAP@50 (with no-patch baseline) and confidences."""
    config = load_config(config_path, dataset=dataset, detector=detector, seed=seed)
    config.validate()
    patch_path = Path(patch_path)
    if not patch_path.is_file():
        raise DataError(f"patch file not found: {patch_path}")
    from .data import load_image

    patch_pixels = load_image(patch_path)
    records = load_dataset(config.dataset)
    det = build_detector(config.detector, config.seed, threshold=EVAL_THRESHOLD)
    eot = config.eot_config()
    scales = _parse_scales(scale_text) if scale_text else [config.patch_scale]

    outdir = Path(output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    metric_rows = []
    confidence_rows = []
    for scale in scales:
        baseline, _ = evaluate_patch(None, records, det, eot, scale, config.seed)
        patched, confs = evaluate_patch(patch_pixels, records, det, eot, scale, config.seed)
        metric_rows.append([scale, baseline, patched])
        for record, conf in zip(records, confs):
            confidence_rows.append([scale, Path(record.path).name, conf])
        click.echo(f"scale {scale}: baseline mAP50={baseline:.4f} patched mAP50={patched:.4f}")
    _write_csv(outdir / "metrics.csv", METRICS_HEADER, metric_rows)
    _write_csv(outdir / "confidences.csv", CONFIDENCE_HEADER, confidence_rows)
    click.echo(f"metrics written to {outdir / 'metrics.csv'}")


def parse_frames_file(path: Path) -> dict[str, list[bool]]:
    """Parse frame outcome rows ``posture,frame,evaded`` (header optional)."""
    if not path.is_file():
        raise DataError(f"frames file not found: {path}")
    outcomes: dict[str, list[bool]] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = [t.strip() for t in line.replace(",", " ").split()]
        if lineno == 1 and tokens[:1] == ["posture"]:
            continue
        if len(tokens) != 3:
            raise DataError(f"{path}:{lineno}: expected 'posture frame evaded', got {raw!r}")
        posture, _frame, evaded = tokens
        if evaded.lower() in ("1", "true", "yes"):
            flag = True
        elif evaded.lower() in ("0", "false", "no"):
            flag = False
        else:
            raise DataError(f"{path}:{lineno}: evaded flag {evaded!r} is not boolean")
        outcomes.setdefault(posture, []).append(flag)
    if not outcomes:
        raise DataError(f"{path}: no frame rows")
    return outcomes


@cli.command("eval-frames")
@click.argument("frames_file", type=click.Path())
@click.option("--output", "output_dir", default="eval", help="Directory for asr_report.csv.")
def eval_frames(frames_file, output_dir):
    """Compute per-posture ASR and the scene mean from a frame outcome file."""
    outcomes = parse_frames_file(Path(frames_file))
    rows = []
    per_posture = []
    for posture, flags in outcomes.items():
        value = asr(flags)
        per_posture.append(value)
        rows.append([posture, len(flags), sum(flags), value])
        click.echo(f"{posture}: ASR {value:.2f}% ({sum(flags)}/{len(flags)} frames)")
    overall = mean_asr(per_posture)
    rows.append(["mean", sum(r[1] for r in rows), sum(r[2] for r in rows), overall])
    click.echo(f"mean ASR: {overall:.3f}%")
    outdir = Path(output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    _write_csv(outdir / "asr_report.csv", FRAMES_HEADER, rows)
    click.echo(f"report written to {outdir / 'asr_report.csv'}")


ABLATE_KINDS = ("weights", "steps", "scale", "epochs")


def _parse_grid(kind: str, text: str) -> list[tuple[str, dict]]:
    """Turn a grid string into (label, config overrides) cells."""
    cells = []
    tokens = [t for t in text.replace(";", ",").split(",") if t.strip()]
    if not tokens:
        raise click.UsageError("empty grid")
    try:
        for token in tokens:
            if kind == "steps":
                cells.append((token.strip(), {"num_steps": int(token)}))
            elif kind == "epochs":
                cells.append((token.strip(), {"epochs": int(token)}))
            elif kind == "scale":
                cells.append((token.strip(), {"patch_scale": float(token)}))
            else:  # weights: beta:gamma pairs
                beta_text, gamma_text = token.split(":")
                beta, gamma = float(beta_text), float(gamma_text)
                cells.append((f"b{beta:g}_g{gamma:g}", {"beta": beta, "gamma": gamma}))
    except ValueError as exc:
        raise click.UsageError(f"invalid {kind} grid {text!r}: {exc}") from exc
    return cells


@cli.command()
@click.option("--kind", type=click.Choice(ABLATE_KINDS), required=True)
@click.option("--grid", required=True, help="Comma list; weights use beta:gamma pairs.")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--dataset", default=None)
@click.option("--output", "output_dir", default="sweep")
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None, help="Epochs per cell (overrides config).")
def ablate(kind, grid, config_path, dataset, output_dir, seed, epochs):
    """Run one generate+eval cycle per grid point; emit sweep.csv and sweep.png."""
    base = load_config(config_path, dataset=dataset, seed=seed, epochs=epochs)
    cells = _parse_grid(kind, grid)
    outdir = Path(output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for index, (label, overrides) in enumerate(cells):
        cell_seed = base.seed + index
        cell_config = replace(
            base,
            seed=cell_seed,
            output_dir=str(outdir / f"cell_{kind}_{label}"),
            **overrides,
        )
        try:
            patch, history, cell_dir = run_generation(cell_config)
            records = load_dataset(cell_config.dataset)
            det = build_detector(cell_config.detector, cell_seed, threshold=EVAL_THRESHOLD)
            eot = cell_config.eot_config()
            baseline, _ = evaluate_patch(
                None, records, det, eot, cell_config.patch_scale, cell_seed
            )
            patched, _ = evaluate_patch(
                patch.as_tensor(), records, det, eot, cell_config.patch_scale, cell_seed
            )
            rows.append(
                [
                    kind,
                    label,
                    cell_seed,
                    "ok",
                    patch.metadata["epoch"],
                    history[0].attack,
                    patch.metadata["losses"]["attack"],
                    baseline,
                    patched,
                    patch.metadata["attention_maps"],
                ]
            )
            click.echo(f"cell {label}: mAP50 {patched:.4f} (baseline {baseline:.4f})")
        except Exception as exc:  # cell failures are recorded, sweep continues
            rows.append([kind, label, cell_seed, f"error: {exc}", "", "", "", "", "", ""])
            click.echo(f"cell {label} failed: {exc}", err=True)
    _write_csv(outdir / "sweep.csv", SWEEP_HEADER, rows)
    _plot_sweep(kind, rows, outdir / "sweep.png")
    click.echo(f"sweep written to {outdir / 'sweep.csv'}")


def _plot_sweep(kind: str, rows: list[list], path: Path) -> None:
    ok_rows = [r for r in rows if r[3] == "ok"]
    fig, ax = plt.subplots(figsize=(6, 4))
    if ok_rows:
        labels = [str(r[1]) for r in ok_rows]
        patched = [float(r[8]) for r in ok_rows]
        attack = [float(r[6]) for r in ok_rows]
        if kind == "weights":
            positions = range(len(labels))
            ax.bar(positions, patched, width=0.6, label="mAP50 (patched)")
            ax.set_xticks(list(positions))
            ax.set_xticklabels(labels)
        else:
            ax.plot(labels, patched, marker="o", label="mAP50 (patched)")
            ax.plot(labels, attack, marker="s", label="attack loss (best)")
        ax.set_xlabel(kind)
        ax.legend()
    ax.set_title(f"{kind} sweep")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def main(argv: list[str] | None = None) -> int:
    """Entry point with deliberate exit-code mapping."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return 1
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        return 1
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
