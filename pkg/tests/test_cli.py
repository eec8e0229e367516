import csv
import json

import numpy as np
import pytest
from PIL import Image

from promptpatch.cli import (
    CONFIDENCE_HEADER,
    FRAMES_HEADER,
    HISTORY_HEADER,
    METRICS_HEADER,
    SWEEP_HEADER,
    main,
)
from promptpatch.config import RunConfig, save_config
from promptpatch.errors import NumericalError


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


@pytest.fixture(scope="module")
def base_config(tmp_path_factory, toy_dataset_path):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    save_config(RunConfig(dataset=str(toy_dataset_path)), path)
    return path


@pytest.fixture(scope="module")
def generated(tmp_path_factory, base_config):
    outdir = tmp_path_factory.mktemp("run") / "first"
    code = main(["generate", "--config", str(base_config), "--output", str(outdir)])
    assert code == 0
    return outdir


class TestGenerate:
    def test_outputs_exist(self, generated):
        for name in ("patch.png", "patch.npy", "metadata.json", "history.csv", "config.json"):
            assert (generated / name).is_file(), name

    def test_history_has_one_row_per_epoch(self, generated):
        header, rows = read_csv(generated / "history.csv")
        assert header == HISTORY_HEADER
        assert len(rows) == 100

    def test_metadata_contents(self, generated):
        meta = json.loads((generated / "metadata.json").read_text())
        assert meta["prompt"] == "a picture full of leaf-like green colors"
        assert meta["seed"] == 0
        assert meta["weights"] == {"alpha": 1.0, "beta": 5.0, "gamma": 0.1}
        assert meta["attention_maps"] == 14
        assert set(meta["losses"]) == {"attack", "prompt", "latent", "total"}

    def test_patch_png_is_lossless_uint8_of_npy(self, generated):
        pixels = np.load(generated / "patch.npy")
        with Image.open(generated / "patch.png") as img:
            png = np.asarray(img).transpose(2, 0, 1)
        assert np.array_equal(png, (pixels * 255).round().astype(np.uint8))

    def test_rerun_is_byte_identical(self, tmp_path, base_config, generated):
        second = tmp_path / "second"
        assert main(["generate", "--config", str(base_config), "--output", str(second)]) == 0
        assert (second / "patch.png").read_bytes() == (generated / "patch.png").read_bytes()
        assert (second / "history.csv").read_bytes() == (generated / "history.csv").read_bytes()

    def test_rerun_from_emitted_config_is_byte_identical(self, tmp_path, generated):
        third = tmp_path / "third"
        code = main(
            ["generate", "--config", str(generated / "config.json"), "--output", str(third)]
        )
        assert code == 0
        assert (third / "patch.png").read_bytes() == (generated / "patch.png").read_bytes()
        assert (third / "history.csv").read_bytes() == (generated / "history.csv").read_bytes()

    def test_missing_dataset_exits_with_data_error(self, tmp_path, capsys):
        code = main(
            ["generate", "--dataset", str(tmp_path / "ghost.txt"), "--output", str(tmp_path / "o")]
        )
        assert code == 2
        assert "error" in capsys.readouterr().err

    def test_unset_dataset_exits_with_data_error(self, tmp_path):
        assert main(["generate", "--output", str(tmp_path / "o")]) == 2

    def test_env_seed_override(self, tmp_path, toy_dataset_path, monkeypatch):
        monkeypatch.setenv("PROMPTPATCH_SEED", "41")
        outdir = tmp_path / "env"
        code = main(
            [
                "generate",
                "--dataset",
                str(toy_dataset_path),
                "--output",
                str(outdir),
                "--epochs",
                "1",
            ]
        )
        assert code == 0
        assert json.loads((outdir / "metadata.json").read_text())["seed"] == 41


class TestEvalDigital:
    def test_adversarial_patch_beats_gray(self, tmp_path, toy_dataset_path, generated):
        gray = tmp_path / "gray.png"
        Image.fromarray(np.full((64, 64, 3), 128, dtype=np.uint8)).save(gray)

        gray_out = tmp_path / "gray_eval"
        code = main(
            [
                "eval-digital",
                "--patch",
                str(gray),
                "--dataset",
                str(toy_dataset_path),
                "--output",
                str(gray_out),
            ]
        )
        assert code == 0
        adv_out = tmp_path / "adv_eval"
        code = main(
            [
                "eval-digital",
                "--patch",
                str(generated / "patch.png"),
                "--dataset",
                str(toy_dataset_path),
                "--output",
                str(adv_out),
            ]
        )
        assert code == 0

        _, gray_rows = read_csv(gray_out / "metrics.csv")
        _, adv_rows = read_csv(adv_out / "metrics.csv")
        gray_map = float(gray_rows[0][2])
        adv_map = float(adv_rows[0][2])
        assert adv_map < gray_map
        assert float(gray_rows[0][1]) == float(adv_rows[0][1])  # same baseline

    def test_scale_sweep_emits_one_row_per_scale(self, tmp_path, toy_dataset_path, generated):
        outdir = tmp_path / "sweep_eval"
        code = main(
            [
                "eval-digital",
                "--patch",
                str(generated / "patch.png"),
                "--dataset",
                str(toy_dataset_path),
                "--scale",
                "0.32,0.34,0.36,0.38,0.40",
                "--output",
                str(outdir),
            ]
        )
        assert code == 0
        header, rows = read_csv(outdir / "metrics.csv")
        assert header == METRICS_HEADER
        assert [float(r[0]) for r in rows] == [0.32, 0.34, 0.36, 0.38, 0.40]
        conf_header, conf_rows = read_csv(outdir / "confidences.csv")
        assert conf_header == CONFIDENCE_HEADER
        assert len(conf_rows) == 5 * 8

    def test_deterministic_metrics(self, tmp_path, toy_dataset_path, generated):
        out_a = tmp_path / "eval_a"
        out_b = tmp_path / "eval_b"
        for out in (out_a, out_b):
            args = [
                "eval-digital",
                "--patch",
                str(generated / "patch.png"),
                "--dataset",
                str(toy_dataset_path),
                "--output",
                str(out),
            ]
            assert main(args) == 0
        assert (out_a / "metrics.csv").read_bytes() == (out_b / "metrics.csv").read_bytes()
        assert (out_a / "confidences.csv").read_bytes() == (out_b / "confidences.csv").read_bytes()

    def test_empty_dataset_rejected(self, tmp_path, generated, capsys):
        empty = tmp_path / "empty.txt"
        empty.write_text("# no records\n")
        code = main(
            [
                "eval-digital",
                "--patch",
                str(generated / "patch.png"),
                "--dataset",
                str(empty),
                "--output",
                str(tmp_path / "out"),
            ]
        )
        assert code == 2

    def test_missing_patch_rejected(self, tmp_path, toy_dataset_path):
        code = main(
            [
                "eval-digital",
                "--patch",
                str(tmp_path / "none.png"),
                "--dataset",
                str(toy_dataset_path),
                "--output",
                str(tmp_path / "out"),
            ]
        )
        assert code == 2


def write_frames_file(path, postures):
    lines = ["posture,frame,evaded"]
    for posture, flags in postures.items():
        for index, flag in enumerate(flags):
            lines.append(f"{posture},{index},{int(flag)}")
    path.write_text("\n".join(lines) + "\n")


class TestEvalFrames:
    def test_four_postures_by_three_hundred_frames(self, tmp_path, capsys):
        frames = tmp_path / "frames.csv"
        postures = {
            "front": [True] * 282 + [False] * 18,
            "back": [True] * 300,
            "side": [True] * 150 + [False] * 150,
            "wave": [True] * 225 + [False] * 75,
        }
        write_frames_file(frames, postures)
        outdir = tmp_path / "report"
        assert main(["eval-frames", str(frames), "--output", str(outdir)]) == 0
        header, rows = read_csv(outdir / "asr_report.csv")
        assert header == FRAMES_HEADER
        assert len(rows) == 5  # four postures plus the mean row
        by_name = {r[0]: float(r[3]) for r in rows}
        assert by_name["front"] == 94.0
        assert by_name["back"] == 100.0
        assert by_name["side"] == 50.0
        assert by_name["wave"] == 75.0
        assert by_name["mean"] == pytest.approx((94.0 + 100.0 + 50.0 + 75.0) / 4)

    def test_hand_computed_mixed_file(self, tmp_path):
        frames = tmp_path / "frames.csv"
        write_frames_file(frames, {"front": [True, False, True, True], "back": [False] * 5})
        outdir = tmp_path / "report"
        assert main(["eval-frames", str(frames), "--output", str(outdir)]) == 0
        _, rows = read_csv(outdir / "asr_report.csv")
        by_name = {r[0]: float(r[3]) for r in rows}
        assert by_name["front"] == 75.0
        assert by_name["back"] == 0.0
        assert by_name["mean"] == 37.5

    def test_malformed_row_reports_line_number(self, tmp_path, capsys):
        frames = tmp_path / "frames.csv"
        frames.write_text("posture,frame,evaded\nfront,0,1\nfront,1,maybe\n")
        assert main(["eval-frames", str(frames), "--output", str(tmp_path / "r")]) == 2
        assert ":3:" in capsys.readouterr().err

    def test_missing_file_rejected(self, tmp_path):
        assert main(["eval-frames", str(tmp_path / "nope.csv")]) == 2


class TestAblate:
    def test_steps_sweep_emits_six_cells(self, tmp_path, toy_dataset_path):
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
                "--output",
                str(outdir),
            ]
        )
        assert code == 0
        header, rows = read_csv(outdir / "sweep.csv")
        assert header == SWEEP_HEADER
        assert len(rows) == 6
        for row, steps in zip(rows, (4, 5, 6, 7, 8, 9)):
            assert row[3] == "ok"
            assert int(row[9]) == steps * 2  # attention grid is steps x layers
            cell_dir = outdir / f"cell_steps_{steps}"
            assert (cell_dir / "patch.png").is_file()
        assert (outdir / "sweep.png").is_file()

    def test_weight_grid_pairs(self, tmp_path, toy_dataset_path):
        outdir = tmp_path / "weights"
        code = main(
            [
                "ablate",
                "--kind",
                "weights",
                "--grid",
                "10:0.25,5:0.1",
                "--dataset",
                str(toy_dataset_path),
                "--epochs",
                "2",
                "--output",
                str(outdir),
            ]
        )
        assert code == 0
        _, rows = read_csv(outdir / "sweep.csv")
        assert [r[1] for r in rows] == ["b10_g0.25", "b5_g0.1"]
        assert all(r[3] == "ok" for r in rows)

    def test_singleton_grid_matches_generate(self, tmp_path, toy_dataset_path):
        outdir = tmp_path / "single"
        code = main(
            [
                "ablate",
                "--kind",
                "scale",
                "--grid",
                "0.4",
                "--dataset",
                str(toy_dataset_path),
                "--epochs",
                "2",
                "--output",
                str(outdir),
            ]
        )
        assert code == 0
        direct = tmp_path / "direct"
        code = main(
            [
                "generate",
                "--dataset",
                str(toy_dataset_path),
                "--epochs",
                "2",
                "--scale",
                "0.4",
                "--output",
                str(direct),
            ]
        )
        assert code == 0
        cell = outdir / "cell_scale_0.4"
        assert (cell / "patch.png").read_bytes() == (direct / "patch.png").read_bytes()

    def test_failed_cells_recorded_and_sweep_continues(self, tmp_path, toy_dataset_path):
        outdir = tmp_path / "failing"
        code = main(
            [
                "ablate",
                "--kind",
                "steps",
                "--grid",
                "0,5",
                "--dataset",
                str(toy_dataset_path),
                "--epochs",
                "2",
                "--output",
                str(outdir),
            ]
        )
        assert code == 0
        _, rows = read_csv(outdir / "sweep.csv")
        assert rows[0][3].startswith("error")
        assert rows[1][3] == "ok"


class TestExitCodes:
    def test_unknown_option_is_usage_error(self, capsys):
        assert main(["generate", "--definitely-not-a-flag"]) == 1

    def test_invalid_config_value_is_usage_error(self, tmp_path, toy_dataset_path):
        code = main(
            [
                "generate",
                "--dataset",
                str(toy_dataset_path),
                "--epochs",
                "0",
                "--output",
                str(tmp_path / "o"),
            ]
        )
        assert code == 1

    def test_numerical_failure_maps_to_exit_three(self, monkeypatch, tmp_path, toy_dataset_path):
        import promptpatch.cli as cli_module

        def explode(config):
            raise NumericalError("non-finite total loss at epoch 3: attack=nan")

        monkeypatch.setattr(cli_module, "run_generation", explode)
        code = main(
            [
                "generate",
                "--dataset",
                str(toy_dataset_path),
                "--output",
                str(tmp_path / "o"),
            ]
        )
        assert code == 3

    def test_help_exits_zero(self):
        assert main(["--help"]) == 0
        assert main(["generate", "--help"]) == 0
