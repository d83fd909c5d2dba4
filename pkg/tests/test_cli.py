import hashlib
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from projsynth.cli import main
from projsynth.containers import load_projection, save_projection

DESK_PHANTOM = ["gen-phantom", "--size", "24", "--seed", "7"]


def file_checksums(directory):
    out = {}
    for p in sorted(Path(directory).rglob("*")):
        if p.is_file():
            out[str(p.relative_to(directory))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One desk-scale gen-phantom + project run shared by the read-only tests."""
    root = tmp_path_factory.mktemp("pipeline")
    assert main(DESK_PHANTOM + ["--out", str(root / "vols")]) == 0
    assert (
        main(
            [
                "project", "--volumes", str(root / "vols"), "--out", str(root / "data"),
                "--views", "6", "--det", "16", "--train", "4", "--test", "2", "--seed", "3",
            ]
        )
        == 0
    )
    return root


class TestGenPhantom:
    def test_writes_volume_pairs(self, pipeline):
        for name in ("mr.json", "mr.raw", "xray.json", "xray.raw", "phantom_spec.json"):
            assert (pipeline / "vols" / name).exists()

    def test_deterministic_checksums(self, tmp_path):
        for d in ("a", "b"):
            assert main(DESK_PHANTOM + ["--out", str(tmp_path / d)]) == 0
        assert file_checksums(tmp_path / "a") == file_checksums(tmp_path / "b")

    def test_negative_size_fails_without_files(self, tmp_path):
        out = tmp_path / "bad"
        assert main(["gen-phantom", "--size", "-4", "--out", str(out)]) == 1
        assert not out.exists() or not any(out.iterdir())


class TestProject:
    def test_projection_files_and_manifest(self, pipeline):
        data = pipeline / "data"
        manifest = json.loads((data / "manifest.json").read_text())
        assert len(manifest["pairs"]) == 6
        assert len(list(data.glob("mr_*.json"))) == 6
        assert len(list(data.glob("xray_*.json"))) == 6
        assert len(manifest["split"]["train"]) == 4
        assert len(manifest["split"]["test"]) == 2
        assert not set(manifest["split"]["train"]) & set(manifest["split"]["test"])

    def test_zero_views_rejected(self, pipeline, tmp_path):
        code = main(
            ["project", "--volumes", str(pipeline / "vols"), "--out", str(tmp_path / "x"),
             "--views", "0"]
        )
        assert code == 1

    def test_missing_volumes_is_data_error(self, tmp_path):
        code = main(
            ["project", "--volumes", str(tmp_path / "nothing"), "--out", str(tmp_path / "x"),
             "--views", "2"]
        )
        assert code == 2


class TestTrainCommand:
    def test_unknown_arch_lists_valid_values(self, pipeline, capsys):
        code = main(
            ["train", "--data", str(pipeline / "data"), "--out", "/tmp/nope", "--arch", "foo"]
        )
        assert code == 1
        err = capsys.readouterr().err
        assert "unet" in err and "resnet" in err and "crn" in err

    def test_zero_epochs_writes_initial_checkpoint(self, pipeline, tmp_path):
        out = tmp_path / "run0"
        code = main(
            ["train", "--data", str(pipeline / "data"), "--out", str(out),
             "--arch", "unet", "--epochs", "0", "--base-channels", "2", "--depth", "2"]
        )
        assert code == 0
        assert (out / "ckpt_final.weights.json").exists()
        history = (out / "history.csv").read_text().strip().splitlines()
        assert history == ["epoch,mean_loss"]

    def test_perceptual_combination_runs(self, pipeline, tmp_path):
        # the headline combination: cascaded refinement + perceptual loss
        out = tmp_path / "crnp"
        config = tmp_path / "cfg.json"
        config.write_text(json.dumps({"loss": {"eval_net_width_scale": 0.125, "eval_net_seed": 5}}))
        code = main(
            ["train", "--data", str(pipeline / "data"), "--out", str(out),
             "--arch", "crn", "--loss", "perceptual", "--modules", "3",
             "--epochs", "1", "--config", str(config)]
        )
        assert code == 0
        assert (out / "ckpt_final.state.json").exists()
        state = json.loads((out / "ckpt_final.state.json").read_text())
        assert state["arch"] == "crn" and state["loss"]["kind"] == "perceptual"


class TestEvalCommand:
    def test_identical_synth_reports_perfect_match(self, pipeline, tmp_path):
        # Injected fixture: copy each label as the "synthesized" image.
        data = pipeline / "data"
        synth_dir = tmp_path / "synth"
        synth_dir.mkdir()
        manifest = json.loads((data / "manifest.json").read_text())
        for entry in manifest["pairs"]:
            if entry["id"] not in manifest["split"]["test"]:
                continue
            label = load_projection(data / entry["xray"])
            # the dataset loader rescales labels to [-1, 1]; metrics rescale
            # anyway, so raw label data works as a perfect synthetic output
            save_projection(synth_dir / f"synth_{entry['id']}", label)
        out = tmp_path / "report"
        code = main(
            ["eval", "--data", str(data), "--synth-dir", str(synth_dir), "--out", str(out)]
        )
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        for row in report["pairs"]:
            assert row["mse"] == 0.0
            assert row["ssim"] == 1.0
            assert row["psnr_undefined"] is True and row["psnr_paper"] is None

    def test_row_count_matches_test_split(self, pipeline, tmp_path):
        run = tmp_path / "run"
        assert main(
            ["train", "--data", str(pipeline / "data"), "--out", str(run),
             "--arch", "unet", "--epochs", "1", "--base-channels", "2", "--depth", "2"]
        ) == 0
        out = tmp_path / "ev"
        assert main(
            ["eval", "--data", str(pipeline / "data"), "--ckpt", str(run / "ckpt_final"),
             "--out", str(out)]
        ) == 0
        rows = (out / "report.csv").read_text().strip().splitlines()
        manifest = json.loads((pipeline / "data" / "manifest.json").read_text())
        assert len(rows) - 1 == len(manifest["split"]["test"])

    def test_report_json_roundtrip(self, pipeline, tmp_path):
        from projsynth.metrics import MetricsReport

        run = tmp_path / "run"
        main(
            ["train", "--data", str(pipeline / "data"), "--out", str(run),
             "--arch", "unet", "--epochs", "1", "--base-channels", "2", "--depth", "2"]
        )
        out = tmp_path / "ev"
        main(
            ["eval", "--data", str(pipeline / "data"), "--ckpt", str(run / "ckpt_final"),
             "--out", str(out)]
        )
        text = (out / "report.json").read_text()
        back = MetricsReport.from_json(text)
        assert back.to_json() == text

    def test_needs_exactly_one_source(self, pipeline, tmp_path):
        assert main(
            ["eval", "--data", str(pipeline / "data"), "--out", str(tmp_path / "e")]
        ) == 1


class TestConfigFile:
    def test_unknown_keys_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"phantom": {"size": 16, "bogus_key": 1}}))
        assert main(["gen-phantom", "--out", str(tmp_path / "v"), "--config", str(cfg)]) == 1

    def test_unknown_section_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"nonsense": {}}))
        assert main(["gen-phantom", "--out", str(tmp_path / "v"), "--config", str(cfg)]) == 1

    def test_flags_override_config(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"phantom": {"size": 16, "seed": 1}}))
        assert main(
            ["gen-phantom", "--out", str(tmp_path / "v"), "--config", str(cfg), "--size", "12"]
        ) == 0
        meta = json.loads((tmp_path / "v" / "mr.json").read_text())
        assert meta["dims"] == [12, 12, 12]


class TestHelpAndIdempotence:
    @pytest.mark.parametrize(
        "sub", ["gen-phantom", "project", "train", "synth", "eval"]
    )
    def test_help_exits_zero(self, sub, capsys):
        assert main([sub, "--help"]) == 0
        out = capsys.readouterr().out
        assert "--" in out  # flags documented

    def test_project_idempotent_checksums(self, pipeline, tmp_path):
        args = [
            "project", "--volumes", str(pipeline / "vols"), "--views", "3", "--det", "12",
        ]
        for d in ("p1", "p2"):
            assert main(args + ["--out", str(tmp_path / d)]) == 0
        assert file_checksums(tmp_path / "p1") == file_checksums(tmp_path / "p2")

    def test_train_idempotent_checksums(self, pipeline, tmp_path):
        base = [
            "train", "--data", str(pipeline / "data"), "--arch", "unet",
            "--epochs", "2", "--base-channels", "2", "--depth", "2", "--seed", "4",
        ]
        for d in ("t1", "t2"):
            assert main(base + ["--out", str(tmp_path / d)]) == 0
        a = file_checksums(tmp_path / "t1")
        b = file_checksums(tmp_path / "t2")
        assert a == b

    def test_scripted_sequence_end_to_end(self, tmp_path):
        vols, data, run, ev = (tmp_path / n for n in ("vols", "data", "run", "ev"))
        assert main(["gen-phantom", "--size", "16", "--out", str(vols)]) == 0
        assert main(
            ["project", "--volumes", str(vols), "--out", str(data), "--views", "4",
             "--det", "16", "--train", "3", "--test", "1"]
        ) == 0
        assert main(
            ["train", "--data", str(data), "--out", str(run), "--arch", "unet",
             "--epochs", "2", "--base-channels", "2", "--depth", "2"]
        ) == 0
        assert main(
            ["eval", "--data", str(data), "--ckpt", str(run / "ckpt_final"), "--out", str(ev)]
        ) == 0
        assert (ev / "report.json").exists() and (ev / "report.csv").exists()
