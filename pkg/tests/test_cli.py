import csv
import hashlib
import json
import subprocess
import sys
import time

import numpy as np
import pytest
import yaml

from mamlseg.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main
from mamlseg.config import load_config
from mamlseg.engine import load_checkpoint
from mamlseg.io import load_array


def write_config(tmp_path, name="exp.yaml", **overrides):
    cfg = {
        "modalities": ["AP", "VP"],
        "output_dir": "run",
        "backbone": {"levels": 2, "base_channels": 2, "feature_channels": 4},
        "train": {"epochs": 2, "batch_size": 2, "patch": {"size": [16, 16, 16]}},
        "synth": {"num_cases": 3, "shape": [24, 24, 24], "lesion_count_range": [1, 2],
                  "lesion_radius_range": [2.5, 3.5], "seed": 4},
        "data_format": ".nii.gz",
    }
    cfg.update(overrides)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return path


def digest(directory):
    return {p.relative_to(directory).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(directory.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp)
    assert main(["synth", "--config", str(cfg)]) == EXIT_OK
    assert main(["train", "--config", str(cfg), "--deterministic"]) == EXIT_OK
    return cfg, tmp / "run"


class TestSynth:
    def test_identical_reruns(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir(), b.mkdir()
        for d in (a, b):
            assert main(["synth", "--config", str(write_config(d)), "--seed", "7"]) == EXIT_OK
        da, db = digest(a / "run" / "data"), digest(b / "run" / "data")
        assert da == db and "manifest.tsv" in da

    def test_summary_matches_manifest(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        main(["synth", "--config", str(cfg)])
        out = capsys.readouterr().out
        with open(tmp_path / "run" / "data" / "manifest.tsv") as fh:
            rows = list(csv.DictReader(fh, delimiter="\t"))
        total = sum(int(r["lesions"]) for r in rows)
        assert f"wrote {len(rows)} cases" in out
        assert f"lesions: {total} total" in out

    def test_refuses_overwrite(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["synth", "--config", str(cfg)]) == EXIT_OK
        before = digest(tmp_path / "run" / "data")
        assert main(["synth", "--config", str(cfg), "--seed", "99"]) == EXIT_IO
        assert digest(tmp_path / "run" / "data") == before
        assert main(["synth", "--config", str(cfg), "--seed", "99", "--force"]) == EXIT_OK
        assert digest(tmp_path / "run" / "data") != before

    def test_raw_format(self, tmp_path):
        cfg = write_config(tmp_path, data_format=".raw")
        assert main(["synth", "--config", str(cfg)]) == EXIT_OK
        assert (tmp_path / "run" / "data" / "case_000_AP.raw.txt").exists()


class TestTrain:
    def test_outputs(self, trained):
        _, run = trained
        lines = (run / "logs" / "train.jsonl").read_text().splitlines()
        records = [json.loads(line) for line in lines]
        # 3 cases, batch 2 -> 2 steps per epoch, 2 epochs
        assert [r["step"] for r in records] == [1, 2, 3, 4]
        ckpt = load_checkpoint(run / "checkpoints" / "final.pt")
        assert ckpt.config["experiment"] == load_config(trained[0]).to_dict()
        assert yaml.safe_load((run / "config.yaml").read_text())["backbone"]["feature_channels"] == 4

    def test_smoke_run_is_fast(self, trained, tmp_path):
        cfg, run = trained
        raw = yaml.safe_load(cfg.read_text())
        raw["train"]["epochs"] = 1
        raw["manifest"] = str(run / "data" / "manifest.tsv")
        raw["output_dir"] = str(tmp_path / "smoke")
        del raw["synth"]
        path = tmp_path / "smoke.yaml"
        path.write_text(yaml.safe_dump(raw))
        start = time.perf_counter()
        assert main(["train", "--config", str(path)]) == EXIT_OK
        assert time.perf_counter() - start < 60

    def test_rerun_gives_identical_log(self, trained, tmp_path):
        cfg, run = trained
        first = (run / "logs" / "train.jsonl").read_text()
        assert main(["train", "--config", str(cfg), "--deterministic"]) == EXIT_OK
        assert (run / "logs" / "train.jsonl").read_text() == first

    def test_divergence_exit_code(self, trained, tmp_path):
        cfg, run = trained
        raw = yaml.safe_load(cfg.read_text())
        raw["train"]["lr"] = 1e30
        raw["train"]["epochs"] = 10
        raw["manifest"] = str(run / "data" / "manifest.tsv")
        raw["output_dir"] = str(tmp_path / "div")
        del raw["synth"]
        path = tmp_path / "div.yaml"
        path.write_text(yaml.safe_dump(raw))
        assert main(["train", "--config", str(path)]) == 3
        assert (tmp_path / "div" / "checkpoints" / "diverged.pt").exists()


class TestEval:
    def test_single_mode_report(self, trained, capsys):
        cfg, run = trained
        ckpt = run / "checkpoints" / "final.pt"
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt), "--mode", "single:AP"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "mode: single:AP" in out
        csv_path = run / "reports" / "eval_single_AP.csv"
        rows = list(csv.reader(csv_path.open()))
        assert rows[0] == ["case_id", "dice", "assd"] and len(rows) == 4
        first = csv_path.read_bytes()
        main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt), "--mode", "single:AP"])
        assert csv_path.read_bytes() == first

    def test_multimodal(self, trained):
        cfg, run = trained
        ckpt = run / "checkpoints" / "final.pt"
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt)]) == EXIT_OK
        assert (run / "reports" / "eval_multimodal.txt").read_text().startswith("mode: multimodal")

    def test_bad_mode(self, trained):
        cfg, run = trained
        ckpt = run / "checkpoints" / "final.pt"
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt), "--mode", "fused"]) == EXIT_CONFIG
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt), "--mode", "single:CT"]) == EXIT_CONFIG

    def test_missing_checkpoint(self, trained, tmp_path):
        cfg, _ = trained
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "nope.pt")]) == EXIT_IO


class TestExportAttention:
    def test_maps(self, trained):
        cfg, run = trained
        ckpt = run / "checkpoints" / "final.pt"
        assert main(["export-attention", "--config", str(cfg), "--checkpoint", str(ckpt),
                     "--case-id", "case_001"]) == EXIT_OK
        files = sorted((run / "attention").iterdir())
        assert [f.name for f in files] == ["case_001_AP.nii.gz", "case_001_VP.nii.gz"]
        _, spacing, _ = load_array(run / "data" / "case_001_AP.nii.gz")
        for f in files:
            data, sp, _ = load_array(f)
            assert data.shape == (24, 24, 24) and tuple(sp) == tuple(spacing)
            assert np.all((data > 0) & (data < 1))

    def test_unknown_case(self, trained):
        cfg, run = trained
        ckpt = run / "checkpoints" / "final.pt"
        assert main(["export-attention", "--config", str(cfg), "--checkpoint", str(ckpt),
                     "--case-id", "case_999"]) == EXIT_CONFIG


class TestConfigErrors:
    @pytest.mark.parametrize("override", [
        {"modalities": ["AP"]},
        {"bogus": 1},
        {"train": {"lr": -1.0}},
        {"backbone": {"levels": 3, "base_channels": 2, "feature_channels": 4},
         "train": {"patch": {"size": [18, 16, 16]}}},
        {"data_format": ".png"},
    ])
    def test_exit_code(self, tmp_path, override):
        cfg = write_config(tmp_path, **override)
        assert main(["synth", "--config", str(cfg)]) == EXIT_CONFIG

    def test_missing_file(self, tmp_path):
        assert main(["synth", "--config", str(tmp_path / "none.yaml")]) == EXIT_IO

    def test_module_entry_point(self, tmp_path):
        cfg = write_config(tmp_path, modalities=["AP"])
        proc = subprocess.run([sys.executable, "-m", "mamlseg", "synth", "--config", str(cfg)],
                              capture_output=True, text=True)
        assert proc.returncode == EXIT_CONFIG
        assert "error" in proc.stderr
