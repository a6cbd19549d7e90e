import csv
import json

import numpy as np
import pytest
from click.testing import CliRunner

from confloc.cli import main
from confloc.signals import load_wav


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory, runner):
    """Run simulate -> features -> fit once for the dependent stages."""
    root = tmp_path_factory.mktemp("pipeline")
    result = runner.invoke(
        main,
        [
            "simulate", "--t60", "0.1", "--snr-db", "10", "--grid", "3", "3",
            "--n-unlabeled", "2", "--n-test", "3", "--duration", "0.4",
            "--out", str(root / "dataset.npz"),
            "--export-wav-dir", str(root / "wavs"),
        ],
    )
    assert result.exit_code == 0, result.output
    result = runner.invoke(
        main,
        ["features", "--dataset", str(root / "dataset.npz"),
         "--out-dir", str(root / "feats")],
    )
    assert result.exit_code == 0, result.output
    result = runner.invoke(
        main,
        ["fit", "--labeled", str(root / "feats" / "features_labeled.npz"),
         "--unlabeled", str(root / "feats" / "features_unlabeled.npz"),
         "--sigma-p2", "0.05", "--out", str(root / "model.npz")],
    )
    assert result.exit_code == 0, result.output
    return root


class TestSimulate:
    def test_outputs_exist(self, pipeline_dir):
        assert (pipeline_dir / "dataset.npz").exists()
        wavs = sorted((pipeline_dir / "wavs").glob("*.wav"))
        assert len(wavs) == 9 + 2 + 3
        sig, rate = load_wav(wavs[0])
        assert rate == 16000
        assert sig.size > 0

    def test_wav_source_ingestion(self, runner, tmp_path):
        from confloc.room import MultichannelRecording
        from confloc.signals import save_recording_wav

        src_wav = tmp_path / "src.wav"
        rec = MultichannelRecording(
            np.random.default_rng(0).standard_normal((1, 8000)), 16000.0
        )
        save_recording_wav(src_wav, rec)
        result = runner.invoke(
            main,
            ["simulate", "--t60", "0", "--grid", "2", "2", "--n-unlabeled", "0",
             "--n-test", "1", "--duration", "0.3", "--labeled-signal", "wav",
             "--test-signal", "wav", "--wav", str(src_wav),
             "--out", str(tmp_path / "ds.npz")],
        )
        assert result.exit_code == 0, result.output


class TestFeatureAndModelFiles:
    def test_features_files(self, pipeline_dir):
        for name in ("labeled", "unlabeled", "test"):
            assert (pipeline_dir / "feats" / f"features_{name}.npz").exists()
        with np.load(pipeline_dir / "feats" / "features_labeled.npz") as data:
            meta = json.loads(str(data["meta"]))
            assert meta["n_nodes"] == 5
            assert data["matrix"].shape == (9, 5 * meta["bins_per_node"])
            assert data["positions"].shape == (9, 2)

    def test_predict_intervals_csv(self, runner, pipeline_dir):
        out = pipeline_dir / "intervals.csv"
        result = runner.invoke(
            main,
            ["predict", "--model", str(pipeline_dir / "model.npz"),
             "--features", str(pipeline_dir / "feats" / "features_test.npz"),
             "--delta", "0.25", "--method", "gpr_cp", "--method", "gpr",
             "--method", "jackknife_plus", "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        # 3 test points x 2 axes x 1 delta x 3 methods
        assert len(rows) == 18
        for row in rows:
            assert row["method"] in ("gpr", "gpr_cp", "jackknife_plus")
            assert row["axis"] in ("x", "y")
            assert float(row["total_width"]) >= 0.0


@pytest.fixture(scope="module")
def results_dir(tmp_path_factory, runner):
    root = tmp_path_factory.mktemp("eval")
    exp = root / "experiment.toml"
    exp.write_text(
        """
[experiment]
t60_list = [0.1]
snr_list = [10.0]
delta_list = [0.25]
repeats = 1
grid = [3, 3]
n_unlabeled = 2
n_test = 3
signal_duration_s = 0.4
sigma_p2 = 0.05
workers = 1
"""
    )
    result = runner.invoke(
        main, ["evaluate", "--config", str(exp), "--out-dir", str(root / "results")]
    )
    assert result.exit_code == 0, result.output
    return root / "results"


class TestEvaluateAndReport:
    def test_report_files_written(self, results_dir):
        assert (results_dir / "results_repeats.csv").exists()
        assert (results_dir / "results_summary.csv").exists()
        manifest = json.loads((results_dir / "manifest.json").read_text())
        assert manifest["errors"] == []

    def test_report_command_rebuilds_summary(self, runner, results_dir):
        before = (results_dir / "results_summary.csv").read_bytes()
        (results_dir / "results_summary.csv").unlink()
        result = runner.invoke(main, ["report", "--results-dir", str(results_dir)])
        assert result.exit_code == 0, result.output
        assert "coverage" in result.output
        assert (results_dir / "results_summary.csv").read_bytes() == before


class TestSweepCommand:
    def test_sweep_csv(self, runner, tmp_path):
        out = tmp_path / "sweep.csv"
        result = runner.invoke(
            main,
            ["sweep", "--t60", "0.1", "--snr-db", "10", "--axis", "x",
             "--fixed-other", "3.1", "--step", "0.5", "--delta", "0.25",
             "--grid", "3", "3", "--n-unlabeled", "2",
             "--method", "gpr", "--method", "gpr_cp", "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert rows and all(float(r["width"]) > 0 for r in rows)
        assert {r["method"] for r in rows} == {"gpr", "gpr_cp"}
