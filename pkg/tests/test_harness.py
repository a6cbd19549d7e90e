import csv
import math

import numpy as np
import pytest

from confloc import PredictionInterval
from confloc.config import load_scene
from confloc.errors import ConfigError, InputError
from confloc.features import select_band
from confloc.harness import (
    REPEAT_COLUMNS,
    SUMMARY_COLUMNS,
    SWEEP_COLUMNS,
    CoverageReport,
    ExperimentConfig,
    coverage,
    run_experiment,
    sweep_positions,
    write_sweep_csv,
)

from conftest import make_scene


def tiny_config(scene=None, **overrides):
    scene = scene or make_scene(n_nodes=2)
    defaults = dict(
        scene=scene,
        t60_list=(0.12,),
        snr_list=(10.0,),
        delta_list=(0.25,),
        repeats=1,
        grid=(3, 3),
        n_unlabeled=2,
        n_test=4,
        signal_duration_s=0.4,
        sigma_p2=0.05,
        workers=1,
    )
    defaults.update(overrides)
    return ExperimentConfig(**defaults)


class TestCoverage:
    def test_whole_roi_intervals_cover_everything(self):
        ivs = [PredictionInterval([(0.0, 2.0)], 0.1)] * 4
        assert coverage(ivs, [0.1, 1.0, 1.5, 2.0]) == 1.0

    def test_empty_intervals_cover_nothing(self):
        ivs = [PredictionInterval([], 0.1)] * 3
        assert coverage(ivs, [0.5, 1.0, 1.5]) == 0.0

    def test_three_of_four(self):
        ivs = [
            PredictionInterval([(0.0, 1.0)], 0.1),
            PredictionInterval([(0.0, 1.0)], 0.1),
            PredictionInterval([(0.0, 1.0)], 0.1),
            PredictionInterval([(5.0, 6.0)], 0.1),
        ]
        assert coverage(ivs, [0.5, 0.0, 1.0, 0.5]) == 0.75

    def test_length_mismatch_rejected(self):
        with pytest.raises(InputError):
            coverage([PredictionInterval([(0, 1)], 0.1)], [0.5, 0.6])


class TestExperimentConfig:
    def test_empty_methods_rejected(self):
        with pytest.raises(ConfigError):
            tiny_config(methods=())

    def test_unknown_method_rejected(self):
        with pytest.raises(ConfigError):
            tiny_config(methods=("gpr", "oracle"))

    def test_zero_repeats_rejected(self):
        with pytest.raises(ConfigError):
            tiny_config(repeats=0)


class TestRunExperiment:
    @pytest.fixture(scope="class")
    def tiny_report(self):
        return run_experiment(tiny_config())

    def test_complete_row_set(self, tiny_report):
        # one row per (method, t60, snr, delta, axis, repeat)
        assert len(tiny_report.rows) == 3 * 1 * 1 * 1 * 2 * 1
        assert tiny_report.completed
        for row in tiny_report.rows:
            assert set(row) == set(REPEAT_COLUMNS)
            assert 0.0 <= row["coverage"] <= 1.0
            assert row["mean_width"] >= 0.0

    def test_summary_schema_and_pooling(self, tiny_report):
        summary = tiny_report.summary()
        assert len(summary) == 3 * 2
        for row in summary:
            assert set(row) == set(SUMMARY_COLUMNS)

    def test_zero_test_points_do_not_crash(self):
        report = run_experiment(tiny_config(n_test=0))
        assert report.completed
        assert all(math.isnan(row["coverage"]) for row in report.rows)

    def test_deterministic_reports_are_byte_identical(self, tmp_path, tiny_report):
        cfg = tiny_config()
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        run_experiment(cfg, out_dir=out_a)
        run_experiment(cfg, out_dir=out_b)
        for name in ("results_repeats.csv", "results_summary.csv"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_written_files_parse_and_match_schema(self, tmp_path, tiny_report):
        tiny_report.write(tmp_path)
        with open(tmp_path / "results_repeats.csv", newline="") as fh:
            reader = csv.reader(fh)
            assert next(reader) == REPEAT_COLUMNS
            assert len(list(reader)) == len(tiny_report.rows)
        with open(tmp_path / "results_summary.csv", newline="") as fh:
            assert next(csv.reader(fh)) == SUMMARY_COLUMNS
        import json

        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["errors"] == []
        assert "interval_measure" in manifest
        assert manifest["config"]["sigma_p2"] == 0.05

    def test_cell_errors_are_isolated(self, monkeypatch):
        import confloc.harness as harness_mod

        real_fit = harness_mod.fit
        calls = {"n": 0}

        def failing_fit(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] == 1:
                raise RuntimeError("injected failure")
            return real_fit(*args, **kwargs)

        monkeypatch.setattr(harness_mod, "fit", failing_fit)
        report = run_experiment(tiny_config(snr_list=(10.0, 20.0)))
        assert not report.completed
        assert len(report.errors) == 1
        assert "injected failure" in report.errors[0]["error"]
        # the other snr cell still produced its rows
        assert {r["snr_db"] for r in report.rows} == {20.0}

    def test_single_fit_shared_across_methods(self, monkeypatch):
        import confloc.harness as harness_mod

        real_fit = harness_mod.fit
        calls = {"n": 0}

        def counting_fit(*args, **kwargs):
            calls["n"] += 1
            return real_fit(*args, **kwargs)

        monkeypatch.setattr(harness_mod, "fit", counting_fit)
        run_experiment(tiny_config())
        assert calls["n"] == 1  # one fit for all three methods

    def test_parallel_matches_serial(self, tmp_path):
        cfg_serial = tiny_config(repeats=2)
        cfg_par = tiny_config(repeats=2, workers=2)
        a = run_experiment(cfg_serial)
        b = run_experiment(cfg_par)
        assert a.rows == b.rows


class TestCoverageReportSummary:
    def test_pooled_coverage_and_weighted_width(self):
        rows = [
            {"method": "gpr", "t60": 0.3, "snr_db": 5.0, "delta": 0.1, "axis": "x",
             "repeat": 0, "n_test": 10, "n_covered": 9, "coverage": 0.9,
             "mean_width": 1.0, "n_clipped": 0},
            {"method": "gpr", "t60": 0.3, "snr_db": 5.0, "delta": 0.1, "axis": "x",
             "repeat": 1, "n_test": 30, "n_covered": 21, "coverage": 0.7,
             "mean_width": 2.0, "n_clipped": 1},
        ]
        (summary,) = CoverageReport(rows=rows).summary()
        assert summary["coverage"] == pytest.approx(30 / 40)
        assert summary["mean_width"] == pytest.approx((1.0 * 10 + 2.0 * 30) / 40)
        assert summary["n_clipped"] == 1
        assert summary["n_repeats"] == 2


class TestSweep:
    @pytest.fixture(scope="class")
    def sweep_setup(self):
        from confloc.features import features_from_recording
        from confloc.gpr import fit
        from confloc.room import GridSpec, build_dataset
        from confloc.signals import SignalSpec

        scene = make_scene(t60=0.12, snr_db=10.0, n_nodes=2)
        cfg = ExperimentConfig(scene=scene).stft_config()
        band = select_band(150.0, 1500.0, cfg)
        ds = build_dataset(
            scene, GridSpec(4, 4), 4, 0, SignalSpec("speech_shaped", 0.4), 7
        )
        labeled = [features_from_recording(r, cfg, band) for r, _ in ds.labeled]
        unlabeled = [features_from_recording(r, cfg, band) for r in ds.unlabeled]
        model = fit(labeled, ds.labeled_positions, unlabeled=unlabeled, sigma_p2=0.05)
        return model, scene, cfg, band, ds

    def test_rows_schema_and_positive_widths(self, sweep_setup, tmp_path):
        model, scene, cfg, band, _ = sweep_setup
        rows = sweep_positions(
            model, scene, cfg, band, axis=0, fixed_other=3.1, step=0.5,
            delta=0.25, methods=("gpr", "gpr_cp", "jackknife_plus"),
            signal=None, seed=3,
        )
        assert rows
        for row in rows:
            assert set(row) == set(SWEEP_COLUMNS)
            assert row["width"] > 0
        path = tmp_path / "sweep.csv"
        write_sweep_csv(path, rows)
        with open(path, newline="") as fh:
            assert next(csv.reader(fh)) == SWEEP_COLUMNS

    def test_nonpositive_step_rejected(self, sweep_setup):
        model, scene, cfg, band, _ = sweep_setup
        with pytest.raises(ConfigError):
            sweep_positions(model, scene, cfg, band, 0, 3.1, 0.0, 0.25)

    # width-vs-labeled-proximity needs the full-size grid to be visible;
    # it is asserted in the acceptance suite alongside the axis comparison
