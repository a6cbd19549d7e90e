"""Experiment orchestration: simulate, extract, fit, and score intervals.

Reproduces the evaluation protocol at desk scale: a grid of
(reverberation, SNR) cells, each repeated with fresh random unlabeled
and test positions, with every interval method consuming the exact same
features and fitted kernel so differences are attributable to the
method alone.  Reports are plain CSV plus a JSON run manifest.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .conformal import (
    build_profile,
    jackknife_loo,
    jackknife_plus_from_loo,
    predict_interval,
)
from .errors import ConfigError, InputError
from .features import StftConfig, features_from_recording, select_band
from .gpr import fit, loo_table, posterior_batch
from .intervals import PredictionInterval
from .room import (
    GridSpec,
    MultichannelRecording,
    Scene,
    apply_channel_noise,
    build_dataset,
    render_clean_channels,
)
from .signals import SignalSpec, make_signal

KNOWN_METHODS = ("gpr", "jackknife_plus", "gpr_cp")

REPEAT_COLUMNS = [
    "method", "t60", "snr_db", "delta", "axis", "repeat",
    "n_test", "n_covered", "coverage", "mean_width", "n_clipped",
]
SUMMARY_COLUMNS = [
    "method", "t60", "snr_db", "delta", "axis",
    "n_repeats", "n_test_total", "coverage", "mean_width", "n_clipped",
]
AXIS_NAMES = ("x", "y")


@dataclass
class ExperimentConfig:
    scene: Scene
    t60_list: tuple = (0.3, 0.7)
    snr_list: tuple = (5.0, 15.0)
    delta_list: tuple = (0.1, 0.05, 0.01)
    methods: tuple = KNOWN_METHODS
    repeats: int = 10
    seed: int = 0
    gamma: float = 32.0
    grid: tuple = (15, 15)
    n_unlabeled: int = 100
    n_test: int = 200
    sigma_p2: float = 0.05
    signal_duration_s: float = 2.0
    labeled_signal: str = "speech_shaped"
    test_signal: str = "speech_shaped"
    workers: int = 0
    fft_size: int = 1024
    overlap: float = 0.75
    f_low: float = 150.0
    f_high: float = 1500.0

    def __post_init__(self):
        self.t60_list = tuple(self.t60_list)
        self.snr_list = tuple(self.snr_list)
        self.delta_list = tuple(self.delta_list)
        self.methods = tuple(self.methods)
        if not self.methods or not self.delta_list:
            raise ConfigError("methods and delta lists must be non-empty")
        unknown = set(self.methods) - set(KNOWN_METHODS)
        if unknown:
            raise ConfigError(f"unknown methods: {sorted(unknown)}")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")

    def stft_config(self):
        return StftConfig(
            fft_size=self.fft_size,
            overlap=self.overlap,
            sample_rate=self.scene.room.sample_rate,
        )

    def summary_dict(self):
        d = {k: v for k, v in asdict(self).items() if k != "scene"}
        d["scene"] = {
            "room_dimensions": self.scene.room.dimensions.tolist(),
            "roi_x": list(self.scene.roi.x),
            "roi_y": list(self.scene.roi.y),
            "n_nodes": self.scene.array.n_nodes,
            "source_height": self.scene.source_height,
        }
        return d


@dataclass
class CoverageReport:
    rows: list                      # per (method, t60, snr, delta, axis, repeat)
    errors: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    def summary(self):
        """Aggregate over repeats: pooled coverage, test-weighted width."""
        groups = {}
        for row in self.rows:
            key = (row["method"], row["t60"], row["snr_db"], row["delta"], row["axis"])
            groups.setdefault(key, []).append(row)
        out = []
        for key in sorted(groups):
            rows = groups[key]
            n_total = sum(r["n_test"] for r in rows)
            covered = sum(r["n_covered"] for r in rows)
            width = (
                sum(r["mean_width"] * r["n_test"] for r in rows) / n_total
                if n_total
                else math.nan
            )
            out.append(
                {
                    "method": key[0], "t60": key[1], "snr_db": key[2],
                    "delta": key[3], "axis": key[4],
                    "n_repeats": len(rows), "n_test_total": n_total,
                    "coverage": covered / n_total if n_total else math.nan,
                    "mean_width": width,
                    "n_clipped": sum(r["n_clipped"] for r in rows),
                }
            )
        return out

    def cell(self, method, t60, snr_db, delta, axis):
        """The summary row for one cell; raises if absent."""
        for row in self.summary():
            if (
                row["method"] == method
                and row["t60"] == t60
                and row["snr_db"] == snr_db
                and row["delta"] == delta
                and row["axis"] == axis
            ):
                return row
        raise KeyError((method, t60, snr_db, delta, axis))

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        _write_csv(
            os.path.join(out_dir, "results_repeats.csv"), REPEAT_COLUMNS, self.rows
        )
        _write_csv(
            os.path.join(out_dir, "results_summary.csv"),
            SUMMARY_COLUMNS,
            self.summary(),
        )
        manifest = dict(self.manifest)
        manifest["config"] = self.config
        manifest["errors"] = self.errors
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    @property
    def completed(self):
        return not self.errors


def _fmt(value):
    if isinstance(value, float):
        return format(value, ".10g")
    return value


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def coverage(intervals, truths):
    """Fraction of true values inside their interval (closed endpoints)."""
    truths = np.atleast_1d(np.asarray(truths, dtype=float))
    intervals = list(intervals)
    if len(intervals) != truths.size:
        raise InputError("interval and truth lists must have equal length")
    if not intervals:
        return math.nan
    return sum(iv.contains(t) for iv, t in zip(intervals, truths)) / len(intervals)


def _extract_features(recordings, snr_db, stft_cfg, band, rng):
    feats = []
    for rec in recordings:
        noisy = apply_channel_noise(rec.samples, snr_db, rng)
        feats.append(features_from_recording(replace(rec, samples=noisy), stft_cfg, band))
    return feats


def _clip_and_score(intervals, truths, bounds):
    """Clip to the ROI axis bounds, then coverage and mean width."""
    clipped = [iv.clip(*bounds) for iv in intervals]
    n_clipped = sum(iv.is_unbounded for iv in intervals)
    n_covered = sum(iv.contains(t) for iv, t in zip(clipped, truths))
    widths = [iv.total_width for iv in clipped]
    return n_covered, float(np.mean(widths)) if widths else math.nan, n_clipped


def _evaluate_methods(cfg, model, test_feats, truths, t60, snr_db, repeat):
    """Score every (method, delta, axis) on one fitted model."""
    roi = cfg.scene.roi
    n_test = len(test_feats)
    rows = []
    if n_test == 0:
        for method in cfg.methods:
            for delta in cfg.delta_list:
                for axis in range(2):
                    rows.append(
                        {
                            "method": method, "t60": t60, "snr_db": snr_db,
                            "delta": delta, "axis": AXIS_NAMES[axis],
                            "repeat": repeat, "n_test": 0, "n_covered": 0,
                            "coverage": math.nan, "mean_width": math.nan,
                            "n_clipped": 0,
                        }
                    )
        return rows

    interval_sets = {}
    if "gpr" in cfg.methods:
        means, variances = posterior_batch(model, test_feats)
        pred_sd = np.sqrt(variances + model.sigma_p2)
        for delta in cfg.delta_list:
            half = norm.ppf(1 - delta / 2) * pred_sd
            for axis in range(2):
                interval_sets[("gpr", delta, axis)] = [
                    PredictionInterval(
                        [(means[i, axis] - half[i], means[i, axis] + half[i])], delta
                    )
                    for i in range(n_test)
                ]
    if "gpr_cp" in cfg.methods:
        per_cell = {
            (delta, axis): [] for delta in cfg.delta_list for axis in range(2)
        }
        for feat in test_feats:
            table = loo_table(model, feat)
            for axis in range(2):
                profile = build_profile(table, coord=axis, gamma=cfg.gamma)
                for delta in cfg.delta_list:
                    per_cell[(delta, axis)].append(predict_interval(profile, delta))
        for (delta, axis), ivs in per_cell.items():
            interval_sets[("gpr_cp", delta, axis)] = ivs
    if "jackknife_plus" in cfg.methods:
        preds, residuals = jackknife_loo(model, test_feats)
        for delta in cfg.delta_list:
            for axis in range(2):
                interval_sets[("jackknife_plus", delta, axis)] = [
                    jackknife_plus_from_loo(preds[:, i, axis], residuals[:, axis], delta)
                    for i in range(n_test)
                ]

    for method in cfg.methods:
        for delta in cfg.delta_list:
            for axis in range(2):
                ivs = interval_sets[(method, delta, axis)]
                n_covered, mean_width, n_clipped = _clip_and_score(
                    ivs, truths[:, axis], roi.bounds(axis)
                )
                rows.append(
                    {
                        "method": method, "t60": t60, "snr_db": snr_db,
                        "delta": delta, "axis": AXIS_NAMES[axis], "repeat": repeat,
                        "n_test": n_test, "n_covered": n_covered,
                        "coverage": n_covered / n_test if n_test else math.nan,
                        "mean_width": mean_width, "n_clipped": n_clipped,
                    }
                )
    return rows


def _run_task(cfg: ExperimentConfig, t60_index: int, repeat: int):
    """One (t60, repeat) unit: simulate once, evaluate every SNR cell."""
    t60 = cfg.t60_list[t60_index]
    stft_cfg = cfg.stft_config()
    band = select_band(cfg.f_low, cfg.f_high, stft_cfg)
    rows, errors = [], []

    seed_root = np.random.SeedSequence(cfg.seed, spawn_key=(t60_index, repeat))
    sim_seed, *noise_seeds = seed_root.spawn(1 + len(cfg.snr_list))
    try:
        scene = replace(
            cfg.scene, room=replace(cfg.scene.room, t60=t60), snr_db=math.inf
        )
        signals = {
            "labeled": SignalSpec(cfg.labeled_signal, cfg.signal_duration_s),
            "unlabeled": SignalSpec(cfg.test_signal, cfg.signal_duration_s),
            "test": SignalSpec(cfg.test_signal, cfg.signal_duration_s),
        }
        ds = build_dataset(
            scene, GridSpec(*cfg.grid), cfg.n_unlabeled, cfg.n_test, signals, sim_seed
        )
    except Exception as exc:  # noqa: BLE001 - cell isolation by contract
        for snr_db in cfg.snr_list:
            errors.append(
                {"t60": t60, "snr_db": snr_db, "repeat": repeat,
                 "stage": "simulate", "error": f"{type(exc).__name__}: {exc}"}
            )
        return rows, errors

    for snr_db, noise_seed in zip(cfg.snr_list, noise_seeds):
        try:
            rng = np.random.default_rng(noise_seed)
            labeled = _extract_features(
                [rec for rec, _ in ds.labeled], snr_db, stft_cfg, band, rng
            )
            unlabeled = _extract_features(ds.unlabeled, snr_db, stft_cfg, band, rng)
            test = _extract_features(
                [rec for rec, _ in ds.test], snr_db, stft_cfg, band, rng
            )
            model = fit(
                labeled,
                ds.labeled_positions,
                unlabeled=unlabeled,
                sigma_p2=cfg.sigma_p2,
            )
            rows.extend(
                _evaluate_methods(
                    cfg, model, test, ds.test_positions, t60, snr_db, repeat
                )
            )
        except Exception as exc:  # noqa: BLE001 - cell isolation by contract
            errors.append(
                {"t60": t60, "snr_db": snr_db, "repeat": repeat,
                 "stage": "evaluate", "error": f"{type(exc).__name__}: {exc}"}
            )
    return rows, errors


def _run_task_star(args):
    return _run_task(*args)


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> CoverageReport:
    """Full grid: every (t60, snr) cell, repeated; optionally writes files."""
    t_start = time.time()
    tasks = [
        (cfg, it, rep)
        for it in range(len(cfg.t60_list))
        for rep in range(cfg.repeats)
    ]
    workers = cfg.workers if cfg.workers > 0 else (os.cpu_count() or 1)
    workers = min(workers, len(tasks))
    if workers <= 1:
        results = [_run_task_star(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_task_star, tasks))

    rows, errors = [], []
    for task_rows, task_errors in results:
        rows.extend(task_rows)
        errors.extend(task_errors)
    rows.sort(
        key=lambda r: (r["method"], r["t60"], r["snr_db"], r["delta"], r["axis"],
                       r["repeat"])
    )
    versions = {"numpy": np.__version__}
    try:
        from importlib.metadata import version

        versions["confloc"] = version("confloc")
    except Exception:  # noqa: BLE001
        pass
    report = CoverageReport(
        rows=rows,
        errors=errors,
        config=cfg.summary_dict(),
        manifest={
            "wall_time_s": round(time.time() - t_start, 3),
            "workers": workers,
            "versions": versions,
            "interval_measure": (
                "total width of the union of pieces; unbounded pieces clipped "
                "to the ROI before width statistics"
            ),
            "n_clipped_total": 0,
        },
    )
    report.manifest["n_clipped_total"] = sum(r["n_clipped"] for r in rows)
    if out_dir is not None:
        report.write(out_dir)
    return report


SWEEP_COLUMNS = ["axis", "position", "fixed_other", "delta", "method", "width"]


def sweep_positions(
    model,
    scene: Scene,
    stft_cfg,
    band,
    axis,
    fixed_other,
    step,
    delta,
    gamma=32.0,
    methods=("gpr", "gpr_cp"),
    signal=None,
    seed=0,
):
    """Interval width against true position along one ROI axis.

    Simulates a fresh test recording at each swept position (the other
    coordinate held at fixed_other), scores the requested methods, and
    returns plot-ready rows.
    """
    if step <= 0:
        raise ConfigError("sweep step must be positive")
    unknown = set(methods) - set(KNOWN_METHODS)
    if unknown:
        raise ConfigError(f"unknown methods: {sorted(unknown)}")
    signal = signal or SignalSpec("speech_shaped", 2.0)
    lo, hi = scene.roi.bounds(axis)
    positions = np.clip(np.arange(lo, hi + step / 2, step), lo, hi)
    seeds = np.random.SeedSequence(seed).spawn(positions.size)

    feats = []
    for pos, pos_seed in zip(positions, seeds):
        rng = np.random.default_rng(pos_seed)
        point = np.empty(2)
        point[axis] = pos
        point[1 - axis] = fixed_other
        sig = make_signal(signal, scene.room.sample_rate, rng)
        clean = render_clean_channels(replace(scene, source_pos=point), sig)
        noisy = apply_channel_noise(clean, scene.snr_db, rng)
        feats.append(
            features_from_recording(
                MultichannelRecording(noisy, scene.room.sample_rate), stft_cfg, band
            )
        )

    widths = {}
    if "gpr" in methods:
        means, variances = posterior_batch(model, feats)
        half = norm.ppf(1 - delta / 2) * np.sqrt(variances + model.sigma_p2)
        widths["gpr"] = [
            PredictionInterval([(means[i, axis] - half[i], means[i, axis] + half[i])], delta)
            for i in range(len(feats))
        ]
    if "gpr_cp" in methods:
        widths["gpr_cp"] = [
            predict_interval(
                build_profile(loo_table(model, f), coord=axis, gamma=gamma), delta
            )
            for f in feats
        ]
    if "jackknife_plus" in methods:
        preds, residuals = jackknife_loo(model, feats)
        widths["jackknife_plus"] = [
            jackknife_plus_from_loo(preds[:, i, axis], residuals[:, axis], delta)
            for i in range(len(feats))
        ]

    rows = []
    for i, pos in enumerate(positions):
        for method in methods:
            rows.append(
                {
                    "axis": AXIS_NAMES[axis], "position": float(pos),
                    "fixed_other": fixed_other, "delta": delta, "method": method,
                    "width": widths[method][i].clip(lo, hi).total_width,
                }
            )
    return rows


def write_sweep_csv(path, rows):
    _write_csv(path, SWEEP_COLUMNS, rows)
