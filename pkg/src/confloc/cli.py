"""Command-line pipeline: simulate -> features -> fit -> predict,
plus the full evaluation grid, position sweeps, and report aggregation.

Every stage reads and writes plain files (.npz bundles, CSV, JSON) so
stages can run in separate invocations.
"""

from __future__ import annotations

import csv
import json
import math
import os
import sys

import click
import numpy as np

from .config import load_experiment, load_scene
from .conformal import build_profile, jackknife_plus_from_loo, jackknife_loo, predict_interval
from .errors import ConflocError
from .features import (
    StftConfig,
    features_from_recording,
    load_features,
    save_features,
    select_band,
)
from .gpr import fit, load_model, loo_table, posterior_batch, save_model
from .harness import KNOWN_METHODS, run_experiment, sweep_positions, write_sweep_csv
from .intervals import PredictionInterval
from .room import GridSpec, build_dataset, load_dataset, save_dataset
from .signals import SignalSpec, save_recording_wav

INTERVAL_COLUMNS = [
    "index", "method", "delta", "axis", "point", "pieces", "total_width", "unbounded",
]


def _pieces_str(interval):
    return "|".join(f"{lo:.6g}..{hi:.6g}" for lo, hi in interval.pieces)


@click.group()
def main():
    """Manifold-GP source localization with conformal intervals."""


@main.command()
@click.option("--scene", "scene_path", type=click.Path(exists=True), default=None,
              help="Scene TOML (default: packaged scene).")
@click.option("--t60", type=float, default=None, help="Override reverberation time [s].")
@click.option("--snr-db", type=float, default=None, help="Override SNR [dB].")
@click.option("--seed", type=int, default=None, help="Override simulation seed.")
@click.option("--grid", nargs=2, type=int, default=(15, 15), show_default=True,
              help="Labeled grid resolution (nx ny).")
@click.option("--n-unlabeled", type=int, default=100, show_default=True)
@click.option("--n-test", type=int, default=200, show_default=True)
@click.option("--duration", type=float, default=2.0, show_default=True,
              help="Source signal duration [s].")
@click.option("--labeled-signal", type=click.Choice(["white", "speech_shaped", "wav"]),
              default="speech_shaped", show_default=True,
              help="Same class as the test signal keeps features exchangeable.")
@click.option("--test-signal", type=click.Choice(["white", "speech_shaped", "wav"]),
              default="speech_shaped", show_default=True)
@click.option("--wav", "wav_path", type=click.Path(exists=True), default=None,
              help="WAV file used by signal kind 'wav'.")
@click.option("--out", type=click.Path(), required=True, help="Output dataset .npz.")
@click.option("--export-wav-dir", type=click.Path(), default=None,
              help="Also write each recording as a multichannel WAV.")
def simulate(scene_path, t60, snr_db, seed, grid, n_unlabeled, n_test, duration,
             labeled_signal, test_signal, wav_path, out, export_wav_dir):
    """Simulate labeled/unlabeled/test recordings for one scene."""
    scene = load_scene(scene_path, t60=t60, snr_db=snr_db, seed=seed)
    signals = {
        "labeled": SignalSpec(labeled_signal, duration, wav_path),
        "unlabeled": SignalSpec(test_signal, duration, wav_path),
        "test": SignalSpec(test_signal, duration, wav_path),
    }
    ds = build_dataset(
        scene, GridSpec(*grid), n_unlabeled, n_test, signals, scene.seed
    )
    save_dataset(out, ds)
    if export_wav_dir:
        os.makedirs(export_wav_dir, exist_ok=True)
        for name, recs in (
            ("labeled", [r for r, _ in ds.labeled]),
            ("unlabeled", ds.unlabeled),
            ("test", [r for r, _ in ds.test]),
        ):
            for i, rec in enumerate(recs):
                save_recording_wav(
                    os.path.join(export_wav_dir, f"{name}_{i:04d}.wav"), rec
                )
    click.echo(
        f"wrote {out}: {len(ds.labeled)} labeled, {len(ds.unlabeled)} unlabeled, "
        f"{len(ds.test)} test recordings"
    )


@main.command()
@click.option("--dataset", type=click.Path(exists=True), required=True)
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--fft-size", type=int, default=1024, show_default=True)
@click.option("--overlap", type=float, default=0.75, show_default=True)
@click.option("--f-low", type=float, default=150.0, show_default=True)
@click.option("--f-high", type=float, default=1500.0, show_default=True)
def features(dataset, out_dir, fft_size, overlap, f_low, f_high):
    """Extract aggregated RTF features from a simulated dataset."""
    labeled, unlabeled, test, meta = load_dataset(dataset)
    cfg = StftConfig(fft_size=fft_size, overlap=overlap, sample_rate=meta["sample_rate"])
    band = select_band(f_low, f_high, cfg)
    os.makedirs(out_dir, exist_ok=True)
    jobs = (
        ("labeled", [r for r, _ in labeled], np.array([p for _, p in labeled])),
        ("unlabeled", unlabeled, None),
        ("test", [r for r, _ in test], np.array([p for _, p in test])),
    )
    for name, recs, positions in jobs:
        feats = [features_from_recording(r, cfg, band) for r in recs]
        if feats:
            save_features(
                os.path.join(out_dir, f"features_{name}.npz"),
                feats, cfg, band,
                positions=positions if positions is not None and positions.size else None,
            )
    click.echo(f"wrote features for {len(labeled)} labeled / "
               f"{len(unlabeled)} unlabeled / {len(test)} test recordings to {out_dir}")


@main.command("fit")
@click.option("--labeled", "labeled_path", type=click.Path(exists=True), required=True,
              help="features_labeled.npz with positions.")
@click.option("--unlabeled", "unlabeled_path", type=click.Path(exists=True), default=None)
@click.option("--sigma-p2", type=float, default=1e-4, show_default=True,
              help="Label-noise variance [m^2].")
@click.option("--out", type=click.Path(), required=True, help="Output model .npz.")
def fit_command(labeled_path, unlabeled_path, sigma_p2, out):
    """Fit the manifold GP on labeled (+ optional unlabeled) features."""
    labeled_feats, _, positions = load_features(labeled_path)
    if positions is None:
        raise click.ClickException("labeled feature file carries no positions")
    unlabeled_feats = []
    if unlabeled_path:
        unlabeled_feats, _, _ = load_features(unlabeled_path)
    model = fit(labeled_feats, positions, unlabeled=unlabeled_feats, sigma_p2=sigma_p2)
    save_model(out, model)
    click.echo(
        f"fitted model on {model.n_labeled} labeled + "
        f"{model.refs.n_unlabeled} unlabeled samples -> {out}"
    )


@main.command()
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--features", "features_path", type=click.Path(exists=True), required=True)
@click.option("--delta", type=float, multiple=True, default=(0.1,), show_default=True)
@click.option("--gamma", type=float, default=32.0, show_default=True,
              help="Score normalization exponent (inf = unnormalized).")
@click.option("--method", "methods", type=click.Choice(KNOWN_METHODS), multiple=True,
              default=("gpr_cp",), show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Output intervals CSV.")
def predict(model_path, features_path, delta, gamma, methods, out):
    """Point estimates and prediction intervals for test features."""
    from scipy.stats import norm

    model = load_model(model_path)
    feats, _, _ = load_features(features_path)
    rows = []
    means, variances = posterior_batch(model, feats)
    jk = jackknife_loo(model, feats) if "jackknife_plus" in methods else None
    for i, feat in enumerate(feats):
        table = loo_table(model, feat) if "gpr_cp" in methods else None
        for axis in range(model.n_coords):
            for d in delta:
                for method in methods:
                    if method == "gpr":
                        half = norm.ppf(1 - d / 2) * math.sqrt(
                            variances[i] + model.sigma_p2
                        )
                        iv = PredictionInterval(
                            [(means[i, axis] - half, means[i, axis] + half)], d
                        )
                    elif method == "gpr_cp":
                        iv = predict_interval(
                            build_profile(table, coord=axis, gamma=gamma), d
                        )
                    else:
                        preds, residuals = jk
                        iv = jackknife_plus_from_loo(
                            preds[:, i, axis], residuals[:, axis], d
                        )
                    rows.append(
                        {
                            "index": i, "method": method, "delta": d,
                            "axis": "xy"[axis] if model.n_coords == 2 else str(axis),
                            "point": format(means[i, axis], ".6g"),
                            "pieces": _pieces_str(iv),
                            "total_width": format(iv.total_width, ".6g"),
                            "unbounded": int(iv.is_unbounded),
                        }
                    )
    with open(out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=INTERVAL_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    click.echo(f"wrote {len(rows)} intervals to {out}")


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), required=True,
              help="Experiment TOML.")
@click.option("--scene", "scene_path", type=click.Path(exists=True), default=None)
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--workers", type=int, default=None,
              help="Parallel workers (default: from config / all cores).")
def evaluate(config_path, scene_path, out_dir, workers):
    """Run the full coverage/width experiment grid."""
    cfg = load_experiment(config_path, scene_path=scene_path)
    if workers is not None:
        cfg.workers = workers
    report = run_experiment(cfg, out_dir=out_dir)
    click.echo(f"wrote report to {out_dir} ({len(report.rows)} rows)")
    if not report.completed:
        click.echo(f"{len(report.errors)} cell(s) failed; see manifest.json", err=True)
        sys.exit(1)


@main.command()
@click.option("--scene", "scene_path", type=click.Path(exists=True), default=None)
@click.option("--t60", type=float, default=0.7, show_default=True)
@click.option("--snr-db", type=float, default=15.0, show_default=True)
@click.option("--axis", type=click.Choice(["x", "y"]), default="x", show_default=True)
@click.option("--fixed-other", type=float, default=3.0, show_default=True,
              help="Fixed coordinate on the other axis [m].")
@click.option("--step", type=float, default=0.1, show_default=True)
@click.option("--delta", type=float, default=0.01, show_default=True)
@click.option("--gamma", type=float, default=32.0, show_default=True)
@click.option("--grid", nargs=2, type=int, default=(15, 15), show_default=True)
@click.option("--n-unlabeled", type=int, default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--method", "methods", type=click.Choice(KNOWN_METHODS), multiple=True,
              default=("gpr", "gpr_cp"), show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Output sweep CSV.")
def sweep(scene_path, t60, snr_db, axis, fixed_other, step, delta, gamma, grid,
          n_unlabeled, seed, methods, out):
    """Interval width versus true position along one axis."""
    scene = load_scene(scene_path, t60=t60, snr_db=snr_db, seed=seed)
    signals = SignalSpec("speech_shaped", 2.0)
    ds = build_dataset(scene, GridSpec(*grid), n_unlabeled, 0, signals, seed)
    cfg = StftConfig(sample_rate=scene.room.sample_rate)
    band = select_band(150.0, 1500.0, cfg)
    labeled_feats = [
        features_from_recording(r, cfg, band) for r, _ in ds.labeled
    ]
    unlabeled_feats = [features_from_recording(r, cfg, band) for r in ds.unlabeled]
    model = fit(labeled_feats, ds.labeled_positions, unlabeled=unlabeled_feats)
    rows = sweep_positions(
        model, scene, cfg, band,
        axis={"x": 0, "y": 1}[axis],
        fixed_other=fixed_other, step=step, delta=delta, gamma=gamma,
        methods=methods, seed=seed + 1,
    )
    write_sweep_csv(out, rows)
    click.echo(f"wrote {len(rows)} sweep rows to {out}")


@main.command()
@click.option("--results-dir", type=click.Path(exists=True), required=True,
              help="Directory holding results_repeats.csv.")
def report(results_dir):
    """Aggregate a per-repeat results file and print the summary table."""
    from .harness import SUMMARY_COLUMNS, CoverageReport, _write_csv

    path = os.path.join(results_dir, "results_repeats.csv")
    if not os.path.exists(path):
        raise click.ClickException(f"{path} not found")
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            rows.append(
                {
                    "method": raw["method"],
                    "t60": float(raw["t60"]),
                    "snr_db": float(raw["snr_db"]),
                    "delta": float(raw["delta"]),
                    "axis": raw["axis"],
                    "repeat": int(raw["repeat"]),
                    "n_test": int(raw["n_test"]),
                    "n_covered": int(raw["n_covered"]),
                    "coverage": float(raw["coverage"]),
                    "mean_width": float(raw["mean_width"]),
                    "n_clipped": int(raw["n_clipped"]),
                }
            )
    summary = CoverageReport(rows=rows).summary()
    _write_csv(os.path.join(results_dir, "results_summary.csv"), SUMMARY_COLUMNS, summary)
    header = f"{'method':>15} {'t60':>5} {'snr':>5} {'delta':>6} {'ax':>3} " \
             f"{'coverage':>9} {'width':>8}"
    click.echo(header)
    for row in summary:
        click.echo(
            f"{row['method']:>15} {row['t60']:>5.2g} {row['snr_db']:>5.3g} "
            f"{row['delta']:>6.3g} {row['axis']:>3} "
            f"{row['coverage']:>9.3f} {row['mean_width']:>8.3f}"
        )


if __name__ == "__main__":
    main()
