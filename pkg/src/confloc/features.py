"""STFT analysis and relative-transfer-function feature vectors.

A node's feature is the per-bin ratio of the cross-PSD between its two
microphones to the auto-PSD of the first microphone, taken over a fixed
frequency band.  Node features are concatenated into one aggregated
complex vector per measurement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window

from .errors import ConfigError, DegenerateBinsError, InputError

PSD_FLOOR_FACTOR = 1e-12
MIN_FRAMES = 8


@dataclass
class StftConfig:
    fft_size: int = 1024
    overlap: float = 0.75
    window: str = "hann"
    sample_rate: float = 16000.0

    def __post_init__(self):
        if self.fft_size < 2 or (self.fft_size & (self.fft_size - 1)) != 0:
            raise ConfigError("fft_size must be a power of two")
        if not 0 <= self.overlap < 1:
            raise ConfigError("overlap must be in [0, 1)")
        if self.hop < 1:
            raise ConfigError("overlap too close to 1 for this fft_size")

    @property
    def hop(self):
        return int(round(self.fft_size * (1.0 - self.overlap)))

    @property
    def n_bins(self):
        return self.fft_size // 2 + 1


@dataclass
class BandSelection:
    f_low: float
    f_high: float
    bin_indices: np.ndarray

    def __post_init__(self):
        self.bin_indices = np.asarray(self.bin_indices, dtype=int)
        if self.bin_indices.size == 0 or np.any(np.diff(self.bin_indices) <= 0):
            raise ConfigError("band bin list must be non-empty, strictly increasing")

    @property
    def n_bins(self):
        return self.bin_indices.size


def select_band(f_low, f_high, cfg: StftConfig) -> BandSelection:
    """Map a frequency range (inclusive edges) to one-sided STFT bins.

    Hz-to-bin conversion rounds to the nearest bin.
    """
    if not 0 <= f_low < f_high:
        raise ConfigError("need 0 <= f_low < f_high")
    if f_high > cfg.sample_rate / 2:
        raise ConfigError("f_high exceeds the Nyquist frequency")
    scale = cfg.fft_size / cfg.sample_rate
    k_lo = int(np.floor(f_low * scale + 0.5))
    k_hi = int(np.floor(f_high * scale + 0.5))
    k_hi = min(k_hi, cfg.n_bins - 1)
    if k_lo > k_hi:
        raise ConfigError("band selects no bins at this resolution")
    return BandSelection(f_low, f_high, np.arange(k_lo, k_hi + 1))


def stft(signal, cfg: StftConfig):
    """One-sided STFT, shape (fft_size//2 + 1, n_frames).

    Frames hop by fft_size*(1-overlap); the window is a periodic Hann with
    unit peak amplitude, and spectra are unscaled FFT outputs.
    """
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1 or x.size < cfg.fft_size:
        raise InputError(
            f"signal must be 1-D with at least fft_size={cfg.fft_size} samples"
        )
    win = get_window(cfg.window, cfg.fft_size, fftbins=True)
    n_frames = 1 + (x.size - cfg.fft_size) // cfg.hop
    starts = np.arange(n_frames) * cfg.hop
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.fft_size)[starts]
    return np.fft.rfft(frames * win, axis=1).T


def estimate_rtf(node_recording, cfg: StftConfig, band: BandSelection):
    """Per-bin CPSD/PSD ratio between the two microphones of a node.

    node_recording: (2, T) array.  PSDs are plain averages over STFT
    frames.  Returns a complex vector over the selected band.
    """
    rec = np.asarray(node_recording, dtype=float)
    if rec.ndim != 2 or rec.shape[0] != 2:
        raise InputError("node recording must have shape (2, T)")
    x1 = stft(rec[0], cfg)
    x2 = stft(rec[1], cfg)
    if x1.shape[1] < MIN_FRAMES:
        raise InputError(f"need at least {MIN_FRAMES} STFT frames")
    s11 = np.mean(np.abs(x1) ** 2, axis=1)
    s21 = np.mean(x2 * np.conj(x1), axis=1)
    idx = band.bin_indices
    floor = PSD_FLOOR_FACTOR * float(np.mean(s11[idx]))
    dead = idx[s11[idx] <= floor]
    if dead.size:
        raise DegenerateBinsError(dead.tolist())
    return s21[idx] / s11[idx]


@dataclass
class AggregatedRtf:
    """Concatenated node features with per-node views preserved."""

    per_node: tuple

    def __post_init__(self):
        self.per_node = tuple(np.asarray(v, dtype=complex) for v in self.per_node)
        if not self.per_node:
            raise InputError("aggregated feature needs at least one node")
        sizes = {v.size for v in self.per_node}
        if len(sizes) != 1:
            raise InputError(f"node vectors disagree on length: {sorted(sizes)}")

    @property
    def n_nodes(self):
        return len(self.per_node)

    @property
    def n_bins(self):
        return self.per_node[0].size

    @property
    def flat(self):
        return np.concatenate(self.per_node)


def aggregate(rtfs) -> AggregatedRtf:
    """Stack per-node RTF vectors into one aggregated feature."""
    return AggregatedRtf(tuple(rtfs))


def split(feature: AggregatedRtf):
    return list(feature.per_node)


def features_from_recording(recording, cfg: StftConfig, band: BandSelection):
    """Aggregated RTF feature of a 2M-channel recording (channels paired)."""
    samples = recording.samples
    if samples.shape[0] % 2 != 0:
        raise InputError("recording must have an even channel count (mic pairs)")
    rtfs = [
        estimate_rtf(samples[2 * m : 2 * m + 2], cfg, band)
        for m in range(samples.shape[0] // 2)
    ]
    return aggregate(rtfs)


def save_features(path, features, cfg: StftConfig, band: BandSelection, positions=None):
    """Persist features as a binary matrix with a JSON metadata header."""
    features = list(features)
    n_nodes = features[0].n_nodes
    matrix = np.stack([f.flat for f in features])
    meta = {
        "n_nodes": n_nodes,
        "bins_per_node": features[0].n_bins,
        "f_low": band.f_low,
        "f_high": band.f_high,
        "bin_indices": band.bin_indices.tolist(),
        "fft_size": cfg.fft_size,
        "overlap": cfg.overlap,
        "window": cfg.window,
        "sample_rate": cfg.sample_rate,
    }
    payload = {"matrix": matrix, "meta": json.dumps(meta)}
    if positions is not None:
        payload["positions"] = np.asarray(positions, dtype=float)
    np.savez(path, **payload)


def load_features(path):
    """Inverse of save_features.

    Returns (features, meta, positions); positions is None when absent.
    """
    with np.load(path, allow_pickle=False) as data:
        matrix = data["matrix"]
        meta = json.loads(str(data["meta"]))
        positions = data["positions"] if "positions" in data else None
    m, f = meta["n_nodes"], meta["bins_per_node"]
    features = [
        AggregatedRtf(tuple(row[i * f : (i + 1) * f] for i in range(m)))
        for row in matrix
    ]
    return features, meta, positions
