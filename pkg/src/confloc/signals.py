"""Source signal generators and WAV import/export."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.io import wavfile
from scipy.signal import butter, lfilter, resample_poly

from .errors import ConfigError, InputError

SPEECH_SHAPING_CUTOFF_HZ = 500.0


@dataclass
class SignalSpec:
    """Recipe for a source signal.

    kind: 'white', 'speech_shaped', or 'wav' (requires wav_path).
    """

    kind: str = "white"
    duration_s: float = 2.0
    wav_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("white", "speech_shaped", "wav"):
            raise ConfigError(f"unknown signal kind {self.kind!r}")
        if self.duration_s <= 0:
            raise ConfigError("signal duration must be positive")
        if self.kind == "wav" and not self.wav_path:
            raise ConfigError("signal kind 'wav' requires wav_path")


def white_noise(n_samples, rng):
    return rng.standard_normal(n_samples)


def speech_shaped_noise(n_samples, sample_rate, rng):
    """Unit-RMS noise rolling off at -6 dB/octave above 500 Hz."""
    b, a = butter(1, SPEECH_SHAPING_CUTOFF_HZ, btype="low", fs=sample_rate)
    shaped = lfilter(b, a, rng.standard_normal(n_samples))
    return shaped / np.sqrt(np.mean(shaped**2))


def load_wav(path, target_rate=None):
    """Read a WAV file as float64 in [-1, 1]; optionally resample.

    Multichannel files are averaged to mono.  Returns (signal, rate).
    """
    rate, data = wavfile.read(path)
    data = np.asarray(data)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(float) / float(np.iinfo(data.dtype).max)
    else:
        data = data.astype(float)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if target_rate is not None and rate != target_rate:
        ratio = Fraction(int(round(target_rate)), int(rate)).limit_denominator(1000)
        data = resample_poly(data, ratio.numerator, ratio.denominator)
        rate = target_rate
    return data, rate


def make_signal(spec: SignalSpec, sample_rate, rng):
    """Materialize one signal realization at the given sample rate."""
    n = int(round(spec.duration_s * sample_rate))
    if spec.kind == "white":
        return white_noise(n, rng)
    if spec.kind == "speech_shaped":
        return speech_shaped_noise(n, sample_rate, rng)
    sig, _ = load_wav(spec.wav_path, target_rate=sample_rate)
    if sig.size == 0 or not np.any(sig != 0):
        raise InputError(f"WAV file {spec.wav_path} holds no usable signal")
    if sig.size < n:
        sig = np.tile(sig, int(np.ceil(n / sig.size)))
    sig = sig[:n]
    return sig / np.sqrt(np.mean(sig**2))


def save_recording_wav(path, recording, dtype="float32"):
    """Write a multichannel recording as a standard WAV file."""
    samples = recording.samples.T
    if dtype == "float32":
        wavfile.write(path, int(recording.sample_rate), samples.astype(np.float32))
    elif dtype == "int16":
        peak = np.max(np.abs(samples))
        scale = 32767.0 / peak if peak > 0 else 1.0
        wavfile.write(
            path, int(recording.sample_rate), (samples * scale).astype(np.int16)
        )
    else:
        raise ConfigError("dtype must be 'float32' or 'int16'")
