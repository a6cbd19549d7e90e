"""Shoebox room simulation: image-source RIRs and multichannel recordings.

Rooms are rectangular with frequency-independent wall reflection derived
from the target reverberation time via Eyring's formula.  Fractional
sample delays use a Hann-windowed sinc stencil (+-8 taps), so impulse
responses whose delay lands on an integer sample reduce to a single
impulse of amplitude 1/(4*pi*d).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit
from scipy.signal import butter, fftconvolve, sosfilt

from .errors import ConfigError, GeometryError
from .signals import SignalSpec, make_signal

SINC_TAPS = 8            # half-width of the fractional-delay stencil, samples
MAX_IMAGE_ORDER = 20     # per-axis cap on image indices for the default rule
RIR_HIGHPASS_HZ = 100.0  # removes the image method's spurious DC buildup
EYRING_CONST = 24.0 * math.log(10.0)


@dataclass
class RoomSpec:
    """Rectangular room with a single broadband reverberation target."""

    dimensions: np.ndarray          # (3,) meters
    t60: float                      # seconds
    sample_rate: float = 16000.0    # Hz
    speed_of_sound: float = 343.0   # m/s

    def __post_init__(self):
        self.dimensions = np.asarray(self.dimensions, dtype=float)
        if self.dimensions.shape != (3,) or not np.all(self.dimensions > 0):
            raise ConfigError("room dimensions must be three positive lengths")
        if self.t60 < 0:
            raise ConfigError("t60 must be >= 0")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if self.speed_of_sound <= 0:
            raise ConfigError("speed_of_sound must be positive")

    def contains(self, point, strict=True):
        p = np.asarray(point, dtype=float)
        if strict:
            return bool(np.all(p > 0) and np.all(p < self.dimensions))
        return bool(np.all(p >= 0) and np.all(p <= self.dimensions))

    def reflection_coefficient(self):
        """Uniform wall reflection amplitude from Eyring's formula."""
        if self.t60 == 0:
            return 0.0
        lx, ly, lz = self.dimensions
        volume = lx * ly * lz
        surface = 2.0 * (lx * ly + lx * lz + ly * lz)
        absorption = 1.0 - math.exp(
            -EYRING_CONST * volume / (self.speed_of_sound * surface * self.t60)
        )
        beta = math.sqrt(1.0 - absorption)
        if beta >= 1.0:
            raise ConfigError(f"t60={self.t60} s implies reflection >= 1")
        return beta


@dataclass
class MicNode:
    """A pair of microphones treated as one observation unit."""

    mic1: np.ndarray  # (3,) meters
    mic2: np.ndarray

    def __post_init__(self):
        self.mic1 = np.asarray(self.mic1, dtype=float)
        self.mic2 = np.asarray(self.mic2, dtype=float)
        if self.mic1.shape != (3,) or self.mic2.shape != (3,):
            raise ConfigError("microphone positions must be 3-vectors")
        if np.array_equal(self.mic1, self.mic2):
            raise ConfigError("the two microphones of a node must be distinct")


@dataclass
class ArrayLayout:
    nodes: list[MicNode]

    def __post_init__(self):
        if len(self.nodes) < 1:
            raise ConfigError("layout needs at least one node")

    @property
    def n_nodes(self):
        return len(self.nodes)

    def mic_positions(self):
        """All microphone positions, shape (2M, 3), channel order
        [node0.mic1, node0.mic2, node1.mic1, ...]."""
        return np.stack([m for n in self.nodes for m in (n.mic1, n.mic2)])

    def validate_inside(self, room: RoomSpec):
        for pos in self.mic_positions():
            if not room.contains(pos):
                raise GeometryError(f"microphone at {pos} is outside the room")


@dataclass
class Roi:
    """Axis-aligned rectangle of admissible source positions (meters)."""

    x: tuple[float, float]
    y: tuple[float, float]

    def __post_init__(self):
        if not (self.x[0] < self.x[1] and self.y[0] < self.y[1]):
            raise ConfigError("ROI bounds must satisfy lo < hi on both axes")

    def contains(self, p):
        return bool(
            self.x[0] <= p[0] <= self.x[1] and self.y[0] <= p[1] <= self.y[1]
        )

    def sample(self, rng, n):
        """n positions uniform over the rectangle, shape (n, 2)."""
        lo = np.array([self.x[0], self.y[0]])
        hi = np.array([self.x[1], self.y[1]])
        return lo + (hi - lo) * rng.random((n, 2))

    def grid(self, nx, ny):
        """Uniform nx*ny grid at cell centers, shape (nx*ny, 2).

        Cell centers keep the stated pitch (span/n) while staying strictly
        inside the rectangle.
        """
        if nx <= 0 or ny <= 0:
            raise ConfigError("grid resolution must be positive")
        px = self.x[0] + (np.arange(nx) + 0.5) * (self.x[1] - self.x[0]) / nx
        py = self.y[0] + (np.arange(ny) + 0.5) * (self.y[1] - self.y[0]) / ny
        gx, gy = np.meshgrid(px, py, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel()])

    def bounds(self, axis):
        return self.x if axis == 0 else self.y


@dataclass
class Scene:
    """A fully specified measurement setup for one source position."""

    room: RoomSpec
    array: ArrayLayout
    source_pos: np.ndarray        # (2,) meters, fixed height
    roi: Roi
    snr_db: float = math.inf
    seed: int = 0
    source_height: float = 1.5

    def __post_init__(self):
        self.source_pos = np.asarray(self.source_pos, dtype=float)
        if self.source_pos.shape != (2,):
            raise ConfigError("source_pos must be a 2-vector (x, y)")
        if not self.roi.contains(self.source_pos):
            raise GeometryError(f"source {self.source_pos} outside the ROI")
        lx, ly, _ = self.room.dimensions
        if not (
            0 <= self.roi.x[0]
            and self.roi.x[1] <= lx
            and 0 <= self.roi.y[0]
            and self.roi.y[1] <= ly
        ):
            raise GeometryError("ROI extends outside the room footprint")
        self.array.validate_inside(self.room)

    def source_pos3(self, pos2=None):
        p = self.source_pos if pos2 is None else np.asarray(pos2, dtype=float)
        return np.array([p[0], p[1], self.source_height])


@dataclass
class MultichannelRecording:
    samples: np.ndarray       # (2M, T)
    sample_rate: float

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if not np.all(np.isfinite(self.samples)):
            raise ConfigError("recording contains non-finite samples")

    @property
    def n_channels(self):
        return self.samples.shape[0]

    @property
    def duration(self):
        return self.samples.shape[1] / self.sample_rate


@njit(cache=True)
def _scatter_windowed_sinc(h, centers, amps, half_width):
    """Accumulate Hann-windowed sinc stencils at fractional sample delays."""
    n_len = h.size
    for i in range(centers.size):
        c = centers[i]
        a = amps[i]
        n0 = int(math.floor(c))
        lo = n0 - half_width + 1
        if lo < 0:
            lo = 0
        hi = n0 + half_width + 1
        if hi > n_len:
            hi = n_len
        for n in range(lo, hi):
            t = n - c
            if t == 0.0:
                h[n] += a
            else:
                w = 0.5 * (1.0 + math.cos(math.pi * t / half_width))
                h[n] += a * w * math.sin(math.pi * t) / (math.pi * t)


@njit(cache=True)
def _accumulate_image_taps(
    h, cx, ax, cy, ay, cz, az, mic, fs_over_c, reach, half_width, win_cos, win_sin
):
    """Fused image enumeration + windowed-sinc scatter for one microphone.

    Per image only three transcendentals are needed: with t = k - frac,
    sin(pi*t) = -(-1)^k * sin(pi*frac) and the Hann window term expands by
    the angle-addition formula over precomputed cos/sin(pi*k/half_width).
    """
    n_len = h.size
    reach2 = reach * reach
    inv_4pi = 1.0 / (4.0 * math.pi)
    for ix in range(cx.size):
        amp_x = ax[ix]
        if amp_x == 0.0:
            continue
        dx = cx[ix] - mic[0]
        dx2 = dx * dx
        if dx2 > reach2:
            continue
        for iy in range(cy.size):
            amp_xy = amp_x * ay[iy]
            if amp_xy == 0.0:
                continue
            dy = cy[iy] - mic[1]
            dxy2 = dx2 + dy * dy
            if dxy2 > reach2:
                continue
            for iz in range(cz.size):
                amp = amp_xy * az[iz]
                if amp == 0.0:
                    continue
                dz = cz[iz] - mic[2]
                d2 = dxy2 + dz * dz
                if d2 > reach2:
                    continue
                d = math.sqrt(d2)
                c = d * fs_over_c
                a = amp * inv_4pi / d
                n0 = int(math.floor(c))
                frac = c - n0
                if frac == 0.0:
                    if 0 <= n0 < n_len:
                        h[n0] += a
                    continue
                # reflect to the smaller angle: sin(pi*f) near f=1 cancels
                small = frac if frac <= 0.5 else 1.0 - frac
                sin_frac = math.sin(math.pi * small) / math.pi
                wc = math.cos(math.pi * frac / half_width)
                ws = math.sin(math.pi * frac / half_width)
                lo = -half_width + 1
                if n0 + lo < 0:
                    lo = -n0
                hi = half_width
                if n0 + hi >= n_len:
                    hi = n_len - 1 - n0
                for k in range(lo, hi + 1):
                    t = k - frac
                    sgn = -1.0 if (k & 1) else 1.0
                    idx = k + half_width
                    window = 0.5 * (1.0 + win_cos[idx] * wc + win_sin[idx] * ws)
                    h[n0 + k] += a * window * (-sgn * sin_frac) / t


def _axis_images(length, coord, order, beta):
    """Per-axis image coordinates and reflection amplitudes.

    Returns (coords, amps) of length 2*(2*order+1) covering both parities.
    """
    r = np.arange(-order, order + 1)
    coords = np.concatenate([coord + 2.0 * r * length, -coord + 2.0 * r * length])
    # Wall-crossing counts: 2|r| for same-parity images, |r-1| + |r| for
    # mirrored ones (wall at 0 hit |r-1| times, wall at L hit |r| times).
    exponents = np.concatenate([2 * np.abs(r), np.abs(r - 1) + np.abs(r)])
    amps = np.power(beta, exponents.astype(float))
    return coords, amps


def _default_orders(room: RoomSpec):
    if room.t60 == 0:
        return np.zeros(3, dtype=int)
    reach = 1.5 * room.t60 * room.speed_of_sound
    orders = np.ceil(reach / (2.0 * room.dimensions)).astype(int)
    return np.minimum(orders, MAX_IMAGE_ORDER)


def generate_rirs(room: RoomSpec, src, mics, max_order=None):
    """Image-source impulse responses from one source to several mics.

    Image geometry is shared across microphones.  Returns a list of 1-D
    arrays at room.sample_rate, one per microphone, all the same length.
    """
    src = np.asarray(src, dtype=float)
    mics = np.atleast_2d(np.asarray(mics, dtype=float))
    if not room.contains(src):
        raise GeometryError(f"source {src} is outside the room")
    for mic in mics:
        if not room.contains(mic):
            raise GeometryError(f"microphone {mic} is outside the room")
        if np.allclose(mic, src):
            raise GeometryError("source and microphone positions coincide")

    beta = room.reflection_coefficient()
    if max_order is None:
        orders = _default_orders(room)
    else:
        if max_order < 0:
            raise ConfigError("max_order must be >= 0")
        orders = np.full(3, int(max_order))

    fs = room.sample_rate
    c = room.speed_of_sound
    # Tail limited by how far the enumerated images can reach on the
    # tightest axis; 1.5x t60 when the order cap is not binding.
    if room.t60 > 0:
        tail = min(1.5 * room.t60, float(np.min(2 * orders * room.dimensions)) / c)
    else:
        tail = 0.0
    max_direct = float(np.max(np.linalg.norm(mics - src, axis=1)))
    n_len = int(math.ceil((max_direct / c + tail) * fs)) + SINC_TAPS + 1

    cx, ax = _axis_images(room.dimensions[0], src[0], orders[0], beta)
    cy, ay = _axis_images(room.dimensions[1], src[1], orders[1], beta)
    cz, az = _axis_images(room.dimensions[2], src[2], orders[2], beta)

    reach = (n_len + SINC_TAPS) * c / fs
    k = np.arange(-SINC_TAPS, SINC_TAPS + 1)
    win_cos = np.cos(np.pi * k / SINC_TAPS)
    win_sin = np.sin(np.pi * k / SINC_TAPS)
    # Positive image amplitudes pile up into a spurious low-frequency
    # component; high-pass the reverberant response to remove it.
    hp_sos = butter(2, RIR_HIGHPASS_HZ, btype="high", fs=fs, output="sos")
    rirs = []
    for mic in mics:
        h = np.zeros(n_len)
        _accumulate_image_taps(
            h, cx, ax, cy, ay, cz, az, mic, fs / c, reach, SINC_TAPS,
            win_cos, win_sin,
        )
        if room.t60 > 0:
            h = sosfilt(hp_sos, h)
        rirs.append(h)
    return rirs


def generate_rir(room: RoomSpec, src, mic, max_order=None):
    """Impulse response between one source and one microphone."""
    return generate_rirs(room, src, [mic], max_order=max_order)[0]


def render_clean_channels(scene: Scene, source_signal, source_pos=None):
    """Reverberant (noise-free) channels for a source at the given position."""
    signal = np.asarray(source_signal, dtype=float)
    if signal.ndim != 1 or signal.size == 0 or not np.any(signal != 0):
        raise ConfigError("source signal must be non-empty with nonzero power")
    src3 = scene.source_pos3(source_pos)
    rirs = generate_rirs(scene.room, src3, scene.array.mic_positions())
    channels = np.stack([fftconvolve(signal, h) for h in rirs])
    return channels


def apply_channel_noise(channels, snr_db, rng):
    """Add white Gaussian noise so each channel hits the target SNR.

    Noise power is set from the realized per-channel signal power, so the
    average SNR matches snr_db exactly up to the sampling noise of the
    noise sequence itself.
    """
    if math.isinf(snr_db):
        return channels.copy()
    noisy = channels.copy()
    for ch in noisy:
        p_sig = float(np.mean(ch**2))
        sigma = math.sqrt(p_sig * 10.0 ** (-snr_db / 10.0))
        ch += sigma * rng.standard_normal(ch.size)
    return noisy


def simulate_recording(scene: Scene, source_signal, rng_seed) -> MultichannelRecording:
    """Reverberant multichannel recording with per-channel SNR control.

    Deterministic given (scene, source_signal, rng_seed).
    """
    channels = render_clean_channels(scene, source_signal)
    rng = np.random.default_rng(rng_seed)
    noisy = apply_channel_noise(channels, scene.snr_db, rng)
    return MultichannelRecording(noisy, scene.room.sample_rate)


@dataclass
class GridSpec:
    nx: int
    ny: int

    def __post_init__(self):
        if self.nx <= 0 or self.ny <= 0:
            raise ConfigError("grid resolution must be positive")


@dataclass
class Dataset:
    """Labeled / unlabeled / test measurement sets over one scene."""

    labeled: list                   # [(MultichannelRecording, (2,) position)]
    unlabeled: list                 # [MultichannelRecording]
    test: list                      # [(MultichannelRecording, (2,) position)]
    scene: Scene

    @property
    def labeled_positions(self):
        return np.array([p for _, p in self.labeled]).reshape(-1, 2)

    @property
    def test_positions(self):
        return np.array([p for _, p in self.test]).reshape(-1, 2)


def _resolve_signal(signals, subset, rng, sample_rate):
    spec = signals[subset] if isinstance(signals, dict) else signals
    if isinstance(spec, SignalSpec):
        return make_signal(spec, sample_rate, rng)
    return np.asarray(spec, dtype=float)


def build_dataset(
    scene_template: Scene,
    grid_spec: GridSpec,
    n_unlabeled: int,
    n_test: int,
    signals,
    rng_seed,
) -> Dataset:
    """Simulate the labeled grid plus random unlabeled/test positions.

    `signals` is a SignalSpec, a waveform, or a dict keyed by subset name
    ('labeled', 'unlabeled', 'test').  Each position gets an independent
    signal realization and noise stream derived from rng_seed.
    """
    if n_unlabeled < 0 or n_test < 0:
        raise ConfigError("n_unlabeled and n_test must be >= 0")
    labeled_pos = scene_template.roi.grid(grid_spec.nx, grid_spec.ny)
    if isinstance(rng_seed, np.random.SeedSequence):
        master = rng_seed
    else:
        master = np.random.SeedSequence(rng_seed)
    pos_rng = np.random.default_rng(master.spawn(1)[0])
    unlabeled_pos = scene_template.roi.sample(pos_rng, n_unlabeled)
    test_pos = scene_template.roi.sample(pos_rng, n_test)

    fs = scene_template.room.sample_rate
    out = {"labeled": [], "unlabeled": [], "test": []}
    groups = [
        ("labeled", labeled_pos),
        ("unlabeled", unlabeled_pos),
        ("test", test_pos),
    ]
    seeds = master.spawn(sum(len(p) for _, p in groups))
    k = 0
    for subset, positions in groups:
        for pos in positions:
            rng = np.random.default_rng(seeds[k])
            k += 1
            sig = _resolve_signal(signals, subset, rng, fs)
            scene = replace(scene_template, source_pos=pos)
            clean = render_clean_channels(scene, sig)
            noisy = apply_channel_noise(clean, scene.snr_db, rng)
            rec = MultichannelRecording(noisy, fs)
            if subset == "unlabeled":
                out[subset].append(rec)
            else:
                out[subset].append((rec, pos.copy()))
    return Dataset(out["labeled"], out["unlabeled"], out["test"], scene_template)


def _pack_recordings(recordings):
    """Zero-pad recordings to a common length; returns (array, lengths)."""
    if not recordings:
        return np.zeros((0, 0, 0), dtype=np.float32), np.zeros(0, dtype=int)
    t_max = max(r.samples.shape[1] for r in recordings)
    packed = np.zeros((len(recordings), recordings[0].n_channels, t_max), np.float32)
    lengths = np.empty(len(recordings), dtype=int)
    for i, rec in enumerate(recordings):
        lengths[i] = rec.samples.shape[1]
        packed[i, :, : lengths[i]] = rec.samples
    return packed, lengths


def _unpack_recordings(packed, lengths, sample_rate):
    return [
        MultichannelRecording(packed[i, :, : lengths[i]].astype(float), sample_rate)
        for i in range(packed.shape[0])
    ]


def save_dataset(path, dataset: Dataset):
    """Persist a simulated dataset (float32 samples) to one .npz file."""
    scene = dataset.scene
    meta = {
        "sample_rate": scene.room.sample_rate,
        "t60": scene.room.t60,
        "snr_db": str(scene.snr_db),
        "n_nodes": scene.array.n_nodes,
        "roi_x": list(scene.roi.x),
        "roi_y": list(scene.roi.y),
    }
    lab, lab_len = _pack_recordings([r for r, _ in dataset.labeled])
    unl, unl_len = _pack_recordings(dataset.unlabeled)
    tst, tst_len = _pack_recordings([r for r, _ in dataset.test])
    np.savez_compressed(
        path,
        meta=json.dumps(meta),
        labeled=lab, labeled_len=lab_len,
        labeled_pos=dataset.labeled_positions,
        unlabeled=unl, unlabeled_len=unl_len,
        test=tst, test_len=tst_len,
        test_pos=dataset.test_positions,
    )


def load_dataset(path):
    """Inverse of save_dataset: (labeled, unlabeled, test, meta) where the
    labeled/test entries are (recording, position) pairs."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        fs = meta["sample_rate"]
        labeled = list(
            zip(
                _unpack_recordings(data["labeled"], data["labeled_len"], fs),
                data["labeled_pos"],
            )
        )
        unlabeled = _unpack_recordings(data["unlabeled"], data["unlabeled_len"], fs)
        test = list(
            zip(
                _unpack_recordings(data["test"], data["test_len"], fs),
                data["test_pos"],
            )
        )
    return labeled, unlabeled, test, meta
