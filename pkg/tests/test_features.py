import numpy as np
import pytest
from scipy.signal import fftconvolve, get_window

from confloc import (
    RoomSpec,
    StftConfig,
    aggregate,
    estimate_rtf,
    generate_rirs,
    select_band,
    split,
    stft,
)
from confloc.errors import ConfigError, DegenerateBinsError, InputError
from confloc.features import AggregatedRtf, load_features, save_features


@pytest.fixture(scope="module")
def cfg():
    return StftConfig()


@pytest.fixture(scope="module")
def band(cfg):
    return select_band(150.0, 1500.0, cfg)


class TestStft:
    def test_shape_and_hop(self, cfg):
        sig = np.random.default_rng(0).standard_normal(5000)
        x = stft(sig, cfg)
        assert x.shape[0] == cfg.fft_size // 2 + 1
        assert x.shape[1] == 1 + (5000 - cfg.fft_size) // cfg.hop
        assert cfg.hop == 256

    def test_pure_tone_at_bin_center_rect_window(self):
        cfg = StftConfig(window="boxcar")
        k0 = 32
        n = np.arange(4 * cfg.fft_size)
        sig = np.cos(2 * np.pi * k0 * n / cfg.fft_size)
        x = stft(sig, cfg)
        energy = np.abs(x) ** 2
        assert np.all(energy[k0] / energy.sum(axis=0) > 0.999)

    def test_pure_tone_energy_in_window_mainlobe(self, cfg):
        k0 = 32
        n = np.arange(4 * cfg.fft_size)
        sig = np.cos(2 * np.pi * k0 * n / cfg.fft_size)
        x = stft(sig, cfg)
        energy = np.abs(x) ** 2
        assert np.all(np.argmax(energy, axis=0) == k0)
        mainlobe = energy[k0 - 1 : k0 + 2].sum(axis=0)
        assert np.all(mainlobe / energy.sum(axis=0) > 0.90)

    def test_zero_signal_gives_zero_matrix(self, cfg):
        x = stft(np.zeros(3000), cfg)
        assert np.all(x == 0)

    def test_parseval_per_frame(self, cfg):
        sig = np.random.default_rng(1).standard_normal(4096)
        x = stft(sig, cfg)
        win = get_window(cfg.window, cfg.fft_size, fftbins=True)
        for frame_idx in range(x.shape[1]):
            frame = sig[frame_idx * cfg.hop : frame_idx * cfg.hop + cfg.fft_size]
            time_energy = np.sum((win * frame) ** 2)
            spec = np.abs(x[:, frame_idx]) ** 2
            spec_energy = (spec[0] + 2 * spec[1:-1].sum() + spec[-1]) / cfg.fft_size
            assert spec_energy == pytest.approx(time_energy, rel=1e-6)

    def test_too_short_signal_raises(self, cfg):
        with pytest.raises(InputError):
            stft(np.zeros(cfg.fft_size - 1), cfg)

    def test_fft_size_must_be_power_of_two(self):
        with pytest.raises(ConfigError):
            StftConfig(fft_size=1000)


class TestBandSelection:
    def test_reference_band_maps_to_expected_bins(self, band):
        assert band.bin_indices[0] == 10
        assert band.bin_indices[-1] == 96
        assert band.n_bins == 87

    def test_band_edges_inclusive(self, cfg):
        # 1500 Hz sits exactly on bin 96 and is kept
        b = select_band(150.0, 1500.0, cfg)
        assert 96 in b.bin_indices

    def test_invalid_band_rejected(self, cfg):
        with pytest.raises(ConfigError):
            select_band(2000.0, 1000.0, cfg)
        with pytest.raises(ConfigError):
            select_band(100.0, 9000.0, cfg)


class TestEstimateRtf:
    def test_identity_transfer(self, cfg, band):
        sig = np.random.default_rng(2).standard_normal(20000)
        rtf = estimate_rtf(np.stack([sig, sig]), cfg, band)
        np.testing.assert_allclose(rtf, np.ones_like(rtf), atol=1e-12)

    def test_pure_delay_transfer(self, cfg, band):
        delay = 2
        master = np.random.default_rng(3).standard_normal(200000 + delay)
        rec = np.stack([master[delay:], master[:-delay]])
        rtf = estimate_rtf(rec, cfg, band)
        expected = np.exp(-2j * np.pi * band.bin_indices * delay / cfg.fft_size)
        phase_err = np.abs(np.angle(rtf * np.conj(expected)))
        assert phase_err.max() < 1e-3

    def test_matches_true_transfer_ratio_anechoic(self, cfg, band):
        room = RoomSpec([5.2, 6.2, 3.5], t60=0.0)
        src = np.array([2.6, 3.1, 1.5])
        mics = [np.array([1.7, 0.3, 1.5]), np.array([1.9, 0.3, 1.5])]
        h1, h2 = generate_rirs(room, src, mics)
        sig = np.random.default_rng(4).standard_normal(4 * 16000)
        rec = np.stack([fftconvolve(sig, h1), fftconvolve(sig, h2)])
        est = estimate_rtf(rec, cfg, band)
        # oracle: transfer ratio from the known RIRs, DTFT at band bins
        n1 = np.arange(h1.size)
        omega = 2 * np.pi * band.bin_indices[:, None] / cfg.fft_size
        tf1 = (h1 * np.exp(-1j * omega * n1)).sum(axis=1)
        tf2 = (h2 * np.exp(-1j * omega * n1)).sum(axis=1)
        truth = tf2 / tf1
        rel_err = np.abs(est - truth) / np.abs(truth)
        assert rel_err.max() < 0.01

    def test_invariant_to_global_amplitude_scaling(self, cfg, band):
        rec = np.random.default_rng(5).standard_normal((2, 30000))
        base = estimate_rtf(rec, cfg, band)
        for alpha in (0.1, 10.0):
            scaled = estimate_rtf(alpha * rec, cfg, band)
            np.testing.assert_allclose(scaled, base, atol=1e-10)

    def test_degenerate_bins_reported(self, cfg, band):
        # a pure tone leaves nearly all in-band bins without power
        n = np.arange(40000)
        tone = np.cos(2 * np.pi * 50 * n / cfg.fft_size)
        with pytest.raises(DegenerateBinsError) as err:
            estimate_rtf(np.stack([tone, tone]), cfg, band)
        assert len(err.value.bins) > 0

    def test_too_few_frames_rejected(self, cfg, band):
        rec = np.random.default_rng(6).standard_normal((2, cfg.fft_size + cfg.hop))
        with pytest.raises(InputError):
            estimate_rtf(rec, cfg, band)


class TestAggregate:
    def test_single_node_flat_equals_vector(self):
        v = np.arange(5) + 1j * np.arange(5)
        agg = aggregate([v])
        np.testing.assert_array_equal(agg.flat, v)

    def test_two_nodes_concatenate_in_order(self):
        u = np.ones(4) * (1 + 2j)
        v = np.arange(4).astype(complex)
        agg = aggregate([u, v])
        np.testing.assert_array_equal(agg.flat, np.concatenate([u, v]))
        assert agg.n_nodes == 2

    def test_round_trip_split(self):
        parts = [np.random.default_rng(7).standard_normal(6) + 0j for _ in range(3)]
        agg = aggregate(parts)
        for orig, back in zip(parts, split(agg)):
            np.testing.assert_array_equal(orig, back)

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(InputError):
            aggregate([np.zeros(3, complex), np.zeros(4, complex)])


class TestPersistence:
    def test_round_trip(self, tmp_path, cfg, band):
        rng = np.random.default_rng(8)
        feats = [
            AggregatedRtf(tuple(rng.standard_normal(4) + 1j * rng.standard_normal(4) for _ in range(2)))
            for _ in range(5)
        ]
        positions = rng.random((5, 2))
        path = tmp_path / "features.npz"
        save_features(path, feats, cfg, band, positions=positions)
        loaded, meta, pos = load_features(path)
        assert meta["n_nodes"] == 2
        assert meta["fft_size"] == cfg.fft_size
        np.testing.assert_allclose(pos, positions)
        for a, b in zip(feats, loaded):
            np.testing.assert_array_equal(a.flat, b.flat)
