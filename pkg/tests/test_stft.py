import numpy as np
import pytest

from bmfmvdr.stft import (ComplexSpectrogram, StftConfig, analyze, interior_slice,
                          sqrt_hann_window, synthesize)


class TestConfig:
    def test_defaults(self):
        cfg = StftConfig()
        assert cfg.frame_len == 128 and cfg.frame_shift == 32
        assert cfg.fft_size == 128
        assert cfg.num_bins == 65

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            StftConfig(frame_len=100)  # not a power of two
        with pytest.raises(ValueError):
            StftConfig(frame_len=128, frame_shift=48)  # does not divide

    def test_spectrogram_bin_count_enforced(self):
        cfg = StftConfig()
        with pytest.raises(ValueError):
            ComplexSpectrogram(np.zeros((64, 10), dtype=complex), cfg)


class TestAnalyze:
    def test_zero_input_gives_zero_spectrogram(self):
        spec = analyze(np.zeros(1600))
        assert spec.data.shape == (65, (1600 - 128) // 32 + 1)
        assert np.all(spec.data == 0)

    def test_unit_impulse_magnitudes_equal_window_sample(self):
        # frame 0 of an impulse at sample 64 is w[64] * delta, whose DFT
        # has constant magnitude w[64] in every bin
        x = np.zeros(1600)
        x[64] = 1.0
        spec = analyze(x)
        w64 = sqrt_hann_window(128)[64]
        np.testing.assert_allclose(np.abs(spec.data[:, 0]), w64, atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(-1, 1, 1000)
        b = rng.uniform(-1, 1, 1000)
        left = analyze(a).data + analyze(b).data
        np.testing.assert_allclose(left, analyze(a + b).data, atol=1e-12)

    def test_frame_count(self):
        cfg = StftConfig()
        spec = analyze(np.zeros(128), cfg)
        assert spec.num_frames == 1
        spec = analyze(np.zeros(128 + 32 * 7 + 31), cfg)
        assert spec.num_frames == 8

    def test_too_short_input(self):
        with pytest.raises(ValueError, match="too short"):
            analyze(np.zeros(127))

    def test_windowed_frame_against_direct_dft(self):
        # independent oracle: explicit windowing + full DFT of frame 3
        rng = np.random.default_rng(6)
        x = rng.uniform(-1, 1, 1600)
        cfg = StftConfig()
        spec = analyze(x, cfg)
        frame = x[3 * 32:3 * 32 + 128] * sqrt_hann_window(128)
        oracle = np.fft.fft(frame)[:65]
        np.testing.assert_allclose(spec.data[:, 3], oracle, atol=1e-10)


class TestSynthesize:
    def test_zero_spectrogram_gives_zero_signal(self):
        cfg = StftConfig()
        spec = ComplexSpectrogram(np.zeros((65, 20), dtype=complex), cfg)
        assert np.all(synthesize(spec) == 0)

    def test_perfect_reconstruction_interior(self):
        rng = np.random.default_rng(7)
        cfg = StftConfig()
        x = rng.uniform(-1, 1, 16000)
        y = synthesize(analyze(x, cfg))
        sl = interior_slice(cfg)
        assert np.max(np.abs(y[sl] - x[: len(y)][sl])) < 1e-6

    def test_linearity_scaling(self):
        rng = np.random.default_rng(8)
        x = rng.uniform(-1, 1, 2000)
        spec = analyze(x)
        doubled = ComplexSpectrogram(2.0 * spec.data, spec.config)
        np.testing.assert_allclose(synthesize(doubled), 2.0 * synthesize(spec),
                                   atol=1e-12)


class TestInvariants:
    def test_parseval_per_frame(self):
        # windowed frame energy in time equals (1/L) * one-sided spectrum
        # energy with interior bins doubled
        rng = np.random.default_rng(9)
        cfg = StftConfig()
        x = rng.uniform(-1, 1, 2000)
        spec = analyze(x, cfg)
        t = 5
        frame = x[t * 32:t * 32 + 128] * sqrt_hann_window(128)
        energy_time = np.sum(frame ** 2)
        mags = np.abs(spec.data[:, t]) ** 2
        energy_freq = (mags[0] + mags[-1] + 2 * np.sum(mags[1:-1])) / 128
        assert abs(energy_time - energy_freq) / energy_time < 1e-6

    def test_reconstruction_many_signals(self):
        rng = np.random.default_rng(10)
        cfg = StftConfig()
        sl = interior_slice(cfg)
        for _ in range(10):
            x = rng.uniform(-1, 1, int(rng.integers(500, 3000)))
            y = synthesize(analyze(x, cfg))
            assert np.max(np.abs(y[sl] - x[: len(y)][sl])) < 1e-6

    def test_nonstandard_frame_len(self):
        cfg = StftConfig(frame_len=64, frame_shift=16)
        rng = np.random.default_rng(11)
        x = rng.uniform(-1, 1, 4000)
        y = synthesize(analyze(x, cfg))
        sl = interior_slice(cfg)
        assert np.max(np.abs(y[sl] - x[: len(y)][sl])) < 1e-6
