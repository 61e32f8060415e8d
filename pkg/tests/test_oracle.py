import numpy as np
import pytest

from bmfmvdr.mfmvdr import (FilterOrder, enhance_utterance, mfmvdr_weights,
                            stack_multiframe_grid)
from bmfmvdr.oracle import (SmoothingConfig, direct_filter_from_net,
                            oracle_filter_params, oracle_noise_stcm,
                            oracle_noise_stcm_track, oracle_speech_stcv,
                            oracle_speech_stcv_track)
from bmfmvdr.stft import ComplexSpectrogram, StftConfig


def make_spec(data):
    # wrap 5-bin grids as real spectrograms; other widths stay raw arrays
    if data.shape[0] == 5:
        return ComplexSpectrogram(data, StftConfig(frame_len=8, frame_shift=2))
    return data


class TestSpeechOracle:
    def test_rank_one_stationary_recovers_gamma(self):
        # complex exponential per bin: the multi-frame stack is c_t * gamma_bar
        # with gamma_bar fixed, so the smoothed ratio equals gamma_bar exactly
        order = FilterOrder(3)
        omega = 0.7
        t = np.arange(150)
        clean_l = np.exp(1j * omega * t)[None, :] * np.ones((5, 1))
        clean_r = 0.6 * np.exp(0.3j) * clean_l
        sl, sr = make_spec(clean_l), make_spec(clean_r)
        gl, gr = oracle_speech_stcv_track(sl, sr, order)
        lags = np.exp(-1j * omega * np.arange(3))
        gamma_bar = np.concatenate([lags, 0.6 * np.exp(0.3j) * lags])
        np.testing.assert_allclose(gl[2, 100], gamma_bar, atol=1e-3)
        expected_r = gamma_bar / gamma_bar[3]
        np.testing.assert_allclose(gr[2, 100], expected_r, atol=1e-3)

    def test_zero_clean_gives_selection_vectors(self):
        order = FilterOrder(4)
        zeros = np.zeros((5, 30), dtype=complex)
        sl = make_spec(zeros)
        stcv = oracle_speech_stcv(sl, sl, 2, 20, order)
        np.testing.assert_array_equal(stcv.gamma_left, np.eye(8)[0])
        np.testing.assert_array_equal(stcv.gamma_right, np.eye(8)[4])

    def test_first_frame_is_instantaneous_ratio(self):
        rng = np.random.default_rng(0)
        order = FilterOrder(2)
        dl = rng.standard_normal((5, 6)) + 1j * rng.standard_normal((5, 6))
        dr = rng.standard_normal((5, 6)) + 1j * rng.standard_normal((5, 6))
        stcv = oracle_speech_stcv(make_spec(dl), make_spec(dr), 1, 0, order)
        # at t=0 the smoothing factors cancel in the ratio
        x0 = np.array([dl[1, 0], 0, dr[1, 0], 0])
        expected = x0 * x0[0].conj() / abs(x0[0]) ** 2
        np.testing.assert_allclose(stcv.gamma_left, expected, atol=1e-12)


class TestNoiseOracle:
    def test_white_noise_converges_to_scaled_identity(self):
        # law of large numbers: with a long smoothing window, the factor
        # approaches I/sigma; averaging over independent bins beats down
        # the irreducible estimator variance of a single track
        rng = np.random.default_rng(1)
        order = FilterOrder(3)
        sigma = 0.5
        shape = (16, 600)
        nl = sigma / np.sqrt(2) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
        nr = sigma / np.sqrt(2) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
        cfg = SmoothingConfig(alpha_noise=0.99)
        chol = oracle_noise_stcm_track(nl, nr, order, cfg)
        target = np.eye(order.dim) / sigma
        mean_l = np.mean(chol[:, 500], axis=0)
        frob = np.linalg.norm(mean_l - target) / np.linalg.norm(target)
        assert frob < 0.05
        diag = chol[:, 500, np.arange(6), np.arange(6)].real
        np.testing.assert_allclose(diag, 1.0 / sigma, rtol=0.15)

    def test_first_frame_base_case(self):
        order = FilterOrder(2)
        zeros = np.zeros((3, 5), dtype=complex)
        zl = make_spec(zeros)
        cfg = SmoothingConfig()
        chol = oracle_noise_stcm(zl, zl, 0, 0, order, cfg)
        # all-zero noise: Phi stays at alpha * init * I (+ loading)
        init = 1e-12  # floor, since the mean input power is zero
        expected = cfg.alpha_noise * init
        expected = expected * (1.0 + cfg.loading)
        np.testing.assert_allclose(chol, np.eye(4) / np.sqrt(expected), rtol=1e-6)

    def test_factors_satisfy_invariants(self):
        rng = np.random.default_rng(2)
        order = FilterOrder(2)
        nl = rng.standard_normal((3, 40)) + 1j * rng.standard_normal((3, 40))
        nr = rng.standard_normal((3, 40)) + 1j * rng.standard_normal((3, 40))
        chol = oracle_noise_stcm_track(make_spec(nl), make_spec(nr), order)
        assert np.all(np.triu(np.abs(chol), k=1) == 0)
        diag = chol[..., np.arange(4), np.arange(4)]
        assert np.all(diag.real > 0) and np.all(diag.imag == 0)
        phi_inv = chol @ chol.conj().swapaxes(-1, -2)
        assert all(np.min(np.linalg.eigvalsh(p)) > 0
                   for p in phi_inv.reshape(-1, 4, 4)[::17])


class TestDirectFilter:
    def test_zero_gives_zero(self):
        np.testing.assert_array_equal(direct_filter_from_net(np.zeros(8)),
                                      np.zeros(4, complex))

    def test_tanh_saturation(self):
        w = direct_filter_from_net(np.full(8, 50.0))
        np.testing.assert_allclose(w.real, 1.0, atol=1e-12)
        np.testing.assert_allclose(w.imag, 1.0, atol=1e-12)
        w = direct_filter_from_net(np.full(8, -50.0))
        np.testing.assert_allclose(w.real, -1.0, atol=1e-12)

    def test_inverse_map(self):
        h = np.zeros(8)
        h[0] = np.arctanh(0.5)
        w = direct_filter_from_net(h)
        assert abs(w[0].real - 0.5) < 1e-12

    def test_bounded_elementwise(self):
        rng = np.random.default_rng(3)
        w = direct_filter_from_net(rng.standard_normal((100, 12)) * 10)
        assert np.max(np.abs(w.real)) <= 1.0 and np.max(np.abs(w.imag)) <= 1.0

    def test_length_validation(self):
        with pytest.raises(ValueError):
            direct_filter_from_net(np.zeros(6))


class TestPipelineEquivalence:
    def test_stationary_scene_approaches_analytic_mfmvdr(self):
        # point source (rank-1 per bin) plus white noise with known
        # covariance: compare the oracle-driven pipeline to the
        # closed-form filter output after burn-in
        rng = np.random.default_rng(4)
        order = FilterOrder(3)
        num_frames = 800
        omega = 0.9
        t = np.arange(num_frames)
        amp_r = 0.7 * np.exp(0.4j)
        clean_l = np.exp(1j * omega * t)[None, :]
        clean_r = amp_r * clean_l
        sigma = 0.25
        noise_l = sigma / np.sqrt(2) * (rng.standard_normal((1, num_frames))
                                        + 1j * rng.standard_normal((1, num_frames)))
        noise_r = sigma / np.sqrt(2) * (rng.standard_normal((1, num_frames))
                                        + 1j * rng.standard_normal((1, num_frames)))
        noisy_l, noisy_r = clean_l + noise_l, clean_r + noise_r

        params = oracle_filter_params(clean_l, clean_r, noise_l, noise_r, order)
        est_l, _ = enhance_utterance(noisy_l, noisy_r, params, order)

        # analytic filter: gamma from the construction, Phi_n = sigma^2 I
        lags = np.exp(-1j * omega * np.arange(3))
        gamma = np.concatenate([lags, amp_r * lags])
        w = gamma / (gamma.conj() @ gamma)
        y = stack_multiframe_grid(noisy_l, noisy_r, order)
        analytic = np.einsum("i,fti->ft", w.conj(), y)

        burn = 300
        rel = (np.mean(np.abs(est_l[:, burn:] - analytic[:, burn:]))
               / np.mean(np.abs(analytic[:, burn:])))
        assert rel < 0.05


class TestSmoothingConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            SmoothingConfig(alpha_speech=1.0)
        with pytest.raises(ValueError):
            SmoothingConfig(loading=-1e-9)
