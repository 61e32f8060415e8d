"""Oracle filter-parameter estimators and the direct-filter output map.

The oracles recursively smooth ground-truth clean/noise spectrograms
into speech correlation vectors and an inverse noise covariance factor,
giving an upper performance anchor that needs no training.  The direct
map turns raw network outputs into tanh-bounded complex filter taps for
the single-frame and multi-frame direct baselines.
"""

from dataclasses import dataclass

import numpy as np

from .mfmvdr import (FilterParams, SpeechStcv, normalize_stcv,
                     stack_multiframe_grid)

EPS_POWER = 1e-12


@dataclass(frozen=True)
class SmoothingConfig:
    alpha_speech: float = 0.68
    alpha_noise: float = 0.92
    loading: float = 1e-6

    def __post_init__(self):
        if not (0.0 < self.alpha_speech < 1.0 and 0.0 < self.alpha_noise < 1.0):
            raise ValueError("smoothing constants must lie in (0, 1)")
        if self.loading < 0:
            raise ValueError("loading must be >= 0")


def oracle_speech_stcv_track(clean_left, clean_right, order, cfg=SmoothingConfig()):
    """Recursively smoothed speech STCVs for every (bin, frame).

    r_m(t) = a r_m(t-1) + (1-a) x_t x_m(t)*, p_m(t) likewise for
    |x_m(t)|^2; gamma_m = r_m / max(p_m, eps), then normalized.
    Returns (gamma_left, gamma_right), each (F, T, 2N) complex.
    """
    x = stack_multiframe_grid(np.asarray(getattr(clean_left, "data", clean_left)),
                              np.asarray(getattr(clean_right, "data", clean_right)),
                              order)
    num_bins, num_frames, dim = x.shape
    n = order.n_frames
    a = cfg.alpha_speech

    gamma_l = np.empty((num_bins, num_frames, dim), dtype=complex)
    gamma_r = np.empty_like(gamma_l)
    r_l = np.zeros((num_bins, dim), dtype=complex)
    r_r = np.zeros_like(r_l)
    p_l = np.zeros(num_bins)
    p_r = np.zeros(num_bins)
    for t in range(num_frames):
        xt = x[:, t, :]
        r_l = a * r_l + (1 - a) * xt * xt[:, 0:1].conj()
        r_r = a * r_r + (1 - a) * xt * xt[:, n:n + 1].conj()
        p_l = a * p_l + (1 - a) * np.abs(xt[:, 0]) ** 2
        p_r = a * p_r + (1 - a) * np.abs(xt[:, n]) ** 2
        gamma_l[:, t] = r_l / np.maximum(p_l, EPS_POWER)[:, None]
        gamma_r[:, t] = r_r / np.maximum(p_r, EPS_POWER)[:, None]

    stcv = normalize_stcv(gamma_l, gamma_r, n)
    return stcv.gamma_left, stcv.gamma_right


def oracle_speech_stcv(clean_left, clean_right, f, t, order, cfg=SmoothingConfig()):
    """Speech STCV at one (bin, frame); runs the recursion up to t."""
    gl, gr = oracle_speech_stcv_track(clean_left, clean_right, order, cfg)
    return SpeechStcv(gl[f, t], gr[f, t])


def oracle_noise_stcm_track(noise_left, noise_right, order, cfg=SmoothingConfig()):
    """Cholesky factors of the smoothed inverse noise STCM, all (f, t).

    Phi(t) = a Phi(t-1) + (1-a) n_t n_t^H, initialized to the identity
    scaled by the mean input bin power; diagonal loading (relative to
    the trace) keeps the inversion well posed.  Returns (F, T, 2N, 2N)
    complex lower factors L with L L^H = Phi(t)^{-1}.
    """
    left = np.asarray(getattr(noise_left, "data", noise_left))
    right = np.asarray(getattr(noise_right, "data", noise_right))
    nvec = stack_multiframe_grid(left, right, order)
    num_bins, num_frames, dim = nvec.shape
    a = cfg.alpha_noise

    init_power = max(float(np.mean(np.abs(left) ** 2 + np.abs(right) ** 2) / 2.0),
                     EPS_POWER)
    phi = np.empty((num_bins, num_frames, dim, dim), dtype=complex)
    state = np.broadcast_to(init_power * np.eye(dim), (num_bins, dim, dim)).copy()
    for t in range(num_frames):
        nt = nvec[:, t, :]
        state = a * state + (1 - a) * nt[:, :, None] * nt[:, None, :].conj()
        phi[:, t] = state

    trace = np.einsum("...ii->...", phi).real
    phi = phi + (cfg.loading * trace / dim)[..., None, None] * np.eye(dim)
    inv = np.linalg.inv(phi)
    inv = 0.5 * (inv + inv.conj().swapaxes(-1, -2))
    return np.linalg.cholesky(inv)


def oracle_noise_stcm(noise_left, noise_right, f, t, order, cfg=SmoothingConfig()):
    """Inverse-STCM Cholesky factor at one (bin, frame)."""
    return oracle_noise_stcm_track(noise_left, noise_right, order, cfg)[f, t]


def oracle_filter_params(clean_left, clean_right, noise_left, noise_right,
                         order, cfg=SmoothingConfig()):
    """Full oracle parameter grid for enhance_utterance."""
    gl, gr = oracle_speech_stcv_track(clean_left, clean_right, order, cfg)
    chol = oracle_noise_stcm_track(noise_left, noise_right, order, cfg)
    return FilterParams(gl, gr, chol)


def direct_filter_from_net(h_real):
    """tanh-bounded complex filter taps from 4K raw real coefficients.

    The first 2K entries map to real parts, the last 2K to imaginary
    parts, each squashed to [-1, 1]; returns (..., 2K) complex taps for
    one ear.  Broadcasts over leading axes.
    """
    h_real = np.asarray(h_real, dtype=float)
    if h_real.shape[-1] % 4:
        raise ValueError("coefficient vector length must be a multiple of 4")
    half = h_real.shape[-1] // 2
    return np.tanh(h_real[..., :half]) + 1j * np.tanh(h_real[..., half:])
