"""Binaural multi-frame MVDR filtering.

Per frequency bin, the N most recent STFT frames of both ears are
stacked into a 2N vector y.  Given a speech spatio-temporal correlation
vector gamma (unit entry at the reference tap) and a lower-triangular
factor L with L L^H = inverse noise covariance, the filter

    w = (L L^H gamma) / (gamma^H L L^H gamma + eps)

passes the correlated speech component with unit gain and minimizes
residual noise power.  All operations broadcast over leading axes, so
a whole (bins, frames) grid is filtered in one call.
"""

from dataclasses import dataclass

import numpy as np

from .stft import ComplexSpectrogram

EPS_DIV = 1e-8    # guard added to the STCV normalization denominator
EPS_DEN = 1e-10   # real regularizer in the MVDR denominator
MIN_GAIN_DB = -20.0


@dataclass(frozen=True)
class FilterOrder:
    n_frames: int = 5

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")

    @property
    def dim(self):
        return 2 * self.n_frames


@dataclass
class SpeechStcv:
    """Normalized speech correlation vectors; gamma_left[0] == gamma_right[N] == 1."""

    gamma_left: np.ndarray
    gamma_right: np.ndarray


@dataclass
class FilterParams:
    """Per-(bin, frame) filter parameters for a whole utterance.

    gamma_left/gamma_right: (F, T, 2N) complex; chol: (F, T, 2N, 2N)
    complex lower-triangular with positive real diagonal.
    """

    gamma_left: np.ndarray
    gamma_right: np.ndarray
    chol: np.ndarray


def lower_triangle_indices(m):
    """Row-major strict lower triangle (row, col) index arrays."""
    rows, cols = np.tril_indices(m, k=-1)
    return rows, cols


def stack_multiframe(spec_left, spec_right, f, t, order):
    """Stacked observation [y_L(t)..y_L(t-N+1), y_R(t)..y_R(t-N+1)] at bin f.

    Frames before the start of the utterance are zero.
    """
    n = order.n_frames
    if not (0 <= f < spec_left.data.shape[0]):
        raise IndexError(f"bin index {f} out of range")
    if not (0 <= t < spec_left.data.shape[1]):
        raise IndexError(f"frame index {t} out of range")
    out = np.zeros(2 * n, dtype=complex)
    for k in range(n):
        if t - k >= 0:
            out[k] = spec_left.data[f, t - k]
            out[n + k] = spec_right.data[f, t - k]
    return out


def stack_multiframe_grid(left, right, order):
    """Multi-frame stacks for every (f, t): returns (F, T, 2N) complex."""
    n = order.n_frames
    num_bins, num_frames = left.shape
    out = np.zeros((num_bins, num_frames, 2 * n), dtype=complex)
    for k in range(n):
        if k == 0:
            out[:, :, 0] = left
            out[:, :, n] = right
        else:
            out[:, k:, k] = left[:, :-k]
            out[:, k:, n + k] = right[:, :-k]
    return out


def _guarded(den):
    """den + eps * den/|den| when den != 0, else eps (phase-preserving guard)."""
    den = np.asarray(den, dtype=complex)
    mag = np.abs(den)
    out = np.where(mag > 0, den * (1.0 + EPS_DIV / np.maximum(mag, 1e-300)), EPS_DIV)
    return out


def normalize_stcv(raw_left, raw_right, n):
    """Guarded normalization by the reference taps, which are then forced to 1."""
    gamma_left = raw_left / _guarded(raw_left[..., 0:1])
    gamma_right = raw_right / _guarded(raw_right[..., n:n + 1])
    gamma_left[..., 0] = 1.0
    gamma_right[..., n] = 1.0
    return SpeechStcv(gamma_left, gamma_right)


def build_speech_stcv(h_real, order=None):
    """Map 8N raw real coefficients to normalized binaural speech STCVs.

    The first 4N entries are real parts, the last 4N imaginary parts;
    the left/right halves of the complex vector are normalized by their
    reference entries (index 0 and index N) with an epsilon guard, then
    the reference entries are forced exactly to one.  Broadcasts over
    leading axes.
    """
    h_real = np.asarray(h_real, dtype=float)
    if h_real.shape[-1] % 8:
        raise ValueError("coefficient vector length must be a multiple of 8")
    n = h_real.shape[-1] // 8
    if order is not None and order.n_frames != n:
        raise ValueError(f"expected 8N={8 * order.n_frames} coefficients, got {h_real.shape[-1]}")
    h_complex = h_real[..., : 4 * n] + 1j * h_real[..., 4 * n:]
    return normalize_stcv(h_complex[..., : 2 * n], h_complex[..., 2 * n:], n)


def build_inverse_noise_stcm(h_real, order=None):
    """Map (2N)^2 raw real coefficients to a Cholesky factor of the inverse STCM.

    First 2N entries -> positive diagonal via exp(clamp(., -30, 30));
    the rest fill the strict lower triangle row-major as (re, im)
    pairs.  Broadcasts over leading axes; returns (..., 2N, 2N) complex.
    """
    h_real = np.asarray(h_real, dtype=float)
    m = int(round(np.sqrt(h_real.shape[-1])))
    if m * m != h_real.shape[-1]:
        raise ValueError("coefficient vector length must be a perfect square")
    if order is not None and order.dim != m:
        raise ValueError(f"expected {order.dim ** 2} coefficients, got {h_real.shape[-1]}")
    diag = np.exp(np.clip(h_real[..., :m], -30.0, 30.0))
    pairs = h_real[..., m:].reshape(h_real.shape[:-1] + (m * (m - 1) // 2, 2))
    rows, cols = lower_triangle_indices(m)
    chol = np.zeros(h_real.shape[:-1] + (m, m), dtype=complex)
    chol[..., np.arange(m), np.arange(m)] = diag
    chol[..., rows, cols] = pairs[..., 0] + 1j * pairs[..., 1]
    return chol


def mfmvdr_weights(chol, stcv, side):
    """Closed-form binaural MFMVDR filter for one ear ('left' or 'right').

    Evaluated through the factor: u = L^H gamma, w = L u / (|u|^2 + eps),
    which is algebraically identical to Phi_n^{-1} gamma / (gamma^H
    Phi_n^{-1} gamma) and numerically better conditioned.
    """
    if side == "left":
        gamma = stcv.gamma_left
    elif side == "right":
        gamma = stcv.gamma_right
    else:
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    gamma = np.asarray(gamma)
    u = np.einsum("...ji,...j->...i", chol.conj(), gamma)
    den = np.einsum("...i,...i->...", u.conj(), u).real + EPS_DEN
    num = np.einsum("...ij,...j->...i", chol, u)
    return num / den[..., None]


def apply_filter(w, y):
    """Conjugate inner product w^H y (broadcasts over leading axes)."""
    w = np.asarray(w)
    y = np.asarray(y)
    if w.shape[-1] != y.shape[-1]:
        raise ValueError(f"filter length {w.shape[-1]} != observation length {y.shape[-1]}")
    return np.einsum("...i,...i->...", w.conj(), y)


def apply_min_gain(x_hat, y_ref, g_min_db=MIN_GAIN_DB):
    """Floor |x_hat| at g_min * |y_ref|, keeping the estimated phase.

    A zero estimate inherits the reference phase.  Broadcasts.
    """
    x_hat = np.asarray(x_hat, dtype=complex)
    y_ref = np.asarray(y_ref, dtype=complex)
    g_min = 10.0 ** (g_min_db / 20.0)
    floor = g_min * np.abs(y_ref)
    mag = np.abs(x_hat)
    phase = np.where(mag > 0, x_hat / np.where(mag > 0, mag, 1.0),
                     np.exp(1j * np.angle(y_ref)))
    return np.where(mag >= floor, x_hat, floor * phase)


def enhance_utterance(noisy_left, noisy_right, params, order=None,
                      g_min_db=MIN_GAIN_DB):
    """Filter a whole spectrogram pair with per-(bin, frame) parameters.

    Accepts ComplexSpectrograms (returned enhanced) or raw complex
    arrays (returned as arrays).
    """
    data_l = np.asarray(getattr(noisy_left, "data", noisy_left))
    data_r = np.asarray(getattr(noisy_right, "data", noisy_right))
    if data_l.shape != data_r.shape:
        raise ValueError("left/right spectrogram shapes differ")
    num_bins, num_frames = data_l.shape
    if params.gamma_left.shape[:2] != (num_bins, num_frames):
        raise ValueError(
            f"parameter grid {params.gamma_left.shape[:2]} does not match "
            f"spectrogram {(num_bins, num_frames)}")
    if order is None:
        order = FilterOrder(params.gamma_left.shape[-1] // 2)

    y = stack_multiframe_grid(data_l, data_r, order)
    stcv = SpeechStcv(params.gamma_left, params.gamma_right)
    out = []
    for side, ref, spec in (("left", data_l, noisy_left),
                            ("right", data_r, noisy_right)):
        w = mfmvdr_weights(params.chol, stcv, side)
        x_hat = apply_filter(w, y)
        x_hat = apply_min_gain(x_hat, ref, g_min_db)
        config = getattr(spec, "config", None)
        out.append(ComplexSpectrogram(x_hat, config) if config is not None else x_hat)
    return out[0], out[1]
