"""Differentiable end-to-end pipeline for training the estimators.

Mirrors the numpy filtering path (parameter builders, MVDR weights,
minimum gain, spectral loss) as recorded autodiff ops on packed complex
tensors, so gradients flow from the loss through the filter into the
TCN weights.  Non-differentiable moduli use the smooth form
sqrt(.^2 + eps); branch decisions (normalization guard, gain floor) are
taken on forward values and gradients follow the selected branch.
"""

import numpy as np

from . import autodiff as ad
from .mfmvdr import (EPS_DEN, EPS_DIV, MIN_GAIN_DB, apply_min_gain,
                     stack_multiframe_grid)
from .tcn import featurize, tcn_forward

EPS_ABS = 1e-9   # smoothing inside |.| on differentiable paths
MSAE_BETA = 0.4


def pack_complex(z, dtype=np.float32):
    """Complex ndarray -> packed real array with trailing [re, im] axis."""
    z = np.asarray(z)
    return np.stack([z.real, z.imag], axis=-1).astype(dtype)


def unpack_complex(v):
    v = np.asarray(v)
    return v[..., 0] + 1j * v[..., 1]


def net_grid(out, num_bins, per_bin):
    """Recorded version of net_output_to_bins: (per_bin*F, T) -> (F, T, per_bin)."""
    t_dim = out.value.shape[1]
    grid = ad.reshape(out, (num_bins, per_bin, t_dim))
    return ad.transpose(grid, (0, 2, 1))


def _guarded_ref(gamma, ref):
    """Guarded complex denominator at the reference tap (see mfmvdr).

    Away from zero this matches the phase-preserving inference guard
    d * (1 + eps/|d|); in the |d| <= eps sliver it degrades to d + eps,
    which has the same forward value up to eps but keeps the gradient
    alive (a constant fallback would freeze the reference taps of a
    zero-initialized head permanently).
    """
    d = ad.slice_axes(gamma, (slice(None), slice(None), slice(ref, ref + 1), slice(None)))
    mag_exact = np.sqrt(d.value[..., 0] ** 2 + d.value[..., 1] ** 2)[..., None]
    mask = mag_exact > EPS_DIV
    smooth = ad.cabs_smooth(d, 1e-18, keepdims=True)
    scaled = ad.mul(d, ad.add(1.0, ad.div(EPS_DIV, smooth)))
    eps_c = np.zeros((1, 1, 1, 2), dtype=d.value.dtype)
    eps_c[..., 0] = EPS_DIV
    fallback = ad.add(d, ad.constant(eps_c))
    return ad.select(mask, scaled, fallback)


def build_speech_stcv_graph(h, n):
    """(F, T, 8N) raw coefficients -> packed (gamma_left, gamma_right).

    Same normalization as build_speech_stcv, except the guard branch
    switches at |den| <= eps (not exactly 0) so the zero-output regime
    of a fresh network stays finite and differentiable.  The reference
    taps are constants fixed at 1 + 0j.
    """
    re = ad.slice_axes(h, (slice(None), slice(None), slice(0, 4 * n)))
    im = ad.slice_axes(h, (slice(None), slice(None), slice(4 * n, 8 * n)))

    def half(lo, hi, ref):
        raw = ad.cpack(ad.slice_axes(re, (slice(None), slice(None), slice(lo, hi))),
                       ad.slice_axes(im, (slice(None), slice(None), slice(lo, hi))))
        gamma = ad.cdiv(raw, _guarded_ref(raw, ref))
        lead = gamma.value.shape[:2]
        one = np.zeros(lead + (1, 2), dtype=gamma.value.dtype)
        one[..., 0] = 1.0
        pieces = []
        if ref > 0:
            pieces.append(ad.slice_axes(gamma, (slice(None), slice(None), slice(0, ref),
                                                slice(None))))
        pieces.append(ad.constant(one))
        if ref + 1 < 2 * n:
            pieces.append(ad.slice_axes(gamma, (slice(None), slice(None),
                                                slice(ref + 1, 2 * n), slice(None))))
        return ad.concat(pieces, axis=2)

    return half(0, 2 * n, 0), half(2 * n, 4 * n, n)


def mfmvdr_weights_graph(chol, gamma):
    """Packed MVDR weights; chol (F,T,2N,2N,2), gamma (F,T,2N,2)."""
    shape = gamma.value.shape
    col = ad.reshape(gamma, shape[:3] + (1, 2))
    u = ad.cmatmul(chol, col, adjoint_a=True)
    den = ad.add(ad.sum(ad.mul(u, u), axis=(-3, -1), keepdims=True), EPS_DEN)
    w = ad.div(ad.cmatmul(chol, u), den)
    return ad.reshape(w, shape)


def filter_apply_graph(w, y_col):
    """x_hat = w^H y; w packed (F,T,2N,2), y_col constant (F,T,2N,1,2)."""
    shape = w.value.shape
    wcol = ad.reshape(w, shape[:3] + (1, 2))
    out = ad.cmatmul(wcol, y_col, adjoint_a=True)
    return ad.reshape(out, shape[:2] + (2,))


def min_gain_graph(x_hat, y_ref, g_min_db=MIN_GAIN_DB):
    """Minimum-gain floor on a straight-through basis.

    The forward value is exactly the inference-path floor
    (apply_min_gain on the complex values); the backward pass treats the
    floor as the identity, so magnitude gradients keep flowing for
    floored bins instead of dying in the clamp.
    """
    floored = apply_min_gain(unpack_complex(x_hat.value), np.asarray(y_ref),
                             g_min_db)
    return ad.straight_through(x_hat, pack_complex(floored, x_hat.value.dtype))


def msae_graph(clean, est, beta=MSAE_BETA):
    """Per-bin spectral absolute error grid (F, T); clean is a constant."""
    clean = np.asarray(clean)
    cleanp = ad.constant(pack_complex(clean, dtype=est.value.dtype))
    term_complex = ad.cabs_smooth(ad.sub(cleanp, est), EPS_ABS)
    est_abs = ad.cabs_smooth(est, EPS_ABS)
    clean_abs = ad.constant(np.abs(clean).astype(est.value.dtype))
    term_mag = ad.abs_smooth(ad.sub(clean_abs, est_abs), EPS_ABS)
    return ad.add(ad.mul(beta, term_complex), ad.mul(1.0 - beta, term_mag))


def _stacked_col_const(noisy_left, noisy_right, order, dtype):
    y = stack_multiframe_grid(noisy_left, noisy_right, order)
    return ad.constant(pack_complex(y, dtype)[..., None, :])


def deep_forward(noisy_left, noisy_right, gamma_params, gamma_config,
                 chol_params, chol_config, order, dtype=np.float32):
    """Noisy spectrograms -> packed enhanced estimates for both ears."""
    feats = featurize_arrays(noisy_left, noisy_right, dtype)
    num_bins = noisy_left.shape[0]
    n = order.n_frames
    h_gamma = net_grid(tcn_forward(feats, gamma_params, gamma_config), num_bins, 8 * n)
    h_chol = net_grid(tcn_forward(feats, chol_params, chol_config), num_bins,
                      (2 * n) ** 2)
    gamma_l, gamma_r = build_speech_stcv_graph(h_gamma, n)
    chol = ad.embed_chol(h_chol, 2 * n)
    y_col = _stacked_col_const(noisy_left, noisy_right, order, dtype)

    est = []
    for gamma, ref in ((gamma_l, noisy_left), (gamma_r, noisy_right)):
        w = mfmvdr_weights_graph(chol, gamma)
        x_hat = filter_apply_graph(w, y_col)
        est.append(min_gain_graph(x_hat, ref))
    return est[0], est[1]


def direct_forward(noisy_left, noisy_right, params, config, order,
                   dtype=np.float32):
    """Direct-filter baseline: net -> tanh taps -> filter -> min gain."""
    feats = featurize_arrays(noisy_left, noisy_right, dtype)
    num_bins = noisy_left.shape[0]
    k = order.n_frames
    h = net_grid(tcn_forward(feats, params, config), num_bins, 8 * k)
    y_col = _stacked_col_const(noisy_left, noisy_right, order, dtype)

    est = []
    for ear, ref in ((0, noisy_left), (1, noisy_right)):
        lo = ear * 4 * k
        w = ad.cpack(
            ad.tanh(ad.slice_axes(h, (slice(None), slice(None), slice(lo, lo + 2 * k)))),
            ad.tanh(ad.slice_axes(h, (slice(None), slice(None),
                                      slice(lo + 2 * k, lo + 4 * k)))))
        x_hat = filter_apply_graph(w, y_col)
        est.append(min_gain_graph(x_hat, ref))
    return est[0], est[1]


def featurize_arrays(noisy_left, noisy_right, dtype=np.float32):
    """Constant feature tensor from raw complex arrays."""
    return ad.constant(featurize(noisy_left, noisy_right).astype(dtype))


def utterance_loss(est_left, est_right, clean_left, clean_right, beta=MSAE_BETA):
    """Scalar MSAE: mean over ears, bins, frames of one utterance."""
    per_l = ad.mean(msae_graph(clean_left, est_left, beta))
    per_r = ad.mean(msae_graph(clean_right, est_right, beta))
    return ad.mul(0.5, ad.add(per_l, per_r))
