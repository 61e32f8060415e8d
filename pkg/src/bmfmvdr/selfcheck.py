"""Built-in verification suites: gradient fidelity and core invariants.

These run the same checks the test suite relies on, packaged so a
deployed installation can validate itself (`bmfmvdr selfcheck`).  Each
check prints one PASS/FAIL line; the suite result is the conjunction.
"""

import numpy as np

from . import autodiff as ad
from . import graph
from .mfmvdr import (FilterOrder, apply_min_gain, build_inverse_noise_stcm,
                     build_speech_stcv, mfmvdr_weights)
from .stft import StftConfig, analyze, interior_slice, synthesize
from .tcn import TcnConfig, init_tcn_params


def build_gradcheck_fixture(seed=42, num_bins=4, num_frames=30, n_frames=2):
    """Deterministic, kink-free probe point for the end-to-end gradient check.

    Spectrogram magnitudes are bounded away from zero, the STCV head is
    biased so normalization denominators are O(1), PReLU slopes start at
    1, and the minimum-gain floor is inactive: the composed function is
    smooth within the finite-difference step at this point.
    """
    rng = np.random.default_rng(seed)
    f_dim, t_dim, n = num_bins, num_frames, n_frames

    def bounded_spec():
        mag = rng.uniform(0.5, 1.5, (f_dim, t_dim))
        phase = rng.uniform(-np.pi, np.pi, (f_dim, t_dim))
        return mag * np.exp(1j * phase)

    noisy_l, noisy_r = bounded_spec(), bounded_spec()
    clean_l = 0.7 * noisy_l * np.exp(0.2j)
    clean_r = 0.7 * noisy_r * np.exp(0.2j)

    gamma_config = TcnConfig(1, 3, 3, 8, 8, 8 * n * f_dim)
    chol_config = TcnConfig(1, 3, 3, 8, 8, (2 * n) ** 2 * f_dim)
    gamma_params = init_tcn_params(gamma_config, 6 * f_dim, rng,
                                   dtype=np.float64, zero_head=False)
    chol_params = init_tcn_params(chol_config, 6 * f_dim, rng,
                                  dtype=np.float64, zero_head=False)
    for params in (gamma_params, chol_params):
        for key, p in params.items():
            if key.endswith("prelu"):
                p.value[:] = 1.0
        params["out.w"].value *= 0.02
        params["out.b"].value *= 0.02
    for f in range(f_dim):
        gamma_params["out.b"].value[f * 8 * n + 0] += 1.0
        gamma_params["out.b"].value[f * 8 * n + 3 * n] += 1.0

    order = FilterOrder(n)

    def fn():
        est_l, est_r = graph.deep_forward(noisy_l, noisy_r,
                                          gamma_params, gamma_config,
                                          chol_params, chol_config,
                                          order, dtype=np.float64)
        return graph.utterance_loss(est_l, est_r, clean_l, clean_r)

    params = {f"gamma.{k}": v for k, v in gamma_params.items()}
    params.update({f"chol.{k}": v for k, v in chol_params.items()})
    return fn, params, rng


def gradcheck_suite(n_samples=200, step=1e-3, rel_tol=1e-4, emit=print):
    """End-to-end finite-difference check through the full pipeline."""
    fn, params, rng = build_gradcheck_fixture()
    try:
        worst = ad.finite_difference_check(fn, params, rng, n_samples=n_samples,
                                           step=step, rel_tol=rel_tol)
        emit(f"PASS gradcheck: worst normalized error {worst:.3g} "
             f"over {n_samples} parameters")
        return True
    except AssertionError as e:
        emit(f"FAIL gradcheck: {e}")
        return False


def invariants_suite(emit=print):
    """Seeded spot checks of the core numerical contracts."""
    rng = np.random.default_rng(2024)
    ok = True

    def check(name, passed, detail=""):
        nonlocal ok
        emit(f"{'PASS' if passed else 'FAIL'} {name}{': ' + detail if detail else ''}")
        ok = ok and passed

    # STFT perfect reconstruction
    cfg = StftConfig()
    worst = 0.0
    for _ in range(20):
        x = rng.uniform(-1.0, 1.0, 4000)
        y = synthesize(analyze(x, cfg))
        sl = interior_slice(cfg)
        worst = max(worst, float(np.max(np.abs(y[sl] - x[: len(y)][sl]))))
    check("stft reconstruction", worst < 1e-6, f"max interior error {worst:.2e}")

    # distortionless constraint and scale invariance
    order = FilterOrder(5)
    worst_c = 0.0
    worst_s = 0.0
    for _ in range(200):
        chol = build_inverse_noise_stcm(rng.standard_normal(order.dim ** 2), order)
        stcv = build_speech_stcv(rng.standard_normal(8 * order.n_frames), order)
        for side, gamma in (("left", stcv.gamma_left), ("right", stcv.gamma_right)):
            w = mfmvdr_weights(chol, stcv, side)
            worst_c = max(worst_c, abs(np.vdot(w, gamma) - 1.0))
            w2 = mfmvdr_weights(2.0 * chol, stcv, side)
            worst_s = max(worst_s, float(np.max(np.abs(w - w2))))
    check("distortionless constraint", worst_c <= 1e-6, f"max |w^H gamma - 1| {worst_c:.2e}")
    check("scale invariance", worst_s <= 1e-10, f"max |w - w(2L)| {worst_s:.2e}")

    # Cholesky reconstruction is Hermitian positive definite
    worst_h = 0.0
    worst_e = np.inf
    for _ in range(200):
        chol = build_inverse_noise_stcm(rng.standard_normal(order.dim ** 2), order)
        phi_inv = chol @ chol.conj().T
        worst_h = max(worst_h, float(np.max(np.abs(phi_inv - phi_inv.conj().T))))
        worst_e = min(worst_e, float(np.min(np.linalg.eigvalsh(phi_inv))))
    check("inverse stcm hermitian", worst_h <= 1e-12, f"max asymmetry {worst_h:.2e}")
    check("inverse stcm positive", worst_e > 0.0, f"min eigenvalue {worst_e:.2e}")

    # STCV normalization pins the reference taps
    h = rng.standard_normal((64, 8 * order.n_frames))
    stcv = build_speech_stcv(h, order)
    check("stcv normalization",
          np.all(stcv.gamma_left[..., 0] == 1.0)
          and np.all(stcv.gamma_right[..., order.n_frames] == 1.0))

    # minimum gain floors the magnitude and keeps the phase
    x = rng.standard_normal(500) * 0.01 + 1j * rng.standard_normal(500) * 0.01
    y = rng.standard_normal(500) + 1j * rng.standard_normal(500)
    floored = apply_min_gain(x, y)
    floor = 0.1 * np.abs(y)
    check("minimum gain floor",
          bool(np.all(np.abs(floored) >= floor - 1e-12)
               and np.allclose(np.angle(floored[np.abs(x) > 0]),
                               np.angle(x[np.abs(x) > 0]))))
    return ok


def run(suite="all", emit=print):
    results = []
    if suite in ("gradcheck", "all"):
        results.append(gradcheck_suite(emit=emit))
    if suite in ("invariants", "all"):
        results.append(invariants_suite(emit=emit))
    if not results:
        raise ValueError(f"unknown selfcheck suite {suite!r}")
    return all(results)
