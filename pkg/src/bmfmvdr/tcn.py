"""Input featurization and the causal temporal convolutional networks.

Two TCNs map the noisy-spectrogram feature sequence to per-bin filter
parameter coefficients: one emits 8N values per bin (speech STCVs), the
other (2N)^2 values per bin (inverse noise STCM Cholesky factor).  The
trunk is a 1x1 input projection followed by stacked residual blocks
(dilated causal conv, PReLU, cumulative layer norm, 1x1 residual and
skip paths) and a 1x1 output head over the summed skips.  Everything is
strictly causal: output frame t never sees features beyond frame t.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .mfmvdr import FilterParams, build_inverse_noise_stcm, build_speech_stcv

EPS_MAG = 1e-8   # magnitude floor inside the log feature
EPS_NORM = 1e-6  # variance floor in the cumulative layer norm


@dataclass(frozen=True)
class TcnConfig:
    stacks: int = 2
    layers_per_stack: int = 6
    kernel_size: int = 3
    hidden_channels: int = 96
    bottleneck_channels: int = 48
    output_dim: int = 0

    @property
    def receptive_field(self):
        """Receptive field in frames: 1 + (K-1) * stacks * (2^layers - 1)."""
        return 1 + (self.kernel_size - 1) * self.stacks * (2 ** self.layers_per_stack - 1)

    def dilations(self):
        return [2 ** i for _ in range(self.stacks) for i in range(self.layers_per_stack)]


def featurize(spec_left, spec_right):
    """Per-frame feature vectors from a binaural spectrogram pair.

    For each ear and bin: [log10(max(|y|, eps)), cos(angle), sin(angle)],
    bins interleaved per ear, left-ear block first.  Accepts
    ComplexSpectrograms or raw complex arrays; returns (6F, T) float32.
    """
    left = np.asarray(getattr(spec_left, "data", spec_left))
    right = np.asarray(getattr(spec_right, "data", spec_right))
    if left.shape != right.shape:
        raise ValueError("left/right spectrogram shapes differ")

    def ear_block(data):
        mag = np.abs(data)
        ang = np.angle(data)
        feats = np.stack([np.log10(np.maximum(mag, EPS_MAG)), np.cos(ang), np.sin(ang)],
                         axis=1)  # (F, 3, T)
        return feats.reshape(-1, data.shape[1])

    return np.concatenate([ear_block(left), ear_block(right)], axis=0).astype(np.float32)


def init_tcn_params(config, feature_dim, rng, dtype=np.float32, zero_head=True):
    """Freshly initialized parameter dict (name -> DiffTensor).

    Convolution weights use uniform fan-in scaling; the output head is
    zero-initialized so an untrained network emits all-zero coefficients
    (identity covariance factor / guarded STCVs downstream).
    """
    if config.output_dim <= 0:
        raise ValueError("config.output_dim must be set")

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return ad.parameter(rng.uniform(-bound, bound, size=shape), dtype=dtype)

    b = config.bottleneck_channels
    h = config.hidden_channels
    k = config.kernel_size
    params = {
        "in.w": uniform((b, feature_dim, 1), feature_dim),
        "in.b": uniform((b,), feature_dim),
    }
    for i, _ in enumerate(config.dilations()):
        pre = f"block{i}"
        params[f"{pre}.conv.w"] = uniform((h, b, k), b * k)
        params[f"{pre}.conv.b"] = uniform((h,), b * k)
        params[f"{pre}.prelu"] = ad.parameter(np.full(h, 0.25), dtype=dtype)
        params[f"{pre}.norm.gain"] = ad.parameter(np.ones(h), dtype=dtype)
        params[f"{pre}.norm.bias"] = ad.parameter(np.zeros(h), dtype=dtype)
        params[f"{pre}.res.w"] = uniform((b, h, 1), h)
        params[f"{pre}.res.b"] = uniform((b,), h)
        params[f"{pre}.skip.w"] = uniform((b, h, 1), h)
        params[f"{pre}.skip.b"] = uniform((b,), h)
    params["out.prelu"] = ad.parameter(np.full(b, 0.25), dtype=dtype)
    if zero_head:
        params["out.w"] = ad.parameter(np.zeros((config.output_dim, b, 1)), dtype=dtype)
        params["out.b"] = ad.parameter(np.zeros(config.output_dim), dtype=dtype)
    else:
        params["out.w"] = uniform((config.output_dim, b, 1), b)
        params["out.b"] = uniform((config.output_dim,), b)
    return params


def parameter_count(config, feature_dim):
    """Exact trainable-weight count of one network."""
    b, h, k = config.bottleneck_channels, config.hidden_channels, config.kernel_size
    n_blocks = config.stacks * config.layers_per_stack
    count = feature_dim * b + b                       # input projection
    count += n_blocks * (b * h * k + h                # dilated conv
                         + h                          # prelu
                         + 2 * h                      # norm gain/bias
                         + 2 * (h * b + b))           # res + skip 1x1
    count += b                                        # output prelu
    count += b * config.output_dim + config.output_dim
    return count


def select_widths(target_params, feature_dim, output_dim, stacks=2,
                  layers_per_stack=6, kernel_size=3, tolerance=0.1):
    """Pick (hidden, bottleneck) widths hitting a parameter budget.

    Searches bottleneck widths with hidden = 2 * bottleneck preferred,
    falling back to a hidden-channel line search; returns the config
    whose count lies closest to ``target_params`` (within ``tolerance``
    fractionally, or raises).
    """
    best = None
    for b in range(4, 257, 2):
        base = TcnConfig(stacks, layers_per_stack, kernel_size, 1, b, output_dim)
        fixed = parameter_count(base, feature_dim)
        slope = parameter_count(
            TcnConfig(stacks, layers_per_stack, kernel_size, 2, b, output_dim),
            feature_dim) - fixed
        h_est = max(2, int(round((target_params - fixed) / slope)) + 1)
        for h in (h_est - 1, h_est, h_est + 1):
            if h < 2:
                continue
            cfg = TcnConfig(stacks, layers_per_stack, kernel_size, h, b, output_dim)
            err = abs(parameter_count(cfg, feature_dim) - target_params)
            if best is None or err < best[0]:
                best = (err, cfg)
    err, cfg = best
    if err > tolerance * target_params:
        raise ValueError(
            f"no width combination within {tolerance:.0%} of {target_params} weights")
    return cfg


def _frame_layer_norm(x, gain, bias):
    """Per-frame layer norm over channels with learned gain/bias.

    Frame-local statistics keep the temporal receptive field exactly the
    dilated-conv footprint (running statistics over past frames would
    leak every output into every later frame).
    """
    mu = ad.mean(x, axis=0, keepdims=True)
    var = ad.sub(ad.mean(ad.mul(x, x), axis=0, keepdims=True), ad.mul(mu, mu))
    xn = ad.div(ad.sub(x, mu), ad.sqrt(ad.add(var, EPS_NORM)))
    shape = (gain.value.shape[0], 1)
    return ad.add(ad.mul(xn, ad.reshape(gain, shape)), ad.reshape(bias, shape))


def tcn_forward(features, params, config):
    """Run the TCN; features (feat_dim, T) -> DiffTensor (output_dim, T)."""
    x = features if isinstance(features, ad.DiffTensor) else ad.constant(features)
    if x.value.shape[0] != params["in.w"].value.shape[1]:
        raise ValueError(
            f"feature dim {x.value.shape[0]} does not match network "
            f"({params['in.w'].value.shape[1]})")
    y = ad.causal_dilated_conv1d(x, params["in.w"], params["in.b"])
    skip_sum = None
    for i, dil in enumerate(config.dilations()):
        pre = f"block{i}"
        hcur = ad.causal_dilated_conv1d(y, params[f"{pre}.conv.w"],
                                        params[f"{pre}.conv.b"], dilation=dil)
        hcur = ad.prelu(hcur, params[f"{pre}.prelu"])
        hcur = _frame_layer_norm(hcur, params[f"{pre}.norm.gain"],
                                 params[f"{pre}.norm.bias"])
        res = ad.causal_dilated_conv1d(hcur, params[f"{pre}.res.w"], params[f"{pre}.res.b"])
        skip = ad.causal_dilated_conv1d(hcur, params[f"{pre}.skip.w"], params[f"{pre}.skip.b"])
        y = ad.add(y, res)
        skip_sum = skip if skip_sum is None else ad.add(skip_sum, skip)
    out = ad.prelu(skip_sum, params["out.prelu"])
    return ad.causal_dilated_conv1d(out, params["out.w"], params["out.b"])


def net_output_to_bins(out_value, num_bins, per_bin):
    """(per_bin * F, T) -> (F, T, per_bin); rows are bin-major blocks."""
    f_dim, t_dim = out_value.shape
    if f_dim != num_bins * per_bin:
        raise ValueError(f"output rows {f_dim} != {num_bins} bins x {per_bin}")
    return np.ascontiguousarray(
        out_value.reshape(num_bins, per_bin, t_dim).transpose(0, 2, 1))


def estimate_parameters(noisy_left, noisy_right, gamma_params, chol_params,
                        gamma_config, chol_config, order):
    """Full estimation path: featurize -> both TCNs -> parameter builders.

    Returns a FilterParams grid ready for enhance_utterance.
    """
    feats = featurize(noisy_left, noisy_right)
    num_bins = noisy_left.data.shape[0]
    gamma_out = tcn_forward(feats, gamma_params, gamma_config).value
    chol_out = tcn_forward(feats, chol_params, chol_config).value

    n = order.n_frames
    h_gamma = net_output_to_bins(gamma_out, num_bins, 8 * n).astype(np.float64)
    h_chol = net_output_to_bins(chol_out, num_bins, (2 * n) ** 2).astype(np.float64)
    stcv = build_speech_stcv(h_gamma, order)
    chol = build_inverse_noise_stcm(h_chol, order)
    return FilterParams(stcv.gamma_left, stcv.gamma_right, chol)
