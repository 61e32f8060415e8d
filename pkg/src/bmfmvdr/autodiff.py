"""Reverse-mode automatic differentiation over dense real arrays.

Complex quantities are carried as real arrays with a trailing axis of
length 2 (index 0 = real part, index 1 = imaginary part); the ``c*``
ops below operate on that packed layout.  A :class:`Tape` records every
op applied to tracked tensors in creation order and :func:`backward`
replays it in exact reverse, accumulating gradients into parameter
leaves.

Storage defaults to float32; reductions accumulate in float64.  Every
op validates that its forward output is finite and raises
:class:`NonFiniteError` otherwise.
"""

import struct
from contextlib import contextmanager

import numpy as np


class GraphError(RuntimeError):
    """Misuse of the tape (non-scalar loss, double backward, ...)."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf in the forward pass."""


class DiffTensor:
    """Dense real array participating in the autodiff graph.

    ``node_id`` is the tape slot that produced the tensor, or None for
    constants and parameters.  ``grad`` is lazily allocated on
    parameters by :func:`backward`.
    """

    __slots__ = ("value", "grad", "node_id", "requires_grad")

    def __init__(self, value, dtype=None, requires_grad=False):
        self.value = np.asarray(value, dtype=dtype)
        if self.value.dtype not in (np.float32, np.float64):
            self.value = self.value.astype(np.float32)
        self.grad = None
        self.node_id = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        kind = "param" if self.requires_grad else ("node" if self.node_id is not None else "const")
        return f"DiffTensor({kind}, shape={self.value.shape}, dtype={self.value.dtype})"


def parameter(value, dtype=np.float32):
    return DiffTensor(value, dtype=dtype, requires_grad=True)


def constant(value, dtype=None):
    return DiffTensor(value, dtype=dtype)


class Tape:
    """Ordered op record; recording order is the topological order."""

    def __init__(self):
        self._records = []
        self._consumed = False

    def __len__(self):
        return len(self._records)

    def _add(self, parents, backward_fn):
        node_id = len(self._records)
        self._records.append((parents, backward_fn))
        return node_id


_TAPE_STACK = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextmanager
def record(tape):
    """Route ops onto ``tape`` for the duration of the block."""
    _TAPE_STACK.append(tape)
    try:
        yield tape
    finally:
        _TAPE_STACK.pop()


def _as_tensor(x):
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(np.asarray(x, dtype=np.float64 if isinstance(x, float) else None))


def _as_pair(a, b):
    """Wrap operands; bare Python scalars adopt the tensor operand's dtype."""
    a_scalar = not isinstance(a, (DiffTensor, np.ndarray))
    b_scalar = not isinstance(b, (DiffTensor, np.ndarray))
    a, b = _as_tensor(a), _as_tensor(b)
    if a_scalar and not b_scalar and a.value.dtype != b.value.dtype:
        a = DiffTensor(a.value.astype(b.value.dtype))
    elif b_scalar and not a_scalar and b.value.dtype != a.value.dtype:
        b = DiffTensor(b.value.astype(a.value.dtype))
    return a, b


def _tracked(t):
    return t.requires_grad or t.node_id is not None


def _check_finite(value, opname):
    # one-pass reduction; NaN/Inf both poison the float64 sum
    if not np.isfinite(np.sum(value, dtype=np.float64)):
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite forward value in op '{opname}'")


def _make(opname, out_value, parents, backward_fn):
    _check_finite(out_value, opname)
    out = DiffTensor(out_value)
    tape = _active_tape()
    if tape is not None and any(_tracked(p) for p in parents):
        if tape._consumed:
            raise GraphError("tape already consumed by backward(); record a fresh tape")
        out.node_id = tape._add(parents, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(tape, loss):
    """Accumulate d(loss)/d(p) into ``p.grad`` for every parameter leaf.

    The loss must be a scalar recorded on ``tape``; a tape can be
    walked once only.
    """
    if not isinstance(loss, DiffTensor) or loss.value.size != 1:
        raise GraphError("loss must be a scalar DiffTensor")
    if loss.node_id is None:
        raise GraphError("loss was not recorded on a tape")
    if tape._consumed:
        raise GraphError("backward() already ran on this tape")
    tape._consumed = True

    grads = {loss.node_id: np.ones_like(loss.value)}
    for node_id in range(len(tape._records) - 1, -1, -1):
        g = grads.pop(node_id, None)
        if g is None:
            continue
        parents, backward_fn = tape._records[node_id]
        parent_grads = backward_fn(g)
        for p, pg in zip(parents, parent_grads):
            if pg is None:
                continue
            if p.requires_grad:
                if p.grad is None:
                    p.grad = np.zeros_like(p.value)
                p.grad += pg
            elif p.node_id is not None:
                if p.node_id in grads:
                    grads[p.node_id] += pg
                else:
                    grads[p.node_id] = np.ascontiguousarray(pg)
    tape._records = []


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_pair(a, b)
    av, bv = a.value, b.value

    def bwd(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return _make("add", av + bv, (a, b), bwd)


def sub(a, b):
    a, b = _as_pair(a, b)
    av, bv = a.value, b.value

    def bwd(g):
        return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)

    return _make("sub", av - bv, (a, b), bwd)


def mul(a, b):
    a, b = _as_pair(a, b)
    av, bv = a.value, b.value

    def bwd(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _make("mul", av * bv, (a, b), bwd)


def div(a, b):
    a, b = _as_pair(a, b)
    av, bv = a.value, b.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv

    def bwd(g):
        ga = g / bv
        gb = -g * out / bv
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make("div", out, (a, b), bwd)


def neg(a):
    a = _as_tensor(a)

    def bwd(g):
        return (-g,)

    return _make("neg", -a.value, (a,), bwd)


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.value)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _make("tanh", out, (a,), bwd)


def exp(a, lo=-30.0, hi=30.0):
    """exp with a clamped argument; zero gradient outside the clamp."""
    a = _as_tensor(a)
    av = a.value
    out = np.exp(np.clip(av, lo, hi))
    inside = (av > lo) & (av < hi)

    def bwd(g):
        return (g * out * inside,)

    return _make("exp", out, (a,), bwd)


def log(a):
    a = _as_tensor(a)
    av = a.value

    def bwd(g):
        return (g / av,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _make("log", out, (a,), bwd)


def sqrt(a):
    a = _as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.value)

    def bwd(g):
        return (g / (2.0 * out),)

    return _make("sqrt", out, (a,), bwd)


def abs_smooth(a, eps=1e-9):
    """sqrt(a^2 + eps): smooth |a| with value sqrt(eps) and gradient 0 at 0."""
    a = _as_tensor(a)
    av = a.value
    out = np.sqrt(av * av + np.asarray(eps, dtype=av.dtype))

    def bwd(g):
        return (g * av / out,)

    return _make("abs_smooth", out, (a,), bwd)


def prelu(a, slopes, channel_axis=0):
    """PReLU with one learned slope per channel along ``channel_axis``."""
    a, slopes = _as_tensor(a), _as_tensor(slopes)
    av = a.value
    shape = [1] * av.ndim
    shape[channel_axis] = slopes.value.shape[0]
    sb = slopes.value.reshape(shape)
    pos = av > 0
    out = np.where(pos, av, sb * av)

    def bwd(g):
        ga = g * np.where(pos, np.asarray(1.0, dtype=av.dtype), sb)
        gs = g * np.where(pos, np.asarray(0.0, dtype=av.dtype), av)
        axes = tuple(i for i in range(av.ndim) if i != channel_axis)
        return ga, gs.sum(axis=axes, dtype=np.float64).astype(slopes.value.dtype)

    return _make("prelu", out, (a, slopes), bwd)


def straight_through(x, forward_value):
    """Replace the forward value; the backward pass is the identity.

    Used for non-differentiable post-processing (the minimum-gain floor)
    whose hard branch would otherwise zero out magnitude gradients.
    """
    x = _as_tensor(x)
    forward_value = np.asarray(forward_value, dtype=x.value.dtype)
    if forward_value.shape != x.value.shape:
        raise ValueError("straight_through requires matching shapes")

    def bwd(g):
        return (g,)

    return _make("straight_through", forward_value, (x,), bwd)


def select(mask, a, b):
    """Elementwise ``where(mask, a, b)``; the mask is a fixed bool array."""
    a, b = _as_tensor(a), _as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    av, bv = a.value, b.value
    out = np.where(mask, av, bv)

    def bwd(g):
        zero = np.asarray(0.0, dtype=g.dtype)
        return (
            _unbroadcast(np.where(mask, g, zero), av.shape),
            _unbroadcast(np.where(mask, zero, g), bv.shape),
        )

    return _make("select", out, (a, b), bwd)


# ---------------------------------------------------------------------------
# reductions / shape ops
# ---------------------------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    av = a.value
    out = av.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(av.dtype)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).astype(av.dtype, copy=False),)

    return _make("sum", out, (a,), bwd)


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    av = a.value
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    out = av.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(av.dtype)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, av.shape).astype(av.dtype, copy=False),)

    return _make("mean", out, (a,), bwd)


def cumsum(a, axis):
    a = _as_tensor(a)

    def bwd(g):
        rev = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        return (rev.astype(g.dtype, copy=False),)

    return _make("cumsum", np.cumsum(a.value, axis=axis), (a,), bwd)


def concat(parts, axis):
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return grads

    return _make("concat", out, tuple(parts), bwd)


def slice_axes(a, key):
    """Basic (non-overlapping) slicing; key is a tuple of slices/ints."""
    a = _as_tensor(a)
    av = a.value
    out = av[key]

    def bwd(g):
        full = np.zeros_like(av)
        full[key] = g
        return (full,)

    return _make("slice", np.ascontiguousarray(out), (a,), bwd)


def reshape(a, shape):
    a = _as_tensor(a)
    av = a.value

    def bwd(g):
        return (g.reshape(av.shape),)

    return _make("reshape", av.reshape(shape), (a,), bwd)


def transpose(a, axes):
    a = _as_tensor(a)
    inv = np.argsort(axes)

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make("transpose", np.ascontiguousarray(a.value.transpose(axes)), (a,), bwd)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value

    def bwd(g):
        ga = np.matmul(g, bv.swapaxes(-1, -2))
        gb = np.matmul(av.swapaxes(-1, -2), g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make("matmul", np.matmul(av, bv), (a, b), bwd)


# ---------------------------------------------------------------------------
# convolution and causal normalization
# ---------------------------------------------------------------------------

def causal_dilated_conv1d(x, w, b, dilation=1):
    """1-D causal dilated convolution.

    x: (C_in, T), w: (C_out, C_in, K), b: (C_out,).  Output frame t sees
    inputs at t, t-d, ..., t-(K-1)d only (left zero padding).
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    xv, wv, bv = x.value, w.value, b.value
    cin, t_len = xv.shape
    cout, cin_w, k = wv.shape
    if cin != cin_w:
        raise ValueError(f"conv1d channel mismatch: input {cin}, kernel {cin_w}")
    pad = (k - 1) * dilation
    xp = np.concatenate([np.zeros((cin, pad), dtype=xv.dtype), xv], axis=1)
    out = np.repeat(bv[:, None], t_len, axis=1)
    for i in range(k):
        out += wv[:, :, i] @ xp[:, i * dilation:i * dilation + t_len]

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wv)
        for i in range(k):
            seg = xp[:, i * dilation:i * dilation + t_len]
            gw[:, :, i] = g @ seg.T
            gxp[:, i * dilation:i * dilation + t_len] += wv[:, :, i].T @ g
        gb = g.sum(axis=1, dtype=np.float64).astype(bv.dtype)
        return gxp[:, pad:], gw, gb

    return _make("conv1d", out, (x, w, b), bwd)


def cumulative_mean(x):
    """Per-frame mean over channels and all past frames; x: (C, T)."""
    c = x.value.shape[0] if isinstance(x, DiffTensor) else np.asarray(x).shape[0]
    t = x.value.shape[1] if isinstance(x, DiffTensor) else np.asarray(x).shape[1]
    counts = (np.arange(1, t + 1) * c).astype(np.float64)
    total = cumsum(sum(x, axis=0, keepdims=True), axis=1)
    return div(total, counts[None, :].astype(np.float32))


def cumulative_variance(x, mu=None):
    """Cumulative population variance over channels and past frames."""
    if mu is None:
        mu = cumulative_mean(x)
    ex2 = cumulative_mean(mul(x, x))
    return sub(ex2, mul(mu, mu))


# ---------------------------------------------------------------------------
# packed-complex ops (trailing axis of length 2: [real, imag])
#
# Storage stays real, but kernels reinterpret the contiguous (..., 2)
# buffer as a native complex array (zero copy) so matmuls hit the fast
# complex BLAS loops instead of strided real views.
# ---------------------------------------------------------------------------

def _cview(packed):
    """(..., 2) float buffer -> complex view of shape (...)."""
    packed = np.ascontiguousarray(packed)
    ctype = np.complex64 if packed.dtype == np.float32 else np.complex128
    return packed.view(ctype)[..., 0]


def _cstore(z):
    """Complex array -> packed (..., 2) float view (zero copy)."""
    z = np.ascontiguousarray(z)
    ftype = np.float32 if z.dtype == np.complex64 else np.float64
    return z.view(ftype).reshape(z.shape + (2,))


def _unbroadcast_c(grad_c, shape_c):
    if grad_c.shape == shape_c:
        return grad_c
    extra = grad_c.ndim - len(shape_c)
    if extra > 0:
        grad_c = grad_c.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape_c) if n == 1 and grad_c.shape[i] != 1)
    if axes:
        grad_c = grad_c.sum(axis=axes, keepdims=True)
    return grad_c


def cpack(re, im):
    """Stack real/imag DiffTensors into the packed complex layout."""
    re = reshape(re, re.value.shape + (1,)) if isinstance(re, DiffTensor) else _as_tensor(re)
    im = reshape(im, im.value.shape + (1,)) if isinstance(im, DiffTensor) else _as_tensor(im)
    return concat([re, im], axis=-1)


def conj(z):
    z = _as_tensor(z)
    flip = np.array([1.0, -1.0], dtype=z.value.dtype)
    out = z.value * flip

    def bwd(g):
        return (g * flip,)

    return _make("conj", out, (z,), bwd)


def creal(z):
    return slice_axes(z, (Ellipsis, 0))


def cimag(z):
    return slice_axes(z, (Ellipsis, 1))


def cmul(a, b):
    """Elementwise complex product of packed tensors (broadcasts)."""
    a, b = _as_tensor(a), _as_tensor(b)
    ac, bc = _cview(a.value), _cview(b.value)

    def bwd(g):
        gc = _cview(g)
        ga = _unbroadcast_c(gc * bc.conj(), ac.shape)
        gb = _unbroadcast_c(gc * ac.conj(), bc.shape)
        return _cstore(ga), _cstore(gb)

    return _make("cmul", _cstore(ac * bc), (a, b), bwd)


def cdiv(a, b):
    """Elementwise complex division a / b (broadcasts)."""
    a, b = _as_tensor(a), _as_tensor(b)
    ac, bc = _cview(a.value), _cview(b.value)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ac / bc

    def bwd(g):
        gc = _cview(g)
        ga = _unbroadcast_c(gc / bc.conj(), ac.shape)
        gb = _unbroadcast_c(-gc * (out / bc).conj(), bc.shape)
        return _cstore(ga), _cstore(gb)

    return _make("cdiv", _cstore(out), (a, b), bwd)


def cabs_smooth(z, eps=1e-9, keepdims=False):
    """Smooth complex modulus sqrt(re^2 + im^2 + eps)."""
    z = _as_tensor(z)
    zv = z.value
    out = np.sqrt(zv[..., 0] ** 2 + zv[..., 1] ** 2 + np.asarray(eps, dtype=zv.dtype))
    if keepdims:
        out = out[..., None]

    def bwd(g):
        if keepdims:
            return (g * zv / out,)
        return (g[..., None] * zv / out[..., None],)

    return _make("cabs_smooth", out, (z,), bwd)


def _adj(x):
    return x.conj().swapaxes(-1, -2)


def _matmul_adj_a(a, b):
    """a^H @ b as (b^H a)^H, so only the smaller factors get conjugated."""
    return _adj(np.matmul(_adj(b), a))


def cmatmul(a, b, adjoint_a=False):
    """Complex matmul of packed tensors: (..., M, K, 2) @ (..., K, P, 2).

    With ``adjoint_a`` the first operand is conjugate-transposed on its
    matrix axes before the product.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    ac, bc = _cview(a.value), _cview(b.value)

    out = _matmul_adj_a(ac, bc) if adjoint_a else np.matmul(ac, bc)

    def bwd(g):
        gc = _cview(g)
        if adjoint_a:
            # out = A^H B:  grad_A = B @ G^H, grad_B = A @ G
            ga = np.matmul(bc, _adj(gc))
            gb = np.matmul(ac, gc)
        else:
            # out = A B:    grad_A = G @ B^H, grad_B = A^H @ G
            ga = np.matmul(gc, _adj(bc))
            gb = _matmul_adj_a(ac, gc)
        return (_cstore(_unbroadcast_c(ga, ac.shape)),
                _cstore(_unbroadcast_c(gb, bc.shape)))

    return _make("cmatmul", _cstore(out), (a, b), bwd)


def embed_chol(raw, m):
    """Assemble packed lower-triangular factors from raw coefficients.

    raw: (..., m*m) real.  The first m entries become the diagonal via
    exp (clamped to [-30, 30]); the remaining m*(m-1) entries fill the
    strict lower triangle row-major as (real, imag) pairs.  Returns the
    packed complex factor (..., m, m, 2).
    """
    raw = _as_tensor(raw)
    rv = raw.value
    if rv.shape[-1] != m * m:
        raise ValueError(f"expected {m * m} coefficients, got {rv.shape[-1]}")
    lead = rv.shape[:-1]
    rows, cols = np.tril_indices(m, k=-1)
    diag_idx = np.arange(m)

    diag_raw = rv[..., :m]
    diag = np.exp(np.clip(diag_raw, -30.0, 30.0))
    diag_mask = (diag_raw > -30.0) & (diag_raw < 30.0)
    ctype = np.complex64 if rv.dtype == np.float32 else np.complex128
    pairs = _cview(np.ascontiguousarray(rv[..., m:]).reshape(lead + (len(rows), 2)))

    out = np.zeros(lead + (m, m), dtype=ctype)
    out[..., diag_idx, diag_idx] = diag
    out[..., rows, cols] = pairs

    def bwd(g):
        gc = _cview(g)
        gr = np.empty_like(rv)
        gr[..., :m] = gc[..., diag_idx, diag_idx].real * diag * diag_mask
        gr[..., m:] = _cstore(gc[..., rows, cols]).reshape(lead + (2 * len(rows),))
        return (gr,)

    return _make("embed_chol", _cstore(out), (raw,), bwd)


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

_MAGIC = b"BMFM"
_VERSION = 1


def save_tensors(path, tensors):
    """Write named float32 arrays in the little-endian binary format."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def load_tensors(path):
    """Read a checkpoint written by :func:`save_tensors`."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(dims)
            tensors[name] = data.copy()
        return tensors


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def finite_difference_check(fn, params, rng, n_samples=200, step=1e-3,
                            rel_tol=1e-4, abs_floor=1e-6):
    """Compare tape gradients of ``fn()`` against central differences.

    ``fn`` evaluates the scalar loss from ``params`` (a dict of float64
    parameter DiffTensors).  Returns the max relative error over
    ``n_samples`` sampled parameter entries; raises AssertionError when
    it exceeds ``rel_tol``.
    """
    for p in params.values():
        p.grad = None
        if p.value.dtype != np.float64:
            raise ValueError("finite-difference checks require float64 parameters")

    tape = Tape()
    with record(tape):
        loss = fn()
    backward(tape, loss)
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.value))
                for k, p in params.items()}

    names = sorted(params.keys())
    sizes = np.array([params[k].value.size for k in names])
    probs = sizes / sizes.sum()
    worst = 0.0
    for _ in range(n_samples):
        name = names[rng.choice(len(names), p=probs)]
        p = params[name]
        flat = p.value.reshape(-1)
        idx = int(rng.integers(flat.size))
        keep = flat[idx]
        flat[idx] = keep + step
        up = float(fn().value)
        flat[idx] = keep - step
        dn = float(fn().value)
        flat[idx] = keep
        fd = (up - dn) / (2.0 * step)
        an = float(analytic[name].reshape(-1)[idx])
        # pass when |fd - an| <= max(rel_tol * scale, abs_floor)
        diff = abs(fd - an)
        margin = diff / max(rel_tol * max(abs(fd), abs(an)), abs_floor)
        worst = max(worst, margin * rel_tol)
        if margin > 1.0:
            raise AssertionError(
                f"gradient mismatch on {name}[{idx}]: fd={fd:.8g} analytic={an:.8g} "
                f"diff={diff:.3g}")
    return worst
