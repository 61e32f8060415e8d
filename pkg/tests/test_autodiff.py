import struct

import numpy as np
import pytest

import bmfmvdr.autodiff as ad


def scalar(x):
    return ad.sum(ad.mul(x, x))


def grad_of(fn, params):
    for p in params.values():
        p.grad = None
    tape = ad.Tape()
    with ad.record(tape):
        loss = fn()
    ad.backward(tape, loss)
    return loss


class TestBasics:
    def test_polynomial_gradient(self):
        x = ad.parameter(np.array(3.0), dtype=np.float64)
        grad_of(lambda: ad.mul(x, x), {"x": x})
        assert x.grad == pytest.approx(6.0)

    def test_matmul_gradient_pattern(self):
        # d sum(A @ B) / dA = ones @ B^T; at B = [[1,2],[3,4]] each row is [3, 7]
        a = ad.parameter(np.eye(2), dtype=np.float64)
        b = ad.constant(np.array([[1.0, 2.0], [3.0, 4.0]]))
        grad_of(lambda: ad.sum(ad.matmul(a, b)), {"a": a})
        np.testing.assert_allclose(a.grad, [[3.0, 7.0], [3.0, 7.0]])

    def test_abs_smooth_at_zero(self):
        x = ad.parameter(np.array(0.0), dtype=np.float64)
        tape = ad.Tape()
        with ad.record(tape):
            y = ad.abs_smooth(x, 1e-8)
        assert float(y.value) == pytest.approx(1e-4)
        ad.backward(tape, y)
        assert x.grad == 0.0

    def test_unused_parameter_gets_no_gradient(self):
        x = ad.parameter(np.ones(3), dtype=np.float64)
        unused = ad.parameter(np.ones(3), dtype=np.float64)
        grad_of(lambda: scalar(x), {"x": x, "u": unused})
        assert unused.grad is None

    def test_double_backward_rejected(self):
        x = ad.parameter(np.ones(3), dtype=np.float64)
        tape = ad.Tape()
        with ad.record(tape):
            loss = scalar(x)
        ad.backward(tape, loss)
        with pytest.raises(ad.GraphError):
            ad.backward(tape, loss)

    def test_non_scalar_loss_rejected(self):
        x = ad.parameter(np.ones(3), dtype=np.float64)
        tape = ad.Tape()
        with ad.record(tape):
            y = ad.mul(x, x)
        with pytest.raises(ad.GraphError):
            ad.backward(tape, y)

    def test_nan_forward_raises(self):
        x = ad.parameter(np.array([-1.0]), dtype=np.float64)
        with pytest.raises(ad.NonFiniteError):
            ad.log(x)

    def test_float32_default_storage(self):
        t = ad.constant(np.zeros(3, dtype=np.float16))
        assert t.value.dtype == np.float32
        p = ad.parameter(np.zeros(3))
        assert p.value.dtype == np.float32

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(33)
            x = ad.parameter(rng.standard_normal((8, 16)), dtype=np.float64)
            w = ad.parameter(rng.standard_normal((4, 8)), dtype=np.float64)
            grad_of(lambda: scalar(ad.tanh(ad.matmul(w, x))), {"x": x, "w": w})
            return x.grad.tobytes(), w.grad.tobytes()

        assert run() == run()

    def test_straight_through(self):
        x = ad.parameter(np.array([1.0, 2.0]), dtype=np.float64)
        tape = ad.Tape()
        with ad.record(tape):
            y = ad.straight_through(x, np.array([5.0, 5.0]))
            loss = ad.sum(ad.mul(y, np.array([2.0, 3.0])))
        np.testing.assert_array_equal(y.value, [5.0, 5.0])
        ad.backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [2.0, 3.0])


class TestOpGradients:
    """Central finite differences against every backward rule."""

    rng = np.random.default_rng(7)

    def check(self, fn, params, n=30, tol=2e-6):
        worst = ad.finite_difference_check(fn, params, self.rng, n_samples=n,
                                           step=1e-5, rel_tol=tol, abs_floor=1e-9)
        assert worst <= tol

    def test_elementwise(self):
        x = ad.parameter(self.rng.standard_normal((5, 7)) + 0.5, dtype=np.float64)
        y = ad.parameter(self.rng.standard_normal((5, 7)) + 2.0, dtype=np.float64)
        self.check(lambda: scalar(ad.add(x, y)), {"x": x, "y": y})
        self.check(lambda: scalar(ad.sub(x, y)), {"x": x, "y": y})
        self.check(lambda: scalar(ad.mul(x, y)), {"x": x, "y": y})
        self.check(lambda: scalar(ad.div(x, y)), {"x": x, "y": y})
        self.check(lambda: scalar(ad.neg(x)), {"x": x})
        self.check(lambda: scalar(ad.tanh(x)), {"x": x})
        self.check(lambda: scalar(ad.exp(ad.mul(x, 0.3))), {"x": x})
        self.check(lambda: scalar(ad.log(ad.add(ad.mul(x, x), 1.0))), {"x": x})
        self.check(lambda: scalar(ad.sqrt(ad.add(ad.mul(x, x), 1.0))), {"x": x})
        self.check(lambda: scalar(ad.abs_smooth(x, 1e-9)), {"x": x})

    def test_exp_clamp_zero_gradient_outside(self):
        x = ad.parameter(np.array([40.0, -40.0, 0.5]), dtype=np.float64)
        grad_of(lambda: ad.sum(ad.exp(x)), {"x": x})
        assert x.grad[0] == 0.0 and x.grad[1] == 0.0
        assert x.grad[2] == pytest.approx(np.exp(0.5))

    def test_broadcasting(self):
        x = ad.parameter(self.rng.standard_normal((5, 7)), dtype=np.float64)
        row = ad.parameter(self.rng.standard_normal((1, 7)), dtype=np.float64)
        s = ad.parameter(np.array(1.5), dtype=np.float64)
        self.check(lambda: scalar(ad.add(x, row)), {"x": x, "r": row})
        self.check(lambda: scalar(ad.mul(x, s)), {"x": x, "s": s})

    def test_matmul_and_batched(self):
        a = ad.parameter(self.rng.standard_normal((4, 5)), dtype=np.float64)
        b = ad.parameter(self.rng.standard_normal((5, 6)), dtype=np.float64)
        self.check(lambda: scalar(ad.matmul(a, b)), {"a": a, "b": b})
        ab = ad.parameter(self.rng.standard_normal((3, 4, 5)), dtype=np.float64)
        bb = ad.parameter(self.rng.standard_normal((3, 5, 2)), dtype=np.float64)
        self.check(lambda: scalar(ad.matmul(ab, bb)), {"a": ab, "b": bb})

    def test_reductions_and_shape_ops(self):
        x = ad.parameter(self.rng.standard_normal((5, 7)), dtype=np.float64)
        y = ad.parameter(self.rng.standard_normal((5, 7)), dtype=np.float64)
        self.check(lambda: scalar(ad.sum(x, axis=1, keepdims=True)), {"x": x})
        self.check(lambda: scalar(ad.mean(x, axis=0)), {"x": x})
        self.check(lambda: scalar(ad.cumsum(x, axis=1)), {"x": x})
        self.check(lambda: scalar(ad.concat([x, y], axis=0)), {"x": x, "y": y})
        self.check(lambda: scalar(ad.slice_axes(x, (slice(1, 4), slice(2, 6)))), {"x": x})
        self.check(lambda: scalar(ad.reshape(x, (7, 5))), {"x": x})
        self.check(lambda: scalar(ad.transpose(x, (1, 0))), {"x": x})
        mask = self.rng.standard_normal((5, 7)) > 0
        self.check(lambda: scalar(ad.select(mask, x, y)), {"x": x, "y": y})

    def test_prelu(self):
        x = ad.parameter(self.rng.standard_normal((5, 7)), dtype=np.float64)
        s = ad.parameter(self.rng.uniform(0.1, 0.4, 5), dtype=np.float64)
        self.check(lambda: scalar(ad.prelu(x, s)), {"x": x, "s": s})

    def test_conv_and_normalization(self):
        cx = ad.parameter(self.rng.standard_normal((3, 20)), dtype=np.float64)
        cw = ad.parameter(self.rng.standard_normal((4, 3, 3)), dtype=np.float64)
        cb = ad.parameter(self.rng.standard_normal(4), dtype=np.float64)
        for dil in (1, 4):
            self.check(lambda d=dil: scalar(ad.causal_dilated_conv1d(cx, cw, cb, d)),
                       {"x": cx, "w": cw, "b": cb})
        self.check(lambda: scalar(ad.cumulative_mean(cx)), {"x": cx})
        self.check(lambda: scalar(ad.cumulative_variance(cx)), {"x": cx})

    def test_complex_ops(self):
        za = ad.parameter(self.rng.standard_normal((6, 2)) + 0.3, dtype=np.float64)
        zb = ad.parameter(self.rng.standard_normal((6, 2)) + 1.5, dtype=np.float64)
        self.check(lambda: scalar(ad.conj(za)), {"a": za})
        self.check(lambda: scalar(ad.cmul(za, zb)), {"a": za, "b": zb})
        self.check(lambda: scalar(ad.cdiv(za, zb)), {"a": za, "b": zb})
        self.check(lambda: scalar(ad.cabs_smooth(za, 1e-9)), {"a": za})
        x = ad.parameter(self.rng.standard_normal((4, 3)), dtype=np.float64)
        y = ad.parameter(self.rng.standard_normal((4, 3)), dtype=np.float64)
        self.check(lambda: scalar(ad.cpack(x, y)), {"x": x, "y": y})
        ma = ad.parameter(self.rng.standard_normal((2, 3, 4, 2)), dtype=np.float64)
        mb = ad.parameter(self.rng.standard_normal((2, 4, 5, 2)), dtype=np.float64)
        self.check(lambda: scalar(ad.cmatmul(ma, mb)), {"a": ma, "b": mb})
        mah = ad.parameter(self.rng.standard_normal((2, 4, 3, 2)), dtype=np.float64)
        self.check(lambda: scalar(ad.cmatmul(mah, mb, adjoint_a=True)),
                   {"a": mah, "b": mb})

    def test_embed_chol(self):
        raw = ad.parameter(self.rng.standard_normal((5, 16)) * 0.5, dtype=np.float64)
        self.check(lambda: scalar(ad.embed_chol(raw, 4)), {"r": raw})


class TestComplexConsistency:
    def test_against_native_complex_oracle(self):
        rng = np.random.default_rng(11)
        a = rng.standard_normal((200, 2))
        b = rng.standard_normal((200, 2)) + np.array([2.0, 0.0])
        ac = a[:, 0] + 1j * a[:, 1]
        bc = b[:, 0] + 1j * b[:, 1]

        def packed(z):
            return np.stack([z.real, z.imag], axis=-1)

        assert np.max(np.abs(ad.cmul(ad.constant(a), ad.constant(b)).value
                             - packed(ac * bc))) <= 1e-12
        assert np.max(np.abs(ad.cdiv(ad.constant(a), ad.constant(b)).value
                             - packed(ac / bc))) <= 1e-12
        assert np.max(np.abs(ad.conj(ad.constant(a)).value
                             - packed(ac.conj()))) <= 1e-12

    def test_cmatmul_against_native(self):
        rng = np.random.default_rng(12)
        a = rng.standard_normal((3, 4, 5, 2))
        b = rng.standard_normal((3, 5, 6, 2))
        ac = a[..., 0] + 1j * a[..., 1]
        bc = b[..., 0] + 1j * b[..., 1]
        got = ad.cmatmul(ad.constant(a), ad.constant(b)).value
        want = ac @ bc
        assert np.max(np.abs((got[..., 0] + 1j * got[..., 1]) - want)) <= 1e-12
        got = ad.cmatmul(ad.constant(a), ad.constant(
            rng.standard_normal((3, 4, 6, 2))), adjoint_a=True).value
        assert got.shape == (3, 5, 6, 2)


class TestConvolution:
    def test_matches_direct_convolution(self):
        # oracle: explicit causal convolution sum per output frame
        rng = np.random.default_rng(13)
        x = rng.standard_normal((2, 30))
        w = rng.standard_normal((3, 2, 4))
        b = rng.standard_normal(3)
        for dil in (1, 2, 3):
            out = ad.causal_dilated_conv1d(ad.constant(x), ad.constant(w),
                                           ad.constant(b), dil).value
            want = np.zeros((3, 30))
            for t in range(30):
                acc = b.copy()
                for i in range(4):
                    src = t - (4 - 1 - i) * dil
                    if src >= 0:
                        acc = acc + w[:, :, i] @ x[:, src]
                want[:, t] = acc
            np.testing.assert_allclose(out, want, atol=1e-10)

    def test_causality(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((2, 30))
        w = rng.standard_normal((3, 2, 3))
        b = rng.standard_normal(3)
        base = ad.causal_dilated_conv1d(ad.constant(x), ad.constant(w),
                                        ad.constant(b), 2).value
        x2 = x.copy()
        x2[:, 20] += 5.0
        pert = ad.causal_dilated_conv1d(ad.constant(x2), ad.constant(w),
                                        ad.constant(b), 2).value
        np.testing.assert_array_equal(base[:, :20], pert[:, :20])
        assert np.any(base[:, 20] != pert[:, 20])


class TestCheckpointFormat:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(15)
        tensors = {"conv.w": rng.standard_normal((3, 4, 5)).astype(np.float32),
                   "bias": rng.standard_normal(7).astype(np.float32),
                   "scalarish": np.float32(2.5) * np.ones((), dtype=np.float32)}
        path = tmp_path / "ckpt.bin"
        ad.save_tensors(path, tensors)
        loaded = ad.load_tensors(path)
        assert set(loaded) == set(tensors)
        for k in tensors:
            np.testing.assert_array_equal(loaded[k], tensors[k])
            assert loaded[k].dtype == np.float32

    def test_wire_format_header(self, tmp_path):
        # independent decode of the little-endian layout
        path = tmp_path / "ckpt.bin"
        arr = np.arange(6, dtype=np.float32).reshape(2, 3)
        ad.save_tensors(path, {"ab": arr})
        blob = path.read_bytes()
        assert blob[:4] == b"BMFM"
        version, count = struct.unpack_from("<II", blob, 4)
        assert version == 1 and count == 1
        (nlen,) = struct.unpack_from("<H", blob, 12)
        assert blob[14:14 + nlen] == b"ab"
        (rank,) = struct.unpack_from("<B", blob, 14 + nlen)
        dims = struct.unpack_from("<2I", blob, 15 + nlen)
        assert rank == 2 and dims == (2, 3)
        payload = np.frombuffer(blob, dtype="<f4", offset=15 + nlen + 8)
        np.testing.assert_array_equal(payload.reshape(2, 3), arr)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            ad.load_tensors(path)
