"""Gradient checks and tape behavior for the autodiff engine."""

import numpy as np
import pytest

from maskadv import autodiff as ad
from maskadv.autodiff import Tape


def _check(build, point, coords=None, step=1e-3, limit=1e-5):
    point = np.asarray(point, dtype=np.float64)
    if coords is None:
        rng = np.random.default_rng(0)
        flat = rng.choice(point.size, size=min(10, point.size), replace=False)
        coords = [np.unravel_index(i, point.shape) for i in flat]
    err = ad.grad_check(build, point, coords, step)
    assert err < limit, f"grad check failed: {err}"


class TestBasicRules:
    def test_square_at_three(self):
        tape = Tape()
        x = tape.leaf(np.array([3.0]))
        tape.backward(ad.sum_all(ad.square(x)))
        assert x.grad[0] == pytest.approx(6.0, abs=1e-12)

    def test_mean_gradient(self):
        tape = Tape()
        x = tape.leaf(np.arange(4.0))
        tape.backward(ad.mean_all(x))
        assert np.allclose(x.grad, 0.25)

    def test_sum_gradient_ones(self):
        tape = Tape()
        x = tape.leaf(np.arange(6.0).reshape(2, 3))
        tape.backward(ad.sum_all(x))
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_constant_loss_zero_grad(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        loss = ad.sum_all(ad.mul(x, 0.0))
        tape.backward(loss)
        assert np.allclose(x.grad, 0.0)

    def test_linear_exact(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal(8)

        def build(tape, x):
            return ad.sum_all(ad.mul(x, tape.constant(w)))

        err = ad.grad_check(build, rng.standard_normal(8), list(range(8)))
        assert err < 1e-10

    def test_quadratic_form(self):
        rng = np.random.default_rng(2)
        q = rng.standard_normal((5, 5))

        def build(tape, x):
            col = ad.reshape(x, (5, 1))
            row = ad.reshape(x, (1, 5))
            return ad.sum_all(ad.matmul(row, ad.matmul(tape.constant(q), col)))

        err = ad.grad_check(build, rng.standard_normal(5), list(range(5)))
        assert err < 1e-7

    def test_clamp_interior(self):
        def build(tape, x):
            return ad.sum_all(ad.square(ad.clamp(x, -0.5, 0.5)))

        err = ad.grad_check(build, np.array([0.2, -0.3, 0.9, -0.8]), [0, 1, 2, 3])
        assert err < 1e-6


class TestOpGradients:
    def test_arithmetic_ops(self):
        rng = np.random.default_rng(3)
        other = rng.uniform(0.5, 2.0, (4, 5))
        for op in [ad.add, ad.sub, ad.mul, ad.div]:
            _check(
                lambda t, x, op=op: ad.sum_all(
                    ad.square(op(x, t.constant(other)))
                ),
                rng.uniform(0.5, 2.0, (4, 5)),
            )

    def test_scalar_broadcast(self):
        _check(
            lambda t, x: ad.sum_all(ad.square(ad.mul(x, 2.5))),
            np.random.default_rng(4).standard_normal(6),
        )

    def test_matmul(self):
        rng = np.random.default_rng(5)
        b = rng.standard_normal((5, 3))
        _check(
            lambda t, x: ad.sum_all(ad.square(ad.matmul(x, t.constant(b)))),
            rng.standard_normal((4, 5)),
        )

    def test_unary_ops(self):
        rng = np.random.default_rng(6)
        pos = rng.uniform(0.5, 2.0, 8)
        for op in [ad.square, ad.sqrt, ad.exp, ad.log10, ad.sigmoid, ad.tanh, ad.absval]:
            _check(lambda t, x, op=op: ad.sum_all(op(x)), pos)

    def test_minimum(self):
        rng = np.random.default_rng(7)
        other = rng.standard_normal(10)
        _check(
            lambda t, x: ad.sum_all(ad.square(ad.minimum(x, t.constant(other)))),
            other + np.where(rng.uniform(size=10) > 0.5, 0.3, -0.3),
        )

    def test_conv1d_full(self):
        rng = np.random.default_rng(8)
        k = rng.standard_normal(7)
        _check(
            lambda t, x: ad.sum_all(ad.square(ad.conv1d_full(x, k))),
            rng.standard_normal(30),
            limit=1e-6,
        )

    def test_conv_gradient_is_reversed_correlation(self):
        rng = np.random.default_rng(9)
        k = rng.standard_normal(5)
        x = rng.standard_normal(20)
        tape = Tape()
        xv = tape.leaf(x)
        tape.backward(ad.sum_all(ad.conv1d_full(xv, k)))
        # d(sum conv)/dx[i] = sum of kernel
        assert np.allclose(xv.grad, np.sum(k), atol=1e-12)

    def test_frame_overlap_add(self):
        rng = np.random.default_rng(10)
        _check(
            lambda t, x: ad.sum_all(
                ad.square(ad.overlap_add(ad.frame(x, 8, 4), 4, 24))
            ),
            rng.standard_normal(24),
        )

    def test_row_ops(self):
        rng = np.random.default_rng(11)
        s = rng.uniform(0.5, 1.5, 4)
        v = rng.standard_normal(6)
        mat = rng.uniform(0.3, 1.0, (4, 6))
        for build in [
            lambda t, x: ad.sum_all(ad.square(ad.mul_rows(x, t.constant(s)))),
            lambda t, x: ad.sum_all(ad.square(ad.sub_rows(x, ad.row_mean(x)))),
            lambda t, x: ad.sum_all(ad.square(ad.add_rowvec(x, t.constant(v)))),
            lambda t, x: ad.sum_all(ad.square(ad.row_norm(x))),
            lambda t, x: ad.sum_all(ad.square(ad.row_sum(x))),
            lambda t, x: ad.sum_all(ad.square(ad.row_dot(x, t.constant(mat)))),
        ]:
            _check(build, rng.uniform(0.3, 1.0, (4, 6)))

    def test_structural_ops(self):
        rng = np.random.default_rng(12)
        for build in [
            lambda t, x: ad.sum_all(ad.square(ad.slice1d(x, 2, 14, 3))),
            lambda t, x: ad.sum_all(ad.square(ad.upsample_zero(x, 3))),
            lambda t, x: ad.sum_all(ad.square(ad.pad1d(x, 2, 5))),
            lambda t, x: ad.sum_all(ad.square(ad.take_rows(x, [0, 3, 3, 7]))),
            lambda t, x: ad.sum_all(
                ad.square(ad.concat([ad.slice1d(x, 0, 8), ad.slice1d(x, 8, 16)], 0))
            ),
        ]:
            _check(build, rng.standard_normal(16))

    def test_structural_2d_ops(self):
        rng = np.random.default_rng(13)
        for build in [
            lambda t, x: ad.sum_all(ad.square(ad.sliding_rows(ad.pad_rows(x, 2, 2), 5))),
            lambda t, x: ad.sum_all(ad.square(ad.segment_cols(x, 3))),
            lambda t, x: ad.sum_all(ad.square(ad.transpose(x))),
            lambda t, x: ad.sum_all(ad.square(ad.reshape(x, (24,)))),
        ]:
            _check(build, rng.standard_normal((8, 3)))

    def test_col_percentile(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((20, 5))
        # forward matches numpy
        tape = Tape()
        out = ad.col_percentile(tape.leaf(x), 10.0)
        assert np.allclose(out.data, np.percentile(x, 10.0, axis=0), atol=1e-12)
        _check(
            lambda t, v: ad.sum_all(ad.square(ad.col_percentile(v, 10.0))),
            x,
            limit=1e-6,
        )

    def test_pearson_rows_matches_numpy(self):
        rng = np.random.default_rng(15)
        a = rng.standard_normal((6, 30))
        b = rng.standard_normal((6, 30))
        tape = Tape()
        r = ad.pearson_rows(tape.leaf(a), tape.constant(b))
        for i in range(6):
            assert r.data[i] == pytest.approx(np.corrcoef(a[i], b[i])[0, 1], abs=1e-9)
        _check(
            lambda t, x: ad.mean_all(ad.pearson_rows(x, t.constant(b))),
            a,
            limit=1e-5,
        )


class TestDftOps:
    def test_dft_matrices_match_rfft(self):
        rng = np.random.default_rng(16)
        frames = rng.standard_normal((4, 64))
        c, s = ad.dft_matrices(64, 64)
        spec = np.fft.rfft(frames, axis=1)
        assert np.allclose(frames @ c, spec.real, atol=1e-10)
        assert np.allclose(frames @ s, spec.imag, atol=1e-10)

    def test_dft_zero_padding(self):
        rng = np.random.default_rng(17)
        frames = rng.standard_normal((3, 32))
        c, s = ad.dft_matrices(32, 64)
        spec = np.fft.rfft(frames, n=64, axis=1)
        assert np.allclose(frames @ c, spec.real, atol=1e-10)
        assert np.allclose(frames @ s, spec.imag, atol=1e-10)

    def test_idft_matrices_match_irfft(self):
        rng = np.random.default_rng(18)
        re = rng.standard_normal((3, 33))
        im = rng.standard_normal((3, 33))
        ic, is_ = ad.idft_matrices(64, 64)
        direct = np.fft.irfft(re + 1j * im, n=64, axis=1)
        assert np.allclose(re @ ic + im @ is_, direct, atol=1e-10)


class TestTapeSemantics:
    def test_double_backward_rejected(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        loss = ad.sum_all(x)
        tape.backward(loss)
        with pytest.raises(RuntimeError, match="consumed"):
            tape.backward(loss)

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(ad.square(x))

    def test_cross_tape_rejected(self):
        t1, t2 = Tape(), Tape()
        a = t1.leaf(np.ones(3))
        b = t2.leaf(np.ones(3))
        with pytest.raises(ValueError, match="tape"):
            ad.add(a, b)

    def test_shape_mismatch_rejected(self):
        tape = Tape()
        a = tape.leaf(np.ones(3))
        b = tape.leaf(np.ones(4))
        with pytest.raises(ValueError, match="shape"):
            ad.add(a, b)

    def test_shared_subexpression_accumulates(self):
        tape = Tape()
        x = tape.leaf(np.array([2.0]))
        y = ad.square(x)
        loss = ad.sum_all(ad.add(y, y))
        tape.backward(loss)
        assert x.grad[0] == pytest.approx(8.0, abs=1e-12)

    def test_linearity_of_gradients(self):
        rng = np.random.default_rng(19)
        p = rng.standard_normal(12)

        def grad_of(scale_f, scale_g):
            tape = Tape()
            x = tape.leaf(p)
            f = ad.sum_all(ad.square(x))
            g = ad.sum_all(ad.exp(ad.mul(x, 0.1)))
            tape.backward(ad.add(ad.mul(f, scale_f), ad.mul(g, scale_g)))
            return x.grad.copy()

        combined = grad_of(2.0, 3.0)
        parts = 2.0 * grad_of(1.0, 0.0) + 3.0 * grad_of(0.0, 1.0)
        assert np.allclose(combined, parts, atol=1e-12)

    def test_deterministic_gradients(self):
        rng = np.random.default_rng(20)
        p = rng.standard_normal((5, 7))

        def run():
            tape = Tape()
            x = tape.leaf(p)
            loss = ad.mean_all(ad.square(ad.sigmoid(ad.matmul(x, tape.constant(p.T)))))
            tape.backward(loss)
            return x.grad

        assert np.array_equal(run(), run())

    def test_debug_mode_flags_nonfinite(self):
        tape = Tape(debug=True)
        x = tape.leaf(np.array([0.0]))
        with np.errstate(divide="ignore"), pytest.raises(FloatingPointError):
            ad.log10(x)
