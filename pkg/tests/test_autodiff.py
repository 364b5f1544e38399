"""Reverse-mode gradients against central finite differences."""

import numpy as np
import pytest

from monosplat.numerics import Parameter, backward, backward_from, leaf, ops
from monosplat.numerics.autodiff import scalar_value
from monosplat.numerics.tensor import precision64
from monosplat.optim import grad_check


def _check(build_loss, params, tol=1e-3, h=1e-3):
    """Run backward once, then finite-difference every parameter element."""
    for p in params:
        p.zero_grad()
    backward(build_loss())
    with precision64():
        report = grad_check(lambda: scalar_value(build_loss()), params, h=h, tol=tol)
    assert report.ok(tol), f"max rel err {report.max_rel_err:.2e}, worst {report.worst[:3]}"


def _param(rng, shape, scale=1.0, name="p"):
    return Parameter((rng.normal(size=shape) * scale).astype(np.float32), name=name)


class TestAnalyticCases:
    def test_sum_of_squares_gradient_exact(self):
        rng = np.random.default_rng(0)
        p = _param(rng, (3, 5))
        x = leaf(p)
        loss = ops.sum_all(ops.mul(x, x))
        backward(loss)
        assert np.allclose(p.grad, 2 * p.value, atol=1e-5)

    def test_frozen_parameter_untouched(self):
        rng = np.random.default_rng(1)
        frozen = Parameter(rng.normal(size=(4,)).astype(np.float32), trainable=False)
        live = _param(rng, (4,))
        loss = ops.sum_all(ops.mul(leaf(frozen), leaf(live)))
        backward(loss)
        assert np.all(frozen.grad == 0)
        assert np.allclose(live.grad, frozen.value, atol=1e-6)

    def test_backward_rejects_non_scalar(self):
        p = Parameter(np.ones((3,), np.float32))
        with pytest.raises(ValueError, match="scalar"):
            backward(leaf(p))

    def test_backward_from_seeds_cotangent(self):
        rng = np.random.default_rng(2)
        p = _param(rng, (2, 3))
        x = leaf(p)
        y = ops.mul(x, 3.0)
        seed = rng.normal(size=(2, 3))
        backward_from([y], [seed])
        assert np.allclose(p.grad, 3.0 * seed, atol=1e-5)


class TestPrimitiveGradients:
    def test_add_mul_broadcast(self):
        rng = np.random.default_rng(3)
        a = _param(rng, (4, 5), name="a")
        b = _param(rng, (5,), name="b")
        _check(lambda: ops.mean_all(ops.mul(ops.add(leaf(a), leaf(b)), leaf(a))), [a, b])

    def test_matmul(self):
        rng = np.random.default_rng(4)
        a = _param(rng, (4, 6), name="a")
        b = _param(rng, (6, 3), name="b")
        _check(lambda: ops.mean_all(ops.matmul(leaf(a), leaf(b))), [a, b])

    def test_conv2d_sigmoid_mse_chain(self):
        rng = np.random.default_rng(5)
        x = _param(rng, (6, 6, 2), name="x")
        w = _param(rng, (3, 3, 2, 4), scale=0.5, name="w")
        b = _param(rng, (4,), scale=0.1, name="b")
        target = rng.normal(size=(6, 6, 4)).astype(np.float32)

        def build():
            out = ops.sigmoid(ops.conv2d(leaf(x), leaf(w), leaf(b), padding=1))
            return ops.mse(out, target)

        _check(build, [x, w, b])

    def test_conv2d_strided(self):
        rng = np.random.default_rng(6)
        x = _param(rng, (8, 8, 3), name="x")
        w = _param(rng, (3, 3, 3, 2), scale=0.5, name="w")
        _check(
            lambda: ops.mean_all(ops.conv2d(leaf(x), leaf(w), None, stride=2, padding=1)),
            [x, w],
        )

    def test_bilinear_sample_src_and_coords(self):
        rng = np.random.default_rng(7)
        src = _param(rng, (6, 7, 2), name="src")
        # keep coords away from integer lattice points (kinks)
        cvals = rng.uniform(0.2, 4.8, size=(3, 4, 2)) + 0.37
        coords = Parameter(cvals.astype(np.float32), name="coords")

        def build():
            node, _ = ops.bilinear_sample(leaf(src), leaf(coords))
            return ops.mean_all(ops.mul(node, node))

        _check(build, [src, coords])

    def test_softmax_relu_exp(self):
        rng = np.random.default_rng(8)
        x = _param(rng, (5, 6), name="x")
        proj = rng.normal(size=(5, 6)).astype(np.float32)

        def build():
            s = ops.softmax_last(leaf(x))
            r = ops.relu(ops.add(s, -0.05))
            return ops.mean_all(ops.mul(ops.exp(r), proj))

        _check(build, [x])

    def test_normalize_l2(self):
        rng = np.random.default_rng(9)
        x = _param(rng, (4, 5), name="x")
        proj = rng.normal(size=(4, 5)).astype(np.float32)
        _check(lambda: ops.mean_all(ops.mul(ops.normalize(leaf(x), "l2"), proj)), [x])

    def test_normalize_standard(self):
        rng = np.random.default_rng(10)
        x = _param(rng, (4, 8), name="x")
        proj = rng.normal(size=(4, 8)).astype(np.float32)
        _check(lambda: ops.mean_all(ops.mul(ops.normalize(leaf(x), "standard"), proj)), [x])

    def test_concat_slice_transpose_reshape(self):
        rng = np.random.default_rng(11)
        a = _param(rng, (3, 4), name="a")
        b = _param(rng, (3, 2), name="b")

        def build():
            cat = ops.concat([leaf(a), leaf(b)], axis=-1)
            t = ops.transpose(cat, (1, 0))
            s = ops.slice_(t, (slice(1, 5), slice(None)))
            r = ops.reshape(s, (2, 6))
            return ops.mean_all(ops.mul(r, r))

        _check(build, [a, b])

    def test_wsum_and_clamp(self):
        rng = np.random.default_rng(12)
        x = _param(rng, (3, 7), name="x")
        w = np.linspace(0.5, 2.0, 7).astype(np.float32)

        def build():
            c = ops.clamp(leaf(x), -0.5, 0.5)
            return ops.mean_all(ops.wsum_last(c, w))

        # keep values away from clamp kinks
        x.value[np.abs(np.abs(x.value) - 0.5) < 0.05] = 0.0
        _check(build, [x])

    def test_upsample_bilinear(self):
        rng = np.random.default_rng(13)
        x = _param(rng, (4, 4, 3), name="x")
        _check(lambda: ops.mean_all(ops.mul(ops.upsample_bilinear(leaf(x), 7, 9), 1.5)), [x])

    def test_pad2d(self):
        rng = np.random.default_rng(14)
        x = _param(rng, (3, 3, 2), name="x")
        proj = np.random.default_rng(0).normal(size=(6, 7, 2)).astype(np.float32)
        _check(lambda: ops.mean_all(ops.mul(ops.pad2d(leaf(x), 1, 2, 3, 1), proj)), [x])
