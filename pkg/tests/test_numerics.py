"""Tensor substrate: bilinear sampling, softmax, MTF format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monosplat.numerics import NumericError, ops, read_mtf, write_mtf
from monosplat.numerics.tensor import check_finite


def _sample(src, coords):
    node, mask = ops.bilinear_sample(src, coords)
    return node.value, mask


class TestBilinearSample:
    def test_integer_coords_identity(self):
        rng = np.random.default_rng(0)
        src = rng.normal(size=(5, 7, 3)).astype(np.float32)
        xs, ys = np.meshgrid(np.arange(7), np.arange(5))
        coords = np.stack([xs, ys], axis=-1).astype(np.float32)
        out, mask = _sample(src, coords)
        assert np.array_equal(out, src)
        assert mask.all()

    def test_linear_midpoint(self):
        src = np.array([[[0.0], [1.0]]], dtype=np.float32)  # 1x2 image
        coords = np.array([[[0.5, 0.0]]], dtype=np.float32)
        out, _ = _sample(src, coords)
        assert out[0, 0, 0] == pytest.approx(0.5)

    def test_matches_scalar_reference_on_finer_grid(self):
        # Independent per-pixel scalar interpolator as the oracle.
        rng = np.random.default_rng(7)
        src = rng.normal(size=(8, 8, 2)).astype(np.float32)

        def scalar_ref(x, y, c):
            x = min(max(x, 0.0), 7.0)
            y = min(max(y, 0.0), 7.0)
            x0, y0 = int(min(np.floor(x), 6)), int(min(np.floor(y), 6))
            fx, fy = x - x0, y - y0
            v = (
                src[y0, x0, c] * (1 - fx) * (1 - fy)
                + src[y0, x0 + 1, c] * fx * (1 - fy)
                + src[y0 + 1, x0, c] * (1 - fx) * fy
                + src[y0 + 1, x0 + 1, c] * fx * fy
            )
            return v

        xs = np.linspace(0, 7, 15)
        ys = np.linspace(0, 7, 15)
        gx, gy = np.meshgrid(xs, ys)
        coords = np.stack([gx, gy], axis=-1).astype(np.float32)
        out, mask = _sample(src, coords)
        assert mask.all()
        for i in range(15):
            for j in range(15):
                for c in range(2):
                    assert out[i, j, c] == pytest.approx(
                        scalar_ref(xs[j], ys[i], c), abs=1e-5
                    )

    def test_out_of_range_clamps_and_masks(self):
        src = np.arange(4, dtype=np.float32).reshape(2, 2, 1)
        coords = np.array([[[-3.0, 0.0], [5.0, 1.0]]], dtype=np.float32)
        out, mask = _sample(src, coords)
        assert out[0, 0, 0] == 0.0  # clamped to (0,0)
        assert out[0, 1, 0] == 3.0  # clamped to (1,1)
        assert not mask.any()

    def test_empty_source_rejected(self):
        with pytest.raises(ValueError):
            ops.bilinear_sample(
                np.zeros((0, 2, 1), np.float32), np.zeros((1, 1, 2), np.float32)
            )

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ops.bilinear_sample(
                np.zeros((2, 2, 1), np.float32), np.zeros((1, 1, 3), np.float32)
            )


class TestSoftmaxLast:
    def test_uniform_slice(self):
        out = ops.softmax_last(np.zeros((4,), np.float32)).value
        assert np.allclose(out, 0.25, atol=1e-7)

    def test_large_logit_no_overflow(self):
        out = ops.softmax_last(np.array([1000.0, 0.0], np.float32)).value
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1.0, abs=1e-6)
        assert out[1] == pytest.approx(0.0, abs=1e-6)

    def test_matches_float64_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(scale=3.0, size=(5, 9)).astype(np.float32)
        out = ops.softmax_last(x).value
        ref = np.exp(x.astype(np.float64))
        ref /= ref.sum(axis=-1, keepdims=True)
        assert np.abs(out - ref).max() < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(st.floats(-50, 50, width=32), min_size=1, max_size=16),
    )
    def test_slices_sum_to_one(self, vals):
        x = np.asarray(vals, dtype=np.float32)
        out = ops.softmax_last(x).value
        assert abs(out.astype(np.float64).sum() - 1.0) < 1e-6


class TestMTF:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(11)
        arr = rng.normal(size=(2, 3, 4, 5)).astype(np.float32)
        p = tmp_path / "t.mtf"
        write_mtf(p, arr)
        back = read_mtf(p)
        assert back.shape == arr.shape
        assert np.array_equal(
            back.view(np.uint32), arr.view(np.uint32)
        )

    def test_double_write_identical_bytes(self, tmp_path):
        arr = np.linspace(0, 1, 12, dtype=np.float32).reshape(3, 4)
        p1, p2 = tmp_path / "a.mtf", tmp_path / "b.mtf"
        write_mtf(p1, arr)
        write_mtf(p2, read_mtf(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_unknown_version(self, tmp_path):
        p = tmp_path / "bad.mtf"
        write_mtf(p, np.zeros(3, np.float32))
        raw = bytearray(p.read_bytes())
        raw[4] = 9  # version field
        p.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="version"):
            read_mtf(p)

    def test_rejects_unknown_dtype(self, tmp_path):
        p = tmp_path / "bad.mtf"
        write_mtf(p, np.zeros(3, np.float32))
        raw = bytearray(p.read_bytes())
        raw[8] = 5  # dtype field
        p.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="dtype"):
            read_mtf(p)

    def test_rejects_bad_magic(self, tmp_path):
        p = tmp_path / "bad.mtf"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="not an MTF"):
            read_mtf(p)


def test_check_finite_raises():
    with pytest.raises(NumericError):
        check_finite(np.array([1.0, np.nan], np.float32), "x")
