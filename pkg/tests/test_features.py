"""Feature providers, multi-scale fusion, cross-view attention."""

import numpy as np
import pytest

from monosplat import features as ft
from monosplat.blocks import WindowAttention
from monosplat.numerics import Parameter, backward, leaf, ops, write_mtf
from monosplat.numerics.autodiff import scalar_value
from monosplat.numerics.tensor import precision64
from monosplat.optim import grad_check


def _image(rng, h=32, w=32):
    return rng.uniform(0, 1, size=(h, w, 3)).astype(np.float32)


class TestSyntheticProvider:
    def test_deterministic(self):
        rng = np.random.default_rng(0)
        img = _image(rng)
        p1 = ft.SyntheticFeatureProvider(seed=7)
        p2 = ft.SyntheticFeatureProvider(seed=7)
        s1, m1 = p1.extract(img)
        s2, m2 = p2.extract(img)
        for a, b in zip(s1, s2):
            assert np.array_equal(a, b)
        assert np.array_equal(m1, m2)

    def test_scale_resolutions(self):
        rng = np.random.default_rng(1)
        img = _image(rng, 64, 48)
        scales, mono = ft.SyntheticFeatureProvider(seed=0).extract(img)
        assert [s.shape[:2] for s in scales] == [(16, 12), (8, 6), (4, 3), (2, 2)]
        assert mono.shape[:2] == (16, 12)
        assert mono.shape[2] == 32

    def test_mirror_equivariance(self):
        rng = np.random.default_rng(2)
        img = _image(rng)
        prov = ft.SyntheticFeatureProvider(seed=3)
        scales, mono = prov.extract(img)
        m_scales, m_mono = prov.extract(img[:, ::-1, :].copy())
        for a, b in zip(scales, m_scales):
            assert np.abs(a[:, ::-1, :] - b).max() < 1e-5
        assert np.abs(mono[:, ::-1, :] - m_mono).max() < 1e-5

    def test_rejects_bad_resolution(self):
        with pytest.raises(ValueError, match="divisible"):
            ft.SyntheticFeatureProvider().extract(np.zeros((30, 32, 3), np.float32))

    def test_state_hash_stable(self):
        assert (
            ft.SyntheticFeatureProvider(seed=5).state_hash()
            == ft.SyntheticFeatureProvider(seed=5).state_hash()
        )
        assert (
            ft.SyntheticFeatureProvider(seed=5).state_hash()
            != ft.SyntheticFeatureProvider(seed=6).state_hash()
        )


class TestFileProvider:
    def test_pass_through(self, tmp_path):
        rng = np.random.default_rng(4)
        h = w = 32
        arrays = []
        for s, factor in enumerate(ft.SCALE_FACTORS):
            arr = rng.normal(
                size=(ft.scale_extent(h, factor), ft.scale_extent(w, factor), 6)
            ).astype(np.float32)
            write_mtf(tmp_path / f"view_0_scale_{s}.mtf", arr)
            arrays.append(arr)
        mono = rng.normal(size=(8, 8, 5)).astype(np.float32)
        write_mtf(tmp_path / "view_0_mono.mtf", mono)

        prov = ft.FileFeatureProvider(tmp_path)
        scales, got_mono = prov.extract(np.zeros((h, w, 3), np.float32), view=0)
        for a, b in zip(arrays, scales):
            assert np.array_equal(a, b)
        assert np.array_equal(mono, got_mono)

    def test_shape_mismatch_rejected(self, tmp_path):
        rng = np.random.default_rng(5)
        for s in range(4):
            write_mtf(tmp_path / f"view_0_scale_{s}.mtf",
                      rng.normal(size=(3, 3, 2)).astype(np.float32))
        write_mtf(tmp_path / "view_0_mono.mtf", rng.normal(size=(8, 8, 2)).astype(np.float32))
        with pytest.raises(ValueError, match="does not match"):
            ft.FileFeatureProvider(tmp_path).extract(np.zeros((32, 32, 3), np.float32))

    def test_empty_directory_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="need view_0"):
            ft.FileFeatureProvider(tmp_path)

    def test_missing_file_rejected(self, tmp_path):
        rng = np.random.default_rng(6)
        for s, factor in enumerate(ft.SCALE_FACTORS):
            arr = rng.normal(
                size=(ft.scale_extent(32, factor), ft.scale_extent(32, factor), 4)
            ).astype(np.float32)
            write_mtf(tmp_path / f"view_0_scale_{s}.mtf", arr)
        write_mtf(tmp_path / "view_0_mono.mtf",
                  rng.normal(size=(8, 8, 4)).astype(np.float32))
        prov = ft.FileFeatureProvider(tmp_path)
        with pytest.raises(ValueError, match="missing feature file"):
            prov.extract(np.zeros((32, 32, 3), np.float32), view=1)


class TestDptFusion:
    def _scales(self, rng, h=8, w=8, c=6):
        shapes = [(h, w), (h // 2, w // 2), (h // 4, w // 4)]
        return [ops.constant(rng.normal(size=s + (c,)).astype(np.float32)) for s in shapes]

    def test_zero_input_gives_zero(self):
        rng = np.random.default_rng(6)
        fuser = ft.DptFusion([6, 6, 6], out_dim=16, rng=rng)
        zeros = [ops.constant(np.zeros((8, 8, 6), np.float32)),
                 ops.constant(np.zeros((4, 4, 6), np.float32)),
                 ops.constant(np.zeros((2, 2, 6), np.float32))]
        out = fuser(zeros)
        assert np.all(out.value == 0)

    def test_single_scale_is_projection(self):
        rng = np.random.default_rng(7)
        fuser = ft.DptFusion([5], out_dim=16, rng=rng)
        x = np.random.default_rng(1).normal(size=(8, 8, 5)).astype(np.float32)
        out = fuser([ops.constant(x)])
        assert out.value.shape == (8, 8, 16)
        expect = ops.conv2d(
            ops.constant(x), leaf(fuser.proj[0].weight), leaf(fuser.proj[0].bias),
            stride=1, padding=0,
        ).value
        assert np.array_equal(out.value, expect)

    def test_rejects_wrong_order(self):
        rng = np.random.default_rng(8)
        fuser = ft.DptFusion([4, 4], out_dim=8, rng=rng)
        fine = ops.constant(np.zeros((4, 4, 4), np.float32))
        coarse = ops.constant(np.zeros((8, 8, 4), np.float32))
        with pytest.raises(ValueError, match="fine to coarse"):
            fuser([fine, coarse])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        fuser = ft.DptFusion([4, 4], out_dim=6, rng=rng)
        xs = [rng.normal(size=(6, 6, 4)).astype(np.float32),
              rng.normal(size=(3, 3, 4)).astype(np.float32)]
        proj = rng.normal(size=(6, 6, 6)).astype(np.float32)
        params = fuser.parameters()

        def build():
            out = fuser([ops.constant(xs[0]), ops.constant(xs[1])])
            return ops.mean_all(ops.mul(out, proj))

        for p in params:
            p.zero_grad()
        backward(build())
        assert np.all(np.isfinite(build().value))
        with precision64():
            report = grad_check(lambda: scalar_value(build()), params, h=1e-4,
                                tol=1e-3, samples_per_param=8)
        assert report.ok(1e-3), f"max rel err {report.max_rel_err:.2e}"


class TestCrossViewAttention:
    def test_identical_views_symmetric(self):
        rng = np.random.default_rng(10)
        attn = ft.CrossViewAttention(dim=8, window=4, depth=2, rng=rng)
        f = rng.normal(size=(4, 4, 8)).astype(np.float32)
        mv0, meta0 = attn(ops.constant(f), [ops.constant(f)], view_id=0, neighbor_ids=[1])
        mv1, meta1 = attn(ops.constant(f), [ops.constant(f)], view_id=1, neighbor_ids=[0])
        assert np.abs(mv0.value - mv1.value).max() < 1e-6
        assert not meta0["self_only"]

    def test_zero_neighbors_flags_self_only(self):
        rng = np.random.default_rng(11)
        attn = ft.CrossViewAttention(dim=8, window=4, depth=1, rng=rng)
        f = rng.normal(size=(4, 4, 8)).astype(np.float32)
        mv, meta = attn(ops.constant(f), [], view_id=0)
        assert meta["self_only"]
        assert mv.value.shape == (4, 4, 8)

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(12)
        attn = ft.CrossViewAttention(dim=8, window=4, depth=1, rng=rng)
        for unit in attn.self_attn + attn.cross_attn:
            unit.captured_attn = []
        f = rng.normal(size=(4, 6, 8)).astype(np.float32)
        g = rng.normal(size=(4, 6, 8)).astype(np.float32)
        attn(ops.constant(f), [ops.constant(g)], view_id=0, neighbor_ids=[1])
        rows = 0
        for unit in attn.self_attn + attn.cross_attn:
            for mat in unit.captured_attn:
                sums = mat.astype(np.float64).sum(axis=-1)
                assert np.abs(sums - 1).max() < 1e-6
                rows += mat.shape[0]
        assert rows > 0

    def test_window_covering_map_matches_dense_reference(self):
        rng = np.random.default_rng(13)
        dim, h, w = 6, 3, 4
        unit = WindowAttention(dim, window=8, rng=rng)  # window >= map: dense
        x = rng.normal(size=(h, w, dim)).astype(np.float32)
        out = unit(ops.constant(x)).value

        # reference straight from the definition
        tokens = x.reshape(-1, dim).astype(np.float64)
        q = tokens @ unit.q.weight.value.astype(np.float64) + unit.q.bias.value
        k = tokens @ unit.k.weight.value.astype(np.float64) + unit.k.bias.value
        v = tokens @ unit.v.weight.value.astype(np.float64) + unit.v.bias.value
        logits = q @ k.T / np.sqrt(dim)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        a = e / e.sum(axis=-1, keepdims=True)
        ref = (a @ v) @ unit.out.weight.value.astype(np.float64) + unit.out.bias.value
        assert np.abs(out - ref.reshape(h, w, dim)).max() < 1e-5

    def test_windowed_equals_dense_when_window_is_full_map(self):
        rng = np.random.default_rng(14)
        dim, h, w = 4, 4, 4
        small = WindowAttention(dim, window=4, rng=np.random.default_rng(99))
        big = WindowAttention(dim, window=64, rng=np.random.default_rng(99))
        x = rng.normal(size=(h, w, dim)).astype(np.float32)
        assert np.abs(small(ops.constant(x)).value - big(ops.constant(x)).value).max() < 1e-5

    def test_deterministic_forward(self):
        rng = np.random.default_rng(15)
        attn = ft.CrossViewAttention(dim=8, window=2, depth=2, rng=rng)
        f = rng.normal(size=(4, 4, 8)).astype(np.float32)
        g = rng.normal(size=(4, 4, 8)).astype(np.float32)
        a, _ = attn(ops.constant(f), [ops.constant(g)], 0, [1])
        b, _ = attn(ops.constant(f), [ops.constant(g)], 0, [1])
        assert np.array_equal(a.value, b.value)
