"""Depth candidates, correlation volume, refinement, softmax depth."""

import numpy as np
import pytest

from monosplat import costvolume as cv
from monosplat import features as ft
from monosplat import geometry as geo
from monosplat.numerics import backward, ops
from monosplat.numerics.autodiff import scalar_value
from monosplat.numerics.tensor import precision64
from monosplat.optim import grad_check


from stereo_scene import stereo_plane_recovery


class TestSampleCandidates:
    def test_two_candidates_are_endpoints(self):
        c = cv.sample_candidates(geo.DepthRange(0.5, 100.0), 2)
        assert np.allclose(c.values, [0.5, 100.0])

    def test_default_spacing(self):
        c = cv.sample_candidates(geo.DepthRange(0.5, 100.0), 128)
        assert c.spacing == pytest.approx((100.0 - 0.5) / 127, abs=1e-9)
        assert c.spacing == pytest.approx(0.78346, abs=1e-5)
        rel = np.abs(np.diff(c.values) - c.spacing) / c.spacing
        assert rel.max() < 1e-6

    def test_object_scale_bounds(self):
        c = cv.sample_candidates(geo.DepthRange(2.125, 4.525), 128)
        assert c.values[0] == pytest.approx(2.125)
        assert c.values[-1] == pytest.approx(4.525)

    def test_inverse_spacing_mode(self):
        c = cv.sample_candidates(geo.DepthRange(1.0, 8.0), 16, inverse=True)
        inv = 1.0 / c.values
        assert np.allclose(np.diff(inv), np.diff(inv)[0])
        assert c.values[0] == pytest.approx(1.0)
        assert c.values[-1] == pytest.approx(8.0)

    def test_rejects_single_candidate(self):
        with pytest.raises(ValueError):
            cv.sample_candidates(geo.DepthRange(1.0, 2.0), 1)


class TestBuild:
    def _identity_setup(self, h=8, w=8, c=6, seed=0):
        rng = np.random.default_rng(seed)
        K = np.array([[40.0, 0, (w * 4 - 1) / 2], [0, 40.0, (h * 4 - 1) / 2], [0, 0, 1]])
        cam = geo.Camera(K, np.eye(3), np.zeros(3), w * 4, h * 4)
        feats = rng.normal(size=(h, w, c)).astype(np.float32)
        return cam, feats

    def test_identity_neighbor_all_planes_tie(self):
        cam, feats = self._identity_setup()
        cands = cv.sample_candidates(geo.DepthRange(1.0, 5.0), 8)
        vol = cv.build(ops.constant(feats), [ops.constant(feats)], cam, [cam], cands)
        expect = (feats.astype(np.float64) ** 2).sum(-1) / feats.shape[-1]
        for m in range(8):
            assert np.abs(vol.raw.value[..., m] - expect).max() < 1e-5
        assert vol.validity.all()

    def test_duplicate_neighbors_average_to_single(self):
        cam, feats = self._identity_setup(seed=1)
        rng = np.random.default_rng(2)
        nb = rng.normal(size=feats.shape).astype(np.float32)
        cands = cv.sample_candidates(geo.DepthRange(1.0, 5.0), 4)
        one = cv.build(ops.constant(feats), [ops.constant(nb)], cam, [cam], cands)
        two = cv.build(
            ops.constant(feats), [ops.constant(nb), ops.constant(nb)], cam, [cam, cam], cands
        )
        assert np.abs(one.raw.value - two.raw.value).max() < 1e-6

    def test_rejects_no_neighbors(self):
        cam, feats = self._identity_setup()
        cands = cv.sample_candidates(geo.DepthRange(1.0, 5.0), 4)
        with pytest.raises(ValueError):
            cv.build(ops.constant(feats), [], cam, [], cands)

    def test_stereo_plane_argmax_recovers_depth(self):
        stats = stereo_plane_recovery(seed=0, res=256, depth_planes=32)
        assert stats["interior_count"] > 50
        assert stats["argmax_hit"] >= 0.95, f"argmax hit rate {stats['argmax_hit']:.3f}"

    def test_translation_depth_rescale_invariance(self):
        rng = np.random.default_rng(7)
        h = w = 8
        K = np.array([[40.0, 0, 15.5], [0, 40.0, 15.5], [0, 0, 1]])
        ref = geo.Camera(K, np.eye(3), rng.uniform(-0.2, 0.2, 3), 32, 32)
        axis = np.array([0.0, 1.0, 0.0])
        ang = 0.2
        Rm = np.array(
            [
                [np.cos(ang), 0, np.sin(ang)],
                [0, 1, 0],
                [-np.sin(ang), 0, np.cos(ang)],
            ]
        )
        src = geo.Camera(K, Rm, rng.uniform(-0.4, 0.4, 3), 32, 32)
        fr = rng.normal(size=(h, w, 4)).astype(np.float32)
        fs = rng.normal(size=(h, w, 4)).astype(np.float32)
        cands = cv.sample_candidates(geo.DepthRange(1.0, 4.0), 6)

        s = 3.7
        ref_s = geo.Camera(K, ref.R, ref.t * s, 32, 32)
        src_s = geo.Camera(K, src.R, src.t * s, 32, 32)
        cands_s = cv.DepthCandidates(cands.values * s, geo.DepthRange(1.0 * s, 4.0 * s))

        a = cv.build(ops.constant(fr), [ops.constant(fs)], ref, [src], cands)
        b = cv.build(ops.constant(fr), [ops.constant(fs)], ref_s, [src_s], cands_s)
        assert np.abs(a.raw.value - b.raw.value).max() < 1e-5
        assert np.array_equal(a.validity, b.validity)


class TestRefine:
    def _setup(self, seed=0, h=8, w=8, d=4, cmv=3, cmono=2):
        rng = np.random.default_rng(seed)
        raw = ops.constant(rng.normal(size=(h, w, d)).astype(np.float32))
        mono = rng.normal(size=(h, w, cmono)).astype(np.float32)
        mv = ops.constant(rng.normal(size=(h, w, cmv)).astype(np.float32))
        net = cv.CostVolumeRefiner(d, cmv, cmono, base=8, rng=rng)
        return raw, mono, mv, net

    def test_zero_init_is_identity(self):
        raw, mono, mv, net = self._setup()
        out = net(raw, mono, mv)
        assert np.array_equal(out.value, raw.value)

    def test_mono_exclusion_changes_output_same_shape(self):
        rng = np.random.default_rng(1)
        h = w = 8
        raw = ops.constant(rng.normal(size=(h, w, 4)).astype(np.float32))
        mono = rng.normal(size=(h, w, 2)).astype(np.float32)
        mv = ops.constant(rng.normal(size=(h, w, 3)).astype(np.float32))
        with_m = cv.CostVolumeRefiner(4, 3, 2, base=8, rng=np.random.default_rng(2))
        without = cv.CostVolumeRefiner(4, 3, None, base=8, rng=np.random.default_rng(2))
        # give both a nonzero head so outputs are not trivially raw
        for net in (with_m, without):
            net.unet.head.weight.value[...] = np.random.default_rng(3).normal(
                size=net.unet.head.weight.value.shape
            ).astype(np.float32) * 0.1
        a = with_m(raw, mono, mv)
        b = without(raw, None, mv)
        assert a.value.shape == b.value.shape
        assert np.abs(a.value - b.value).max() > 1e-6

    def test_channel_mismatch_rejected(self):
        raw, mono, mv, net = self._setup()
        with pytest.raises(ValueError, match="mono channels"):
            net(raw, mono[..., :1], mv)

    def test_gradient_matches_finite_differences(self):
        raw, mono, mv, net = self._setup(seed=3)
        net.unet.head.weight.value[...] = (
            np.random.default_rng(4).normal(size=net.unet.head.weight.value.shape) * 0.05
        ).astype(np.float32)
        proj = np.random.default_rng(5).normal(size=raw.value.shape).astype(np.float32)
        params = net.parameters()

        def build():
            return ops.mean_all(ops.mul(net(raw, mono, mv), proj))

        for p in params:
            p.zero_grad()
        backward(build())
        with precision64():
            report = grad_check(lambda: scalar_value(build()), params, h=1e-4,
                                tol=1e-3, samples_per_param=4)
        assert report.ok(1e-3), f"max rel err {report.max_rel_err:.2e}"


class TestToDepth:
    def test_uniform_logits_mid_range(self):
        cands = cv.sample_candidates(geo.DepthRange(0.5, 100.0), 128)
        refined = ops.constant(np.zeros((4, 4, 128), np.float32))
        prob, depth = cv.to_depth(refined, cands)
        assert np.abs(depth.value - 50.25).max() < 1e-4
        assert np.abs(prob.value.sum(-1) - 1).max() < 1e-6

    def test_one_hot_spike(self):
        cands = cv.sample_candidates(geo.DepthRange(1.0, 9.0), 16)
        logits = np.zeros((2, 2, 16), np.float32)
        logits[..., 5] = 60.0
        _, depth = cv.to_depth(ops.constant(logits), cands)
        assert np.abs(depth.value - cands.values[5]).max() < 1e-4

    def test_matches_float64_oracle(self):
        rng = np.random.default_rng(8)
        cands = cv.sample_candidates(geo.DepthRange(0.5, 10.0), 24)
        logits = rng.normal(scale=2.0, size=(5, 5, 24)).astype(np.float32)
        _, depth = cv.to_depth(ops.constant(logits), cands)
        e = np.exp(logits.astype(np.float64) - logits.max(-1, keepdims=True))
        p = e / e.sum(-1, keepdims=True)
        expect = (p * cands.values).sum(-1)
        assert np.abs(depth.value - expect).max() < 1e-5

    def test_expected_depth_within_bounds(self):
        rng = np.random.default_rng(9)
        cands = cv.sample_candidates(geo.DepthRange(2.0, 7.0), 12)
        logits = rng.normal(scale=5.0, size=(6, 6, 12)).astype(np.float32)
        _, depth = cv.to_depth(ops.constant(logits), cands)
        assert depth.value.min() >= 2.0 - 1e-5
        assert depth.value.max() <= 7.0 + 1e-5

    def test_strong_sharpening_moves_toward_argmax(self):
        # Moderate sharpening can transiently move the expectation away when
        # runner-up planes trade mass, so the check uses a clear top margin
        # and a large sharpening factor.
        rng = np.random.default_rng(10)
        cands = cv.sample_candidates(geo.DepthRange(1.0, 5.0), 10)
        for _ in range(50):
            logits = rng.normal(size=(10,)).astype(np.float32)
            top = np.argmax(logits)
            logits[top] += 0.5  # enforce a margin
            d1 = cv.to_depth(ops.constant(logits.reshape(1, 1, -1)), cands)[1].value[0, 0]
            d16 = cv.to_depth(ops.constant((16 * logits).reshape(1, 1, -1)), cands)[1].value[0, 0]
            target = cands.values[top]
            assert abs(d16 - target) <= abs(d1 - target) + 1e-6
