"""Shared rectified-stereo plane scenario for depth-recovery checks.

A fronto-parallel textured plane rendered analytically into two rectified
views. The texture is band-limited so bilinear warps stay well-posed; the
true depth sits between candidate planes (0.2 of a spacing off the nearest).
"""

import numpy as np

from monosplat import costvolume as cv
from monosplat import features as ft
from monosplat import geometry as geo
from monosplat.numerics import ops


def band_limited_texture(seed, waves=16, f_lo=0.35, f_hi=1.0):
    rng = np.random.default_rng(seed)
    mag = rng.uniform(f_lo, f_hi, size=waves)
    ang = rng.uniform(0, 2 * np.pi, size=waves)
    freqs = np.stack([mag * np.cos(ang), mag * np.sin(ang)], axis=-1)
    phases = rng.uniform(0, 2 * np.pi, size=(waves, 3))
    amps = rng.uniform(0.5, 1.0, size=(waves, 3))

    def tex(x, y):
        out = np.zeros(x.shape + (3,))
        for k in range(waves):
            arg = freqs[k, 0] * x + freqs[k, 1] * y
            for c in range(3):
                out[..., c] += amps[k, c] * np.sin(arg + phases[k, c])
        return (out / (2 * waves) + 0.5).astype(np.float32)

    return tex


def stereo_plane_recovery(seed=0, res=256, depth_planes=64, near=1.0, far=16.0,
                          target_plane=6, plane_offset=0.2, baseline=0.8,
                          texture_scale=18.0):
    """Build the scenario, run the cost volume, and return recovery stats."""
    f = float(res)
    w = h = res
    spacing = (far - near) / (depth_planes - 1)
    depth_true = near + (target_plane + plane_offset) * spacing
    tex = band_limited_texture(seed)
    K = np.array([[f, 0, (w - 1) / 2], [0, f, (h - 1) / 2], [0, 0, 1.0]])
    ref = geo.Camera(K, np.eye(3), np.zeros(3), w, h)
    src = geo.Camera(K, np.eye(3), np.array([-baseline, 0.0, 0.0]), w, h)

    def render(cam):
        us, vs = np.meshgrid(np.arange(w), np.arange(h))
        x = (us - cam.K[0, 2]) / cam.K[0, 0] * depth_true
        y = (vs - cam.K[1, 2]) / cam.K[1, 1] * depth_true
        # plane point in world coords (R = I): x_world = x_cam - t
        return tex((x - cam.t[0]) * texture_scale, (y - cam.t[1]) * texture_scale)

    provider = ft.SyntheticFeatureProvider(
        seed=5, enc_channels=None, patch_size=7, feature_scale=4.0
    )
    feat_ref = provider.extract(render(ref))[0][0]
    feat_src = provider.extract(render(src))[0][0]

    cands = cv.sample_candidates(geo.DepthRange(near, far), depth_planes)
    vol = cv.build(ops.constant(feat_ref), [ops.constant(feat_src)], ref, [src], cands)

    hh, ww = feat_ref.shape[:2]
    coords, valid = geo.plane_sweep_coords(ref, src, depth_true, ww, hh)
    interior = valid & (coords[..., 0] >= 2) & (coords[..., 0] <= ww - 3)
    interior[:2, :] = interior[-2:, :] = False
    interior[:, :2] = interior[:, -2:] = False

    best = np.argmax(vol.raw.value, axis=-1)
    target = int(np.argmin(np.abs(cands.values - depth_true)))
    argmax_hit = float((best == target)[interior].mean())
    _, depth = cv.to_depth(vol.raw, cands)
    depth_err = np.abs(depth.value - depth_true)[interior]
    expected_ok = float((depth_err <= spacing).mean())
    return {
        "argmax_hit": argmax_hit,
        "expected_ok": expected_ok,
        "interior_count": int(interior.sum()),
        "spacing": spacing,
        "depth_true": depth_true,
        "volume": vol,
        "candidates": cands,
    }
