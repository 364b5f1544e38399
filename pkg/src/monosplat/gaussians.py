"""Pixel-aligned Gaussian prediction and the merged primitive set.

Depth, mono, and multi-view maps are upsampled to image resolution, refined
with the input image through an encoder-decoder, and decoded by two heads:
one for position (bounded depth residual around the cost-volume depth,
unprojected along the pixel ray) and opacity, one for scale, rotation, and
spherical-harmonic color. Zero-initialized heads give a neutral start:
opacity 0.5, zero residual, identity rotation, and DC color equal to the
input pixel.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .blocks import Block, Conv2dLayer, UNet
from .numerics import Node, ops
from .numerics.tensor import DTYPE, check_finite

SH_C0 = 0.28209479177387814
DEFAULT_SCALE_BOUNDS = (0.5, 15.0)
_VALID_SH_COUNTS = (1, 4, 9, 16)


@dataclass
class GaussianSet:
    """Flat collection of Gaussian primitives.

    ``sh`` is channel-major: (N, 3, B) with the DC coefficient first.
    ``opacity_logit``/``log_scale`` cache the stored form from a PLY import
    so re-export is bit-exact through the activation round trip.
    """

    mu: np.ndarray
    alpha: np.ndarray
    scale: np.ndarray
    rot: np.ndarray
    sh: np.ndarray
    opacity_logit: np.ndarray | None = field(default=None, repr=False)
    log_scale: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.mu = np.ascontiguousarray(self.mu, dtype=DTYPE).reshape(-1, 3)
        n = len(self.mu)
        self.alpha = np.ascontiguousarray(self.alpha, dtype=DTYPE).reshape(n)
        self.scale = np.ascontiguousarray(self.scale, dtype=DTYPE).reshape(n, 3)
        self.rot = np.ascontiguousarray(self.rot, dtype=DTYPE).reshape(n, 4)
        sh = np.ascontiguousarray(self.sh, dtype=DTYPE)
        if not (sh.ndim == 3 and sh.shape[0] == n and sh.shape[1] == 3):
            sh = sh.reshape(n, 3, -1)
        self.sh = sh
        if self.sh.shape[2] not in _VALID_SH_COUNTS:
            raise ValueError(
                f"sh coefficient count {self.sh.shape[2]} not a complete band set {_VALID_SH_COUNTS}"
            )

    def __len__(self) -> int:
        return len(self.mu)

    @property
    def sh_bands(self) -> int:
        return self.sh.shape[2]

    def validate(self, scale_bounds=DEFAULT_SCALE_BOUNDS, tol: float = 1e-5) -> None:
        """Raise ValueError on any violated type invariant."""
        for name, arr in (("mu", self.mu), ("alpha", self.alpha), ("scale", self.scale),
                          ("rot", self.rot), ("sh", self.sh)):
            check_finite(arr, f"gaussian {name}")
        if np.any(self.alpha <= 0) or np.any(self.alpha >= 1):
            raise ValueError("opacity must lie strictly inside (0, 1)")
        lo, hi = scale_bounds
        if np.any(self.scale < lo - tol) or np.any(self.scale > hi + tol):
            raise ValueError(f"scale outside [{lo}, {hi}]")
        norms = np.linalg.norm(self.rot.astype(np.float64), axis=1)
        if np.abs(norms - 1).max() >= tol:
            raise ValueError("quaternions must be unit-norm")


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (N,4) as (w,x,y,z) to rotation matrices (N,3,3)."""
    q = q.astype(np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def covariance_matrices(gs: GaussianSet) -> np.ndarray:
    """World-space covariances R diag(s^2) R^T, (N,3,3) float64."""
    rot = quat_to_rotmat(gs.rot)
    s2 = (gs.scale.astype(np.float64)) ** 2
    return np.einsum("nij,nj,nkj->nik", rot, s2, rot)


class FeatureRefiner(Block):
    """Full-resolution fusion of depth, mono, multi-view maps and the image."""

    def __init__(self, mv_channels: int, mono_channels: int | None, out_channels: int = 32,
                 base: int = 32, rng=None, name="refine"):
        self.mono_channels = mono_channels
        self.out_channels = out_channels
        in_ch = 1 + mv_channels + (mono_channels or 0) + 3
        self.unet = UNet(in_ch, base, [1, 1, 1, 1, 1], out_channels, rng,
                         attn_bottleneck=True, name=name)

    def __call__(self, depth: Node, mono, mv: Node, image: np.ndarray) -> Node:
        h, w = image.shape[:2]
        dh, dw = depth.value.shape[:2]
        if mv.value.shape[:2] != (dh, dw):
            raise ValueError("depth and multi-view maps must share the quarter resolution")
        parts = [ops.upsample_bilinear(ops.reshape(depth, (dh, dw, 1)), h, w)]
        if self.mono_channels:
            if mono is None:
                raise ValueError("refiner configured with mono features but none given")
            mono = ops.asnode(mono)
            parts.append(ops.upsample_bilinear(mono, h, w))
        parts.append(ops.upsample_bilinear(mv, h, w))
        parts.append(ops.constant(image))
        return self.unet(ops.concat(parts, axis=-1))


class GaussianHeads(Block):
    """Two decoder heads over refined full-resolution features.

    The position head yields a bounded depth residual and an opacity logit;
    the raw head yields scale logits, a quaternion offset from identity, and
    SH coefficients whose DC starts at the input pixel color.
    """

    def __init__(self, in_channels: int, sh_bands: int = 16,
                 scale_bounds=DEFAULT_SCALE_BOUNDS, residual_scale: float | None = None,
                 rng=None, zero_init: bool = False, name="heads"):
        if sh_bands not in _VALID_SH_COUNTS:
            raise ValueError(f"sh_bands must be one of {_VALID_SH_COUNTS}")
        self.sh_bands = sh_bands
        self.scale_bounds = tuple(scale_bounds)
        self.residual_scale = residual_scale
        self.depth_head = Conv2dLayer(in_channels, 2, rng=rng, zero_init=zero_init,
                                      name=f"{name}.depth")
        self.raw_head = Conv2dLayer(in_channels, 3 + 4 + 3 * sh_bands, rng=rng,
                                    zero_init=zero_init, name=f"{name}.raw")

    def __call__(self, feat: Node, depth_q: Node, image: np.ndarray, cam: geo.Camera,
                 depth_range: geo.DepthRange):
        h, w = image.shape[:2]
        n = h * w
        b = self.sh_bands
        res_scale = self.residual_scale
        if res_scale is None:
            res_scale = (depth_range.far - depth_range.near) / 16.0

        d_head = self.depth_head(feat)
        raw = self.raw_head(feat)

        dh, dw = depth_q.value.shape[:2]
        depth_full = ops.upsample_bilinear(ops.reshape(depth_q, (dh, dw, 1)), h, w)
        delta = ops.scale(ops.add(ops.sigmoid(ops.slice_(d_head, (..., slice(0, 1)))), -0.5),
                          2.0 * res_scale)
        depth_out = ops.clamp(ops.add(depth_full, delta), depth_range.near, depth_range.far)
        alpha = ops.sigmoid(ops.slice_(d_head, (..., slice(1, 2))))

        rays = geo.camera_rays(cam).astype(DTYPE)           # (h, w, 3), z-normalized
        center = np.broadcast_to(cam.center.astype(DTYPE), (h, w, 3))
        mu = ops.add(ops.mul(ops.constant(rays), depth_out), ops.constant(center.copy()))

        lo, hi = self.scale_bounds
        scale = ops.add(ops.scale(ops.sigmoid(ops.slice_(raw, (..., slice(0, 3)))), hi - lo), lo)
        quat_raw = ops.slice_(raw, (..., slice(3, 7)))
        identity = np.zeros((1, 1, 4), dtype=DTYPE)
        identity[..., 0] = 1.0
        quat = ops.normalize(ops.add(quat_raw, ops.constant(identity)), "l2", eps=1e-12)

        sh = ops.slice_(raw, (..., slice(7, 7 + 3 * b)))
        dc_offset = np.zeros((h, w, 3 * b), dtype=DTYPE)
        dc_offset[..., 0::b] = image / SH_C0
        sh = ops.add(sh, ops.constant(dc_offset))

        nodes = {
            "mu": ops.reshape(mu, (n, 3)),
            "alpha": ops.reshape(alpha, (n,)),
            "scale": ops.reshape(scale, (n, 3)),
            "rot": ops.reshape(quat, (n, 4)),
            "sh": ops.reshape(sh, (n, 3, b)),
            "depth": ops.reshape(depth_out, (h, w)),
        }
        gs = GaussianSet(
            mu=nodes["mu"].value,
            alpha=nodes["alpha"].value,
            scale=nodes["scale"].value,
            rot=nodes["rot"].value,
            sh=nodes["sh"].value,
        )
        return gs, nodes


def merge(sets: list[GaussianSet]) -> GaussianSet:
    """Union of per-view sets: plain concatenation in view order."""
    if not sets:
        raise ValueError("merge needs at least one set")
    bands = {s.sh_bands for s in sets}
    if len(bands) != 1:
        raise ValueError(f"mismatched SH band counts: {sorted(bands)}")
    return GaussianSet(
        mu=np.concatenate([s.mu for s in sets]),
        alpha=np.concatenate([s.alpha for s in sets]),
        scale=np.concatenate([s.scale for s in sets]),
        rot=np.concatenate([s.rot for s in sets]),
        sh=np.concatenate([s.sh for s in sets]),
    )


# ---------------------------------------------------------------------------
# PLY interchange: binary little-endian, per-vertex
#   x, y, z, opacity (inverse-sigmoid), scale_0..2 (log), rot_0..3,
#   f_dc_0..2, f_rest_0..(3*(B-1)-1)
# ---------------------------------------------------------------------------

def _ply_property_names(bands: int) -> list[str]:
    names = ["x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (bands - 1))]
    return names


def save_ply(path, gs: GaussianSet) -> None:
    n = len(gs)
    b = gs.sh_bands
    if gs.opacity_logit is not None and np.array_equal(
        _sigmoid32(gs.opacity_logit), gs.alpha
    ):
        opacity = gs.opacity_logit
    else:
        a64 = gs.alpha.astype(np.float64)
        opacity = np.log(a64 / (1.0 - a64)).astype(DTYPE)
    if gs.log_scale is not None and np.array_equal(
        np.exp(gs.log_scale.astype(np.float64)).astype(DTYPE), gs.scale
    ):
        log_scale = gs.log_scale
    else:
        log_scale = np.log(gs.scale.astype(np.float64)).astype(DTYPE)

    record = np.concatenate(
        [
            gs.mu,
            opacity.reshape(n, 1),
            log_scale.reshape(n, 3),
            gs.rot,
            gs.sh[:, :, 0],                       # f_dc
            gs.sh[:, :, 1:].reshape(n, 3 * (b - 1)),
        ],
        axis=1,
    ).astype("<f4")

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in _ply_property_names(b)]
    header += ["end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(record).tobytes())


def _sigmoid32(x: np.ndarray) -> np.ndarray:
    return (1.0 / (1.0 + np.exp(-x.astype(np.float64)))).astype(DTYPE)


def load_ply(path) -> GaussianSet:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = fh.readline().strip()
        if fmt != b"format binary_little_endian 1.0":
            raise ValueError(f"{path}: unsupported PLY format {fmt!r}")
        n = None
        props = []
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            line = line.strip()
            if line == b"end_header":
                break
            parts = line.split()
            if parts[0] == b"element":
                if parts[1] != b"vertex":
                    raise ValueError(f"{path}: unexpected element {parts[1]!r}")
                n = int(parts[2])
            elif parts[0] == b"property":
                if parts[1] != b"float":
                    raise ValueError(f"{path}: only float properties supported")
                props.append(parts[2].decode("ascii"))
        if n is None:
            raise ValueError(f"{path}: missing vertex element")
        rest = len(props) - 14
        if rest < 0 or rest % 3:
            raise ValueError(f"{path}: unexpected property count {len(props)}")
        bands = rest // 3 + 1
        if props != _ply_property_names(bands):
            raise ValueError(f"{path}: property layout does not match the export schema")
        payload = fh.read(4 * n * len(props))
        if len(payload) != 4 * n * len(props):
            raise ValueError(f"{path}: truncated payload")
    record = np.frombuffer(payload, dtype="<f4").reshape(n, len(props)).astype(DTYPE)
    opacity_logit = record[:, 3].copy()
    log_scale = record[:, 4:7].copy()
    sh = np.concatenate(
        [record[:, 11:14].reshape(n, 3, 1), record[:, 14:].reshape(n, 3, bands - 1)],
        axis=2,
    )
    gs = GaussianSet(
        mu=record[:, 0:3],
        alpha=_sigmoid32(opacity_logit),
        scale=np.exp(log_scale.astype(np.float64)).astype(DTYPE),
        rot=record[:, 7:11],
        sh=sh,
        opacity_logit=opacity_logit,
        log_scale=log_scale,
    )
    check_finite(gs.mu, "ply positions")
    return gs
