"""Plane-sweep cost volume: candidate sampling, correlation, refinement, depth.

Correlation between the reference features and each neighbor's warped
features is normalized by the channel width so softmax temperature does not
depend on feature dimensionality. Samples falling outside a neighbor's
frustum are excluded from the neighbor average; pixels with no valid sample
at a plane hold the sentinel 0 there, and pixels with no valid sample at any
plane are flagged invalid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .blocks import Block, UNet
from .numerics import Node, ops
from .numerics.tensor import DTYPE, check_finite


@dataclass(frozen=True)
class DepthCandidates:
    values: np.ndarray        # (D,) ascending, scene units
    range: geo.DepthRange

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 1 or len(v) < 2:
            raise ValueError("need at least two depth candidates")
        if not np.all(np.diff(v) > 0):
            raise ValueError("candidates must be strictly ascending")

    @property
    def count(self) -> int:
        return len(self.values)

    @property
    def spacing(self) -> float:
        return float(self.values[1] - self.values[0])


def sample_candidates(depth_range: geo.DepthRange, count: int,
                      inverse: bool = False) -> DepthCandidates:
    """Uniform depth candidates from near to far inclusive.

    ``inverse=True`` spaces candidates uniformly in 1/depth instead.
    """
    if count < 2:
        raise ValueError(f"need at least 2 candidates, got {count}")
    if inverse:
        inv = np.linspace(1.0 / depth_range.near, 1.0 / depth_range.far, count)
        values = np.sort(1.0 / inv)
        values[0], values[-1] = depth_range.near, depth_range.far
    else:
        values = np.linspace(depth_range.near, depth_range.far, count)
    return DepthCandidates(values, depth_range)


@dataclass
class CostVolume:
    raw: Node                 # (h, w, D) correlation logits
    validity: np.ndarray      # (h, w) bool: any valid sample at any plane
    refined: Node | None = None


def build(ref_mv: Node, neighbor_mv: list[Node], ref_cam: geo.Camera,
          neighbor_cams: list[geo.Camera], cands: DepthCandidates) -> CostVolume:
    """Correlate warped neighbor features against the reference per plane."""
    if len(neighbor_mv) < 1:
        raise ValueError("need at least one neighbor view")
    if len(neighbor_mv) != len(neighbor_cams):
        raise ValueError("feature/camera count mismatch")
    h, w, c = ref_mv.value.shape
    for nb in neighbor_mv:
        if nb.value.shape != (h, w, c):
            raise ValueError(f"neighbor feature shape {nb.value.shape} != {(h, w, c)}")

    planes = []
    any_valid = np.zeros((h, w), dtype=bool)
    inv_c = 1.0 / c
    for d in cands.values:
        corr_sum = None
        count = np.zeros((h, w), dtype=np.float64)
        for nb, cam in zip(neighbor_mv, neighbor_cams):
            coords, geom_ok = geo.plane_sweep_coords(ref_cam, cam, float(d), w, h)
            warped, samp_ok = ops.bilinear_sample(nb, ops.constant(coords))
            valid = geom_ok & samp_ok
            corr = ops.scale(ops.sum_last(ops.mul(ref_mv, warped)), inv_c)
            masked = ops.mul(corr, ops.constant(valid.astype(DTYPE)))
            corr_sum = masked if corr_sum is None else ops.add(corr_sum, masked)
            count += valid
        recip = np.where(count > 0, 1.0 / np.maximum(count, 1.0), 0.0).astype(DTYPE)
        plane = ops.mul(corr_sum, ops.constant(recip))   # sentinel 0 where no sample
        planes.append(ops.reshape(plane, (h, w, 1)))
        any_valid |= count > 0

    raw = ops.concat(planes, axis=-1)
    check_finite(raw.value, "cost volume")
    return CostVolume(raw=raw, validity=any_valid)


class CostVolumeRefiner(Block):
    """Residual encoder-decoder over [volume, mono, multi-view] channels.

    The output head starts at zero, so an untrained refiner is the identity.
    """

    def __init__(self, planes: int, mv_channels: int, mono_channels: int | None,
                 base: int = 128, rng=None, name="costnet"):
        self.planes = planes
        self.mono_channels = mono_channels
        in_ch = planes + mv_channels + (mono_channels or 0)
        self.unet = UNet(in_ch, base, [1, 1, 1], planes, rng,
                         attn_bottleneck=True, zero_init_out=True, name=name)

    def __call__(self, raw: Node, mono, mv: Node) -> Node:
        if raw.value.shape[-1] != self.planes:
            raise ValueError(f"volume has {raw.value.shape[-1]} planes, expected {self.planes}")
        parts = [raw]
        if self.mono_channels:
            if mono is None:
                raise ValueError("refiner configured with mono features but none given")
            mono = ops.asnode(mono)
            if mono.value.shape[-1] != self.mono_channels:
                raise ValueError(
                    f"mono channels {mono.value.shape[-1]} != configured {self.mono_channels}"
                )
            parts.append(mono)
        parts.append(mv)
        return ops.add(raw, self.unet(ops.concat(parts, axis=-1)))


def to_depth(refined: Node, cands: DepthCandidates) -> tuple[Node, Node]:
    """Softmax over planes, then expected depth per pixel."""
    prob = ops.softmax_last(refined)
    depth = ops.wsum_last(prob, ops.constant(cands.values.astype(DTYPE)))
    return prob, depth
