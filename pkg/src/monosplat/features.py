"""Monocular feature providers and the mono-to-multi-view adapter.

The provider stands in for a frozen pretrained backbone: the synthetic
backend is deterministic, mirror-equivariant, and discriminative enough for
cost-volume matching; the file backend loads exported MTF tensors. Provider
outputs never receive gradients.

Downstream, trainable stages fuse the multi-scale hierarchy to a single
H/4 map and exchange information across views with windowed attention.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocks import Block, Conv2dLayer, Linear, ResBlock, WindowAttention
from .numerics import Node, Parameter, leaf, ops, read_mtf
from .numerics.tensor import DTYPE

SCALE_FACTORS = (4, 8, 16, 32)
DEFAULT_LAYER_IDS = (2, 5, 8, 11)


def scale_extent(x: int, factor: int) -> int:
    return max(1, int(round(x / factor)))


def _adaptive_avg_pool(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Exact fractional-cell average pooling (float64), flip-equivariant."""
    h, w = img.shape[:2]
    if h % oh == 0 and w % ow == 0:
        fy, fx = h // oh, w // ow
        return (
            img.astype(np.float64)
            .reshape(oh, fy, ow, fx, img.shape[2])
            .mean(axis=(1, 3))
        )

    def axis_weights(n, m):
        # overlap of source cell [j, j+1) with output cell [i*n/m, (i+1)*n/m)
        wts = np.zeros((m, n))
        for i in range(m):
            lo, hi = i * n / m, (i + 1) * n / m
            j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
            for j in range(j0, min(j1, n)):
                wts[i, j] = max(0.0, min(j + 1, hi) - max(j, lo))
        return wts / (n / m)

    wy = axis_weights(h, oh)
    wx = axis_weights(w, ow)
    out = np.einsum("ih,jw,hwc->ijc", wy, wx, img.astype(np.float64))
    return out


def _orthogonal_patch_bases(rng: np.random.Generator, ksize: int, in_ch: int):
    """Random orthonormal projection bases of the k x k x in_ch patch space.

    The patch space splits under horizontal flip into an even and an odd
    subspace; each gets a canonical orthonormal basis, randomly rotated
    within the subspace. Even responses are mirror-equivariant as-is, odd
    responses flip sign under mirroring (their magnitudes are equivariant).
    Orthonormality preserves patch dot products, which keeps cost-volume
    correlation as sharp as raw patch matching.
    """
    d = ksize * ksize * in_ch
    even, odd = [], []
    for i in range(ksize):
        for j in range(ksize):
            jm = ksize - 1 - j
            for c in range(in_ch):
                vec = np.zeros(d)
                idx = (i * ksize + j) * in_ch + c
                mdx = (i * ksize + jm) * in_ch + c
                if j < jm:
                    vec[idx] = vec[mdx] = 1.0 / np.sqrt(2.0)
                    even.append(vec)
                    vec2 = np.zeros(d)
                    vec2[idx], vec2[mdx] = 1.0 / np.sqrt(2.0), -1.0 / np.sqrt(2.0)
                    odd.append(vec2)
                elif j == jm:
                    vec[idx] = 1.0
                    even.append(vec)
    even = np.stack(even)
    odd = np.stack(odd)

    def rotate(basis):
        n = len(basis)
        q, _ = np.linalg.qr(rng.normal(size=(n, n)))
        return q @ basis

    return rotate(even), rotate(odd)


def _patch_stack(img: np.ndarray, ksize: int) -> np.ndarray:
    """(H, W, k*k*C) matrix of replicate-padded local patches."""
    h, w = img.shape[:2]
    p = ksize // 2
    pad = np.pad(img, ((p, p), (p, p), (0, 0)), mode="edge")
    parts = [
        pad[di : di + h, dj : dj + w]
        for di in range(ksize)
        for dj in range(ksize)
    ]
    return np.concatenate(parts, axis=-1)


def _grad_channels(img: np.ndarray) -> np.ndarray:
    """|horizontal gradient| and signed vertical gradient of intensity."""
    gray = img.astype(np.float64).mean(axis=2)
    padx = np.pad(gray, ((0, 0), (1, 1)), mode="edge")
    pady = np.pad(gray, ((1, 1), (0, 0)), mode="edge")
    gx = 0.5 * (padx[:, 2:] - padx[:, :-2])
    gy = 0.5 * (pady[2:, :] - pady[:-2, :])
    return np.stack([np.abs(gx), gy], axis=-1)


def _standardize_channels(maps: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance per channel map.

    Keeps feature dot products discriminative for matching (a DC component
    would dominate the correlation) and preserves mirror equivariance.
    """
    mu = maps.mean(axis=(0, 1), keepdims=True)
    sd = maps.std(axis=(0, 1), keepdims=True)
    return (maps - mu) / (sd + 1e-6)


class SyntheticFeatureProvider:
    """Deterministic frozen feature extractor from seeded orthogonal projections.

    Per scale: the image is average-pooled, local patches are projected onto
    a random orthonormal basis (flip-even responses kept signed, flip-odd as
    magnitudes), and gradient channels are appended. Mirroring the input
    mirrors every output map. Dot products of the signed responses equal
    patch dot products, which keeps cost-volume correlation sharp.

    ``enc_channels=None`` keeps the complete basis (maximal matching
    fidelity); an integer truncates it, splitting channels between the even
    and odd subspaces proportionally.
    """

    backend = "synthetic"

    _GAIN = 2.0  # pre-tanh response gain; keeps tanh near its linear region

    def __init__(self, seed: int = 0, enc_channels: int | None = 64,
                 mono_channels: int | None = 32, feature_scale: float = 3.0,
                 patch_size: int = 5, layer_ids=DEFAULT_LAYER_IDS):
        self.seed = int(seed)
        self.feature_scale = float(feature_scale)
        self.patch_size = int(patch_size)
        self.layer_ids = list(layer_ids)
        self._scale_bases = [
            self._make_basis(np.random.default_rng(self.seed * 1000 + s), enc_channels)
            for s in range(len(SCALE_FACTORS))
        ]
        self._mono_basis = self._make_basis(
            np.random.default_rng(self.seed * 1000 + 777), mono_channels
        )
        self.enc_channels = self._scale_bases[0][0].shape[0] + self._scale_bases[0][1].shape[0] + 2
        self.mono_channels = self._mono_basis[0].shape[0] + self._mono_basis[1].shape[0] + 2

    def _make_basis(self, rng, channels):
        even, odd = _orthogonal_patch_bases(rng, self.patch_size, 3)
        if channels is not None:
            keep = max(int(channels) - 2, 1)
            n_even = min(len(even), max(1, round(keep * len(even) / (len(even) + len(odd)))))
            n_odd = min(len(odd), keep - n_even)
            even, odd = even[:n_even], odd[:n_odd]
        return even, odd

    def _featurize(self, pooled: np.ndarray, basis) -> np.ndarray:
        even, odd = basis
        patches = _patch_stack(pooled, self.patch_size)
        signed = np.tanh(self._GAIN * (patches @ even.T))
        magn = np.tanh(self._GAIN * np.abs(patches @ odd.T)) if len(odd) else \
            np.zeros(pooled.shape[:2] + (0,))
        maps = _standardize_channels(
            np.concatenate([signed, magn, _grad_channels(pooled)], axis=-1)
        )
        # per-pixel unit vectors: correlation becomes cosine similarity with a
        # uniform self-match level of feature_scale^2 regardless of contrast
        c = maps.shape[-1]
        norms = np.linalg.norm(maps, axis=-1, keepdims=True)
        maps = maps / (norms + 1e-6) * np.sqrt(c)
        return (self.feature_scale * maps).astype(DTYPE)

    def extract(self, image: np.ndarray, view: int = 0):
        h, w = image.shape[:2]
        if h % 16 or w % 16:
            raise ValueError(f"image extents must be divisible by 16, got {h}x{w}")
        scales = []
        for s, factor in enumerate(SCALE_FACTORS):
            pooled = _adaptive_avg_pool(image, scale_extent(h, factor), scale_extent(w, factor))
            scales.append(self._featurize(pooled, self._scale_bases[s]))
        pooled = _adaptive_avg_pool(image, scale_extent(h, 4), scale_extent(w, 4))
        mono = self._featurize(pooled, self._mono_basis)
        return scales, mono

    def state_hash(self) -> str:
        acc = hashlib.sha256()
        for even, odd in self._scale_bases + [self._mono_basis]:
            acc.update(np.ascontiguousarray(even).tobytes())
            acc.update(np.ascontiguousarray(odd).tobytes())
        return acc.hexdigest()


class FileFeatureProvider:
    """Loads per-view features from ``view_<i>_scale_<s>.mtf`` + ``view_<i>_mono.mtf``."""

    backend = "file"

    def __init__(self, directory, layer_ids=DEFAULT_LAYER_IDS):
        self.directory = Path(directory)
        self.layer_ids = list(layer_ids)
        if not self.directory.is_dir():
            raise ValueError(f"feature directory not found: {self.directory}")
        # channel widths come from the first view's files
        probe_scale = self.directory / "view_0_scale_0.mtf"
        probe_mono = self.directory / "view_0_mono.mtf"
        if not probe_scale.exists() or not probe_mono.exists():
            raise ValueError(
                f"{self.directory}: need view_0_scale_0.mtf and view_0_mono.mtf"
            )
        self.enc_channels = int(read_mtf(probe_scale).shape[-1])
        self.mono_channels = int(read_mtf(probe_mono).shape[-1])

    def extract(self, image: np.ndarray, view: int = 0):
        h, w = image.shape[:2]
        if h % 16 or w % 16:
            raise ValueError(f"image extents must be divisible by 16, got {h}x{w}")
        scales = []
        for s, factor in enumerate(SCALE_FACTORS):
            path = self.directory / f"view_{view}_scale_{s}.mtf"
            if not path.exists():
                raise ValueError(f"missing feature file {path}")
            arr = read_mtf(path)
            expect = (scale_extent(h, factor), scale_extent(w, factor))
            if arr.shape[:2] != expect:
                raise ValueError(
                    f"{path}: shape {arr.shape[:2]} does not match expected {expect}"
                )
            if arr.shape[-1] != self.enc_channels:
                raise ValueError(
                    f"{path}: {arr.shape[-1]} channels != view 0's {self.enc_channels}"
                )
            scales.append(arr)
        mono_path = self.directory / f"view_{view}_mono.mtf"
        if not mono_path.exists():
            raise ValueError(f"missing feature file {mono_path}")
        mono = read_mtf(mono_path)
        if mono.shape[:2] != (scale_extent(h, 4), scale_extent(w, 4)):
            raise ValueError(f"{mono_path}: bad mono shape {mono.shape}")
        if mono.shape[-1] != self.mono_channels:
            raise ValueError(
                f"{mono_path}: {mono.shape[-1]} channels != view 0's {self.mono_channels}"
            )
        return scales, mono

    def state_hash(self) -> str:
        acc = hashlib.sha256()
        for path in sorted(self.directory.glob("*.mtf")):
            acc.update(path.read_bytes())
        return acc.hexdigest()


@dataclass
class FeatureBundle:
    """Per-view features: raw hierarchy, fused map, mono map, multi-view map."""

    scales: list
    fused: object = None     # Node, H/4 x W/4 x C
    mono: object = None      # np.ndarray, H/4 x W/4 x C_mono
    mv: object = None        # Node, H/4 x W/4 x C_mv
    meta: dict = field(default_factory=dict)


class DptFusion(Block):
    """Progressive coarse-to-fine fusion of the feature hierarchy.

    Each scale gets a 1x1 projection to the output width; coarser
    accumulations are bilinearly upsampled and merged with the next finer
    projection through a residual block. A single scale degenerates to its
    projection alone.
    """

    def __init__(self, in_channels, out_dim=64, rng=None, name="dpt"):
        self.out_dim = out_dim
        self.proj = [
            Conv2dLayer(c, out_dim, k=1, padding=0, rng=rng, name=f"{name}.proj{s}")
            for s, c in enumerate(in_channels)
        ]
        self.fuse = [
            ResBlock(out_dim, out_dim, rng, name=f"{name}.fuse{s}")
            for s in range(len(in_channels) - 1)
        ]

    def __call__(self, scales: list[Node]) -> Node:
        if len(scales) != len(self.proj):
            raise ValueError(f"expected {len(self.proj)} scales, got {len(scales)}")
        shapes = [s.value.shape[:2] for s in scales]
        for finer, coarser in zip(shapes, shapes[1:]):
            if coarser[0] > finer[0] or coarser[1] > finer[1]:
                raise ValueError(f"scales must go fine to coarse, got {shapes}")
        x = self.proj[-1](scales[-1])
        for s in range(len(scales) - 2, -1, -1):
            fine = self.proj[s](scales[s])
            up = ops.upsample_bilinear(x, *fine.value.shape[:2])
            x = self.fuse[s](ops.add(fine, up))
        return x


class CrossViewAttention(Block):
    """Stacked windowed self-attention + neighbor cross-attention blocks.

    Weights are shared across views. A learned per-view embedding
    (zero-initialized, so views start indistinguishable) is added once at
    entry. Cross-attention runs against each neighbor's post-self-attention
    features and the per-neighbor outputs are averaged.
    """

    def __init__(self, dim=64, window=8, depth=3, heads=1, max_views=16, rng=None,
                 name="crossview"):
        self.dim = dim
        self.window = window
        self.pos = Parameter(np.zeros((max_views, dim), dtype=DTYPE), name=f"{name}.pos")
        self.self_attn = [
            WindowAttention(dim, window, rng, heads=heads, name=f"{name}.b{i}.self")
            for i in range(depth)
        ]
        self.cross_attn = [
            WindowAttention(dim, window, rng, heads=heads, name=f"{name}.b{i}.cross")
            for i in range(depth)
        ]

    def _embed(self, x: Node, view_id: int) -> Node:
        emb = ops.reshape(ops.slice_(leaf(self.pos), (slice(view_id, view_id + 1),)), (1, 1, self.dim))
        return ops.add(x, emb)

    def __call__(self, fused_i: Node, neighbors: list[Node], view_id: int = 0,
                 neighbor_ids: list[int] | None = None):
        if fused_i.value.shape[-1] != self.dim:
            raise ValueError(f"feature dim {fused_i.value.shape[-1]} != attention dim {self.dim}")
        neighbor_ids = neighbor_ids or list(range(1, len(neighbors) + 1))
        meta = {"self_only": len(neighbors) == 0}
        x = self._embed(fused_i, view_id)
        nbrs = [self._embed(nb, nid) for nb, nid in zip(neighbors, neighbor_ids)]
        for sa, ca in zip(self.self_attn, self.cross_attn):
            x = ops.add(x, sa(ops.normalize(x, "standard")))
            nbrs = [ops.add(nb, sa(ops.normalize(nb, "standard"))) for nb in nbrs]
            if nbrs:
                contribs = [ca(ops.normalize(x, "standard"), ops.normalize(nb, "standard")) for nb in nbrs]
                acc = contribs[0]
                for c in contribs[1:]:
                    acc = ops.add(acc, c)
                x = ops.add(x, ops.scale(acc, 1.0 / len(contribs)))
        return x, meta


def extract(provider, image: np.ndarray, view: int = 0):
    """Frozen multi-scale + mono features for one view (numpy arrays)."""
    return provider.extract(image, view)
