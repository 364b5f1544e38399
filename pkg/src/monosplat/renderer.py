"""Tile-based splatting of Gaussian sets with analytic gradients.

Forward: project each Gaussian (EWA: Sigma2 = J W Sigma W^T J^T + lowpass*I),
bin to tiles with a conservative cull radius derived from the alpha cutoff,
then composite front to back per pixel. A Gaussian is skipped for a tile
only when no pixel of the tile could reach the alpha cutoff, which keeps the
tiled path equal to the brute-force reference everywhere, not just where
culling is inactive.

Per-splat alpha is clamped to 0.99 and compositing stops before a splat
would push transmittance below 1e-4; both renderers use the identical rule.

Backward: per-pixel replay of the compositing recurrence, chained through
the conic, the projection Jacobian, the scale/rotation factorization, and
the spherical-harmonic color path.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .gaussians import GaussianSet, quat_to_rotmat
from .numerics.tensor import DTYPE, check_finite, storage_dtype

NEAR_PLANE = 0.01
ALPHA_MAX = 0.99
T_STOP = 1e-4


@dataclass
class RenderSettings:
    width: int
    height: int
    background: tuple = (0.0, 0.0, 0.0)
    tile: int = 16
    alpha_cutoff: float = 1.0 / 255.0
    lowpass: float = 0.3

    def __post_init__(self):
        if self.tile < 1:
            raise ValueError("tile must be >= 1")
        if not (0.0 < self.alpha_cutoff < 1.0):
            raise ValueError("alpha_cutoff must lie in (0, 1)")
        if self.width < 1 or self.height < 1:
            raise ValueError("raster extents must be positive")


def settings_for(cam: geo.Camera, **kw) -> RenderSettings:
    return RenderSettings(width=cam.width, height=cam.height, **kw)


# ---------------------------------------------------------------------------
# Spherical harmonics (real, band-major degree <= 3) and direction gradients
# ---------------------------------------------------------------------------

_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.4453057213202769,
       -0.5900435899266435)
SH_C0 = 0.28209479177387814


def sh_basis(dirs: np.ndarray, bands: int) -> np.ndarray:
    """Evaluate the first ``bands`` real SH basis functions at unit dirs."""
    n = len(dirs)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.zeros((n, bands))
    out[:, 0] = SH_C0
    if bands == 1:
        return out
    out[:, 1] = -_C1 * y
    out[:, 2] = _C1 * z
    out[:, 3] = -_C1 * x
    if bands == 4:
        return out
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out[:, 4] = _C2[0] * xy
    out[:, 5] = _C2[1] * yz
    out[:, 6] = _C2[2] * (2 * zz - xx - yy)
    out[:, 7] = _C2[3] * xz
    out[:, 8] = _C2[4] * (xx - yy)
    if bands == 9:
        return out
    out[:, 9] = _C3[0] * y * (3 * xx - yy)
    out[:, 10] = _C3[1] * xy * z
    out[:, 11] = _C3[2] * y * (4 * zz - xx - yy)
    out[:, 12] = _C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    out[:, 13] = _C3[4] * x * (4 * zz - xx - yy)
    out[:, 14] = _C3[5] * z * (xx - yy)
    out[:, 15] = _C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray, bands: int) -> np.ndarray:
    """d(basis_b)/d(dir) as (N, bands, 3); polynomial gradients."""
    n = len(dirs)
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    g = np.zeros((n, bands, 3))
    if bands == 1:
        return g
    g[:, 1, 1] = -_C1
    g[:, 2, 2] = _C1
    g[:, 3, 0] = -_C1
    if bands == 4:
        return g
    g[:, 4, 0] = _C2[0] * y
    g[:, 4, 1] = _C2[0] * x
    g[:, 5, 1] = _C2[1] * z
    g[:, 5, 2] = _C2[1] * y
    g[:, 6, 0] = _C2[2] * (-2 * x)
    g[:, 6, 1] = _C2[2] * (-2 * y)
    g[:, 6, 2] = _C2[2] * (4 * z)
    g[:, 7, 0] = _C2[3] * z
    g[:, 7, 2] = _C2[3] * x
    g[:, 8, 0] = _C2[4] * (2 * x)
    g[:, 8, 1] = _C2[4] * (-2 * y)
    if bands == 9:
        return g
    g[:, 9, 0] = _C3[0] * 6 * x * y
    g[:, 9, 1] = _C3[0] * (3 * x * x - 3 * y * y)
    g[:, 10, 0] = _C3[1] * y * z
    g[:, 10, 1] = _C3[1] * x * z
    g[:, 10, 2] = _C3[1] * x * y
    g[:, 11, 0] = _C3[2] * (-2 * x * y)
    g[:, 11, 1] = _C3[2] * (4 * z * z - x * x - 3 * y * y)
    g[:, 11, 2] = _C3[2] * (8 * y * z)
    g[:, 12, 0] = _C3[3] * (-6 * x * z)
    g[:, 12, 1] = _C3[3] * (-6 * y * z)
    g[:, 12, 2] = _C3[3] * (6 * z * z - 3 * x * x - 3 * y * y)
    g[:, 13, 0] = _C3[4] * (4 * z * z - 3 * x * x - y * y)
    g[:, 13, 1] = _C3[4] * (-2 * x * y)
    g[:, 13, 2] = _C3[4] * (8 * x * z)
    g[:, 14, 0] = _C3[5] * (2 * x * z)
    g[:, 14, 1] = _C3[5] * (-2 * y * z)
    g[:, 14, 2] = _C3[5] * (x * x - y * y)
    g[:, 15, 0] = _C3[6] * (3 * x * x - 3 * y * y)
    g[:, 15, 1] = _C3[6] * (-6 * x * y)
    return g


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

@dataclass
class Projected:
    """Per-Gaussian screen-space quantities (float64), valid entries only."""

    idx: np.ndarray          # indices into the original set
    center: np.ndarray       # (M, 2) pixel coords
    z: np.ndarray            # (M,) view-space depth
    t_cam: np.ndarray        # (M, 3)
    sigma2: np.ndarray       # (M, 2, 2)
    conic: np.ndarray        # (M, 2, 2) inverse of sigma2
    alpha: np.ndarray        # (M,)
    color: np.ndarray        # (M, 3)
    dirs: np.ndarray         # (M, 3) unit view directions (camera -> mu)
    dist: np.ndarray         # (M,) |mu - camera center|
    radius: np.ndarray       # (M,) conservative cutoff radius in pixels
    skipped_degenerate: int = 0


def project_gaussians(gs: GaussianSet, cam: geo.Camera, settings: RenderSettings) -> Projected:
    n = len(gs)
    mu = gs.mu.astype(np.float64)
    t_cam = mu @ cam.R.T + cam.t
    z = t_cam[:, 2]
    alive = z > NEAR_PLANE

    fx, fy = cam.K[0, 0], cam.K[1, 1]
    cx, cy = cam.K[0, 2], cam.K[1, 2]
    zs = np.where(alive, z, 1.0)
    center = np.stack([fx * t_cam[:, 0] / zs + cx, fy * t_cam[:, 1] / zs + cy], axis=1)

    rot = quat_to_rotmat(gs.rot)
    s2 = gs.scale.astype(np.float64) ** 2
    sigma3 = np.einsum("nij,nj,nkj->nik", rot, s2, rot)

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = fx / zs
    J[:, 0, 2] = -fx * t_cam[:, 0] / zs**2
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * t_cam[:, 1] / zs**2
    M = J @ cam.R
    sigma2 = M @ sigma3 @ M.transpose(0, 2, 1)
    sigma2[:, 0, 0] += settings.lowpass
    sigma2[:, 1, 1] += settings.lowpass

    det = sigma2[:, 0, 0] * sigma2[:, 1, 1] - sigma2[:, 0, 1] * sigma2[:, 1, 0]
    degenerate = alive & (det < 1e-12)
    alive &= det >= 1e-12

    alpha = gs.alpha.astype(np.float64)
    alive &= alpha > settings.alpha_cutoff   # below cutoff at the very peak

    idx = np.nonzero(alive)[0]
    center, z, t_cam = center[idx], z[idx], t_cam[idx]
    sigma2, det, alpha = sigma2[idx], det[idx], alpha[idx]

    conic = np.empty_like(sigma2)
    conic[:, 0, 0] = sigma2[:, 1, 1] / det
    conic[:, 1, 1] = sigma2[:, 0, 0] / det
    conic[:, 0, 1] = -sigma2[:, 0, 1] / det
    conic[:, 1, 0] = -sigma2[:, 1, 0] / det

    # largest eigenvalue of sigma2 bounds the Mahalanobis ball from below
    tr = sigma2[:, 0, 0] + sigma2[:, 1, 1]
    gap = np.sqrt(np.maximum((sigma2[:, 0, 0] - sigma2[:, 1, 1]) ** 2
                             + 4 * sigma2[:, 0, 1] ** 2, 0.0))
    lam_max = 0.5 * (tr + gap)
    radius = np.sqrt(2.0 * lam_max * np.log(alpha / settings.alpha_cutoff))

    origin = cam.center
    offs = gs.mu[idx].astype(np.float64) - origin
    dist = np.linalg.norm(offs, axis=1)
    dirs = offs / np.maximum(dist[:, None], 1e-12)
    basis = sh_basis(dirs, gs.sh_bands)
    color = np.einsum("ncb,nb->nc", gs.sh[idx].astype(np.float64), basis)

    return Projected(idx=idx, center=center, z=z, t_cam=t_cam, sigma2=sigma2,
                     conic=conic, alpha=alpha, color=color, dirs=dirs, dist=dist,
                     radius=radius, skipped_degenerate=int(degenerate.sum()))


# ---------------------------------------------------------------------------
# Shared compositing arithmetic
# ---------------------------------------------------------------------------

def _splat_alphas(px: np.ndarray, center: np.ndarray, conic: np.ndarray,
                  alpha: np.ndarray, cutoff: float) -> np.ndarray:
    """(P, M) per-pixel splat alphas, cutoff-zeroed and clamped."""
    d = px[:, None, :] - center[None, :, :]
    power = -0.5 * (
        conic[None, :, 0, 0] * d[..., 0] ** 2
        + (conic[None, :, 0, 1] + conic[None, :, 1, 0]) * d[..., 0] * d[..., 1]
        + conic[None, :, 1, 1] * d[..., 1] ** 2
    )
    a = alpha[None, :] * np.exp(np.minimum(power, 0.0))
    a = np.minimum(a, ALPHA_MAX)
    a[a < cutoff] = 0.0
    return a


def _composite(a: np.ndarray):
    """Front-to-back compositing terms for z-sorted alphas (P, M).

    Returns weights (P, M), final transmittance (P,), and the inclusion
    mask. A splat that would push transmittance below T_STOP is excluded and
    stops the pixel (sticky), matching the forward loop of the classic tile
    rasterizer.
    """
    one_minus = 1.0 - a
    t_before = np.empty_like(a)
    t_before[:, 0] = 1.0
    if a.shape[1] > 1:
        t_before[:, 1:] = np.cumprod(one_minus[:, :-1], axis=1)
    t_after = t_before * one_minus
    ok = t_after >= T_STOP
    include = np.cumprod(ok.astype(np.float64), axis=1)
    weights = t_before * a * include
    t_final = np.prod(np.where(include > 0, one_minus, 1.0), axis=1)
    return weights, t_final, include


# ---------------------------------------------------------------------------
# Renderers
# ---------------------------------------------------------------------------

@dataclass
class RenderState:
    proj: Projected
    tiles: dict                        # (ty, tx) -> candidate order (into proj arrays)
    settings: RenderSettings
    sh_bands: int


@dataclass
class RenderResult:
    image: np.ndarray
    depth: np.ndarray
    transmittance: np.ndarray
    skipped_degenerate: int = 0
    state: RenderState | None = None


def _tile_candidates(proj: Projected, settings: RenderSettings):
    """Binning: per tile, candidate order sorted by (z, original index)."""
    ts = settings.tile
    ntx = (settings.width + ts - 1) // ts
    nty = (settings.height + ts - 1) // ts
    order = np.lexsort((proj.idx, proj.z))
    tiles: dict[tuple, list] = {}
    cx, cy = proj.center[:, 0], proj.center[:, 1]
    r = proj.radius
    x0 = np.clip(np.floor((cx - r) / ts).astype(int), 0, ntx - 1)
    x1 = np.clip(np.floor((cx + r) / ts).astype(int), 0, ntx - 1)
    y0 = np.clip(np.floor((cy - r) / ts).astype(int), 0, nty - 1)
    y1 = np.clip(np.floor((cy + r) / ts).astype(int), 0, nty - 1)
    for rank in order:
        for ty in range(y0[rank], y1[rank] + 1):
            py0, py1 = ty * ts, min((ty + 1) * ts, settings.height) - 1
            dy = max(py0 - cy[rank], cy[rank] - py1, 0.0)
            for tx in range(x0[rank], x1[rank] + 1):
                px0, px1 = tx * ts, min((tx + 1) * ts, settings.width) - 1
                dx = max(px0 - cx[rank], cx[rank] - px1, 0.0)
                if dx * dx + dy * dy > r[rank] ** 2:
                    continue  # no pixel of this tile can reach the cutoff
                tiles.setdefault((ty, tx), []).append(rank)
    return tiles


def _tile_pixels(ty: int, tx: int, settings: RenderSettings):
    ts = settings.tile
    ys = np.arange(ty * ts, min((ty + 1) * ts, settings.height))
    xs = np.arange(tx * ts, min((tx + 1) * ts, settings.width))
    gx, gy = np.meshgrid(xs, ys)
    px = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1).astype(np.float64)
    return px, ys, xs


def render(gs: GaussianSet, cam: geo.Camera, settings: RenderSettings | None = None,
           threads: int = 1, retain_state: bool = False) -> RenderResult:
    """Tile-based forward splatting to image, depth, and transmittance."""
    settings = settings or settings_for(cam)
    if cam.K[0, 0] <= 0 or cam.K[1, 1] <= 0:
        raise ValueError("camera needs positive focal lengths")
    h, w = settings.height, settings.width
    image = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    trans = np.ones((h, w))

    proj = project_gaussians(gs, cam, settings)
    tiles = _tile_candidates(proj, settings)

    def do_tile(key):
        ty, tx = key
        cand = tiles[key]
        px, ys, xs = _tile_pixels(ty, tx, settings)
        a = _splat_alphas(px, proj.center[cand], proj.conic[cand],
                          proj.alpha[cand], settings.alpha_cutoff)
        weights, t_final, _ = _composite(a)
        col = weights @ proj.color[cand]
        dep = weights @ proj.z[cand]
        sl = np.ix_(ys, xs)
        image[sl] = col.reshape(len(ys), len(xs), 3)
        depth[sl] = dep.reshape(len(ys), len(xs))
        trans[sl] = t_final.reshape(len(ys), len(xs))

    keys = sorted(tiles.keys())
    if threads > 1 and len(keys) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(do_tile, keys))
    else:
        for key in keys:
            do_tile(key)

    bg = np.asarray(settings.background, dtype=np.float64)
    image += trans[..., None] * bg
    result = RenderResult(
        image=image.astype(storage_dtype()),
        depth=depth.astype(storage_dtype()),
        transmittance=trans.astype(storage_dtype()),
        skipped_degenerate=proj.skipped_degenerate,
        state=RenderState(proj, tiles, settings, gs.sh_bands) if retain_state else None,
    )
    check_finite(result.image, "rendered image")
    return result


def render_brute(gs: GaussianSet, cam: geo.Camera,
                 settings: RenderSettings | None = None) -> RenderResult:
    """Reference renderer: every Gaussian at every pixel, one global z-sort."""
    settings = settings or settings_for(cam)
    h, w = settings.height, settings.width
    proj = project_gaussians(gs, cam, settings)
    order = np.lexsort((proj.idx, proj.z))

    gx, gy = np.meshgrid(np.arange(w), np.arange(h))
    px = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1).astype(np.float64)
    if len(order):
        a = _splat_alphas(px, proj.center[order], proj.conic[order],
                          proj.alpha[order], settings.alpha_cutoff)
        weights, t_final, _ = _composite(a)
        image = (weights @ proj.color[order]).reshape(h, w, 3)
        depth = (weights @ proj.z[order]).reshape(h, w)
        trans = t_final.reshape(h, w)
    else:
        image = np.zeros((h, w, 3))
        depth = np.zeros((h, w))
        trans = np.ones((h, w))
    image += trans[..., None] * np.asarray(settings.background, dtype=np.float64)
    return RenderResult(
        image=image.astype(storage_dtype()),
        depth=depth.astype(storage_dtype()),
        transmittance=trans.astype(storage_dtype()),
        skipped_degenerate=proj.skipped_degenerate,
    )


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def render_backward(gs: GaussianSet, cam: geo.Camera, settings: RenderSettings,
                    dL_dimage: np.ndarray, state: RenderState | None) -> dict:
    """Analytic gradients of a scalar image loss wrt all Gaussian attributes.

    ``state`` must come from ``render(..., retain_state=True)`` on the same
    inputs. Returns float32 arrays keyed mu, alpha, scale, rot, sh.
    """
    if state is None:
        raise ValueError("render_backward needs the forward state (retain_state=True)")
    proj = state.proj
    settings = state.settings
    g_img = np.asarray(dL_dimage, dtype=np.float64)
    if g_img.shape != (settings.height, settings.width, 3):
        raise ValueError(f"dL_dimage shape {g_img.shape} != raster {settings.height}x{settings.width}x3")

    m = len(proj.idx)
    d_color = np.zeros((m, 3))
    d_alpha_px = np.zeros(m)          # wrt per-splat alpha (pre-clamp handled below)
    d_center = np.zeros((m, 2))
    d_conic = np.zeros((m, 2, 2))
    bg = np.asarray(settings.background, dtype=np.float64)

    for key in sorted(state.tiles.keys()):
        cand = state.tiles[key]
        ty, tx = key
        px, ys, xs = _tile_pixels(ty, tx, settings)
        g_px = g_img[np.ix_(ys, xs)].reshape(-1, 3)
        if not np.any(g_px):
            continue
        center, conic = proj.center[cand], proj.conic[cand]
        a = _splat_alphas(px, center, conic, proj.alpha[cand], settings.alpha_cutoff)
        weights, t_final, include = _composite(a)
        colors = proj.color[cand]

        # color gradient: dL/dc_i = sum_px w_i * g_px
        d_color[cand] += weights.T @ g_px

        # suffix sums S_i = sum_{j>i} w_j c_j + T_fin * bg
        wc = weights[:, :, None] * colors[None, :, :]
        suffix = np.cumsum(wc[:, ::-1, :], axis=1)[:, ::-1, :] - wc
        suffix += (t_final[:, None] * bg[None, :])[:, None, :]

        t_before = np.empty_like(a)
        t_before[:, 0] = 1.0
        if a.shape[1] > 1:
            t_before[:, 1:] = np.cumprod(1.0 - a[:, :-1], axis=1)

        active = (a > 0) & (include > 0)
        inv_om = np.where(active, 1.0 / (1.0 - a), 0.0)
        da = np.einsum("pc,pmc->pm", g_px, t_before[:, :, None] * colors[None, :, :]
                       - suffix * inv_om[:, :, None])
        da *= active

        # chain through clamp and the exponential
        unclamped = a < ALPHA_MAX
        d_alpha_px_tile = da * unclamped
        d = px[:, None, :] - center[None, :, :]
        # d power/d center = conic @ d ; d a/d power = a
        apow = d_alpha_px_tile * a
        cd0 = conic[None, :, 0, 0] * d[..., 0] + 0.5 * (conic[None, :, 0, 1] + conic[None, :, 1, 0]) * d[..., 1]
        cd1 = conic[None, :, 1, 1] * d[..., 1] + 0.5 * (conic[None, :, 0, 1] + conic[None, :, 1, 0]) * d[..., 0]
        d_center[cand, 0] += (apow * cd0).sum(axis=0)
        d_center[cand, 1] += (apow * cd1).sum(axis=0)
        # d power/d conic = -1/2 d d^T
        d_conic[cand, 0, 0] += (-0.5 * apow * d[..., 0] ** 2).sum(axis=0)
        d_conic[cand, 0, 1] += (-0.5 * apow * d[..., 0] * d[..., 1]).sum(axis=0)
        d_conic[cand, 1, 0] += (-0.5 * apow * d[..., 0] * d[..., 1]).sum(axis=0)
        d_conic[cand, 1, 1] += (-0.5 * apow * d[..., 1] ** 2).sum(axis=0)
        # d a/d alpha = a / alpha (a = alpha * exp(power))
        d_alpha_px[cand] += (d_alpha_px_tile * a / proj.alpha[cand][None, :]).sum(axis=0)

    # conic -> sigma2 (A = Sigma2^-1: dSigma2 = -A dA A)
    A = proj.conic
    d_sigma2 = -A @ d_conic @ A

    # sigma2 = M Sigma3 M^T + lowpass I with M = J R
    fx, fy = cam.K[0, 0], cam.K[1, 1]
    rot = quat_to_rotmat(gs.rot[proj.idx])
    s = gs.scale[proj.idx].astype(np.float64)
    sigma3 = np.einsum("nij,nj,nkj->nik", rot, s**2, rot)
    z = proj.t_cam[:, 2]
    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * proj.t_cam[:, 0] / z**2
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * proj.t_cam[:, 1] / z**2
    M = J @ cam.R

    d_sym = d_sigma2 + d_sigma2.transpose(0, 2, 1)
    d_M = d_sym @ M @ sigma3
    d_sigma3 = M.transpose(0, 2, 1) @ d_sigma2 @ M
    d_J = d_M @ cam.R.T

    d_tcam = np.zeros((m, 3))
    d_tcam[:, 0] += d_J[:, 0, 2] * (-fx / z**2)
    d_tcam[:, 1] += d_J[:, 1, 2] * (-fy / z**2)
    d_tcam[:, 2] += (
        d_J[:, 0, 0] * (-fx / z**2)
        + d_J[:, 1, 1] * (-fy / z**2)
        + d_J[:, 0, 2] * (2 * fx * proj.t_cam[:, 0] / z**3)
        + d_J[:, 1, 2] * (2 * fy * proj.t_cam[:, 1] / z**3)
    )
    d_tcam[:, 0] += d_center[:, 0] * fx / z
    d_tcam[:, 1] += d_center[:, 1] * fy / z
    d_tcam[:, 2] += (
        d_center[:, 0] * (-fx * proj.t_cam[:, 0] / z**2)
        + d_center[:, 1] * (-fy * proj.t_cam[:, 1] / z**2)
    )
    d_mu = d_tcam @ cam.R

    # sigma3 = Rq diag(s^2) Rq^T
    d_sig3_sym = d_sigma3 + d_sigma3.transpose(0, 2, 1)
    d_D = np.einsum("nji,njk,nkl->nil", rot, d_sigma3, rot)
    d_scale = 2 * s * np.einsum("nii->ni", d_D)
    d_Rq = d_sig3_sym @ rot * s[:, None, :] ** 2

    d_qhat = _rotmat_quat_vjp(gs.rot[proj.idx], d_Rq)
    q = gs.rot[proj.idx].astype(np.float64)
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    qhat = q / qn
    d_rot = (d_qhat - qhat * (d_qhat * qhat).sum(axis=1, keepdims=True)) / qn

    # color path: c = sh . basis(dir); dir = (mu - origin)/r
    basis = sh_basis(proj.dirs, state.sh_bands)
    d_sh = d_color[:, :, None] * basis[:, None, :]
    bgrad = sh_basis_grad(proj.dirs, state.sh_bands)
    sh_active = gs.sh[proj.idx].astype(np.float64)
    d_dirs = np.einsum("nc,ncb,nbk->nk", d_color, sh_active, bgrad)
    r = proj.dist[:, None]
    d_mu += (d_dirs - proj.dirs * (d_dirs * proj.dirs).sum(axis=1, keepdims=True)) / r

    n = len(gs)
    grads = {
        "mu": np.zeros((n, 3), dtype=DTYPE),
        "alpha": np.zeros((n,), dtype=DTYPE),
        "scale": np.zeros((n, 3), dtype=DTYPE),
        "rot": np.zeros((n, 4), dtype=DTYPE),
        "sh": np.zeros((n, 3, state.sh_bands), dtype=DTYPE),
    }
    grads["mu"][proj.idx] = d_mu.astype(DTYPE)
    grads["alpha"][proj.idx] = d_alpha_px.astype(DTYPE)
    grads["scale"][proj.idx] = d_scale.astype(DTYPE)
    grads["rot"][proj.idx] = d_rot.astype(DTYPE)
    grads["sh"][proj.idx] = d_sh.astype(DTYPE)
    return grads


def _rotmat_quat_vjp(q: np.ndarray, d_R: np.ndarray) -> np.ndarray:
    """VJP of the unit-quaternion-to-rotation map: returns dL/d(qhat).

    Uses the analytic partials of R(q) at the normalized quaternion.
    """
    q = q.astype(np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zeros = np.zeros_like(w)

    def stack(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dRdw = 2 * stack([[zeros, -z, y], [z, zeros, -x], [-y, x, zeros]])
    dRdx = 2 * stack([[zeros, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dRdy = 2 * stack([[-2 * y, x, w], [x, zeros, z], [-w, z, -2 * y]])
    dRdz = 2 * stack([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zeros]])

    out = np.stack(
        [
            (d_R * dRdw).sum(axis=(1, 2)),
            (d_R * dRdx).sum(axis=(1, 2)),
            (d_R * dRdy).sum(axis=(1, 2)),
            (d_R * dRdz).sum(axis=(1, 2)),
        ],
        axis=1,
    )
    return out
