"""Pinhole cameras, projection, and plane-sweep warping between posed views.

Conventions: world-to-camera extrinsics (x_cam = R x_world + t), pixel
coordinates (u, v) = (column, row) with integer values on pixel centers,
depth = camera-space z. All camera math runs in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_ORTHO_TOL = 1e-5
_MIN_DEPTH = 1e-8


@dataclass(frozen=True)
class Camera:
    K: np.ndarray          # (3,3) intrinsics, pixels
    R: np.ndarray          # (3,3) rotation, world -> camera
    t: np.ndarray          # (3,) translation, world -> camera, scene units
    width: int
    height: int

    def __post_init__(self):
        K = np.ascontiguousarray(np.asarray(self.K, dtype=np.float64).reshape(3, 3))
        R = np.ascontiguousarray(np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        t = np.ascontiguousarray(np.asarray(self.t, dtype=np.float64).reshape(3))
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err >= _ORTHO_TOL:
            raise ValueError(f"rotation not orthonormal (|R^T R - I| = {err:.2e})")
        det = float(np.linalg.det(R))
        if abs(det - 1.0) >= _ORTHO_TOL:
            raise ValueError(f"rotation determinant {det} != 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("intrinsics need positive focal lengths")
        lower = np.abs(np.tril(K, -1)).max()
        if lower > 1e-9:
            raise ValueError("intrinsics must be upper-triangular")
        if self.width < 1 or self.height < 1:
            raise ValueError("image extents must be positive")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    def scaled(self, factor: float, width: int | None = None, height: int | None = None) -> "Camera":
        """Camera for a raster downscaled by ``factor`` (fx, fy, cx, cy / factor)."""
        K = self.K.copy()
        K[0, :] /= factor
        K[1, :] /= factor
        w = width if width is not None else max(1, int(round(self.width / factor)))
        h = height if height is not None else max(1, int(round(self.height / factor)))
        return Camera(K, self.R, self.t, w, h)


@dataclass(frozen=True)
class DepthRange:
    near: float
    far: float

    def __post_init__(self):
        if not (0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got [{self.near}, {self.far}]")


class BehindCameraError(ValueError):
    """Point projects to non-positive camera depth."""


def project(cam: Camera, x) -> tuple[np.ndarray, np.ndarray]:
    """Project world points (...,3) to pixels (...,2) and depths (...)."""
    x = np.asarray(x, dtype=np.float64)
    xc = x @ cam.R.T + cam.t
    z = xc[..., 2]
    if np.any(z <= _MIN_DEPTH):
        raise BehindCameraError("point at or behind the camera plane")
    uvw = xc @ cam.K.T
    return uvw[..., :2] / uvw[..., 2:3], z


def unproject(cam: Camera, pixel, depth) -> np.ndarray:
    """Lift pixels (...,2) at camera depth (...) to world points (...,3)."""
    pixel = np.asarray(pixel, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("unproject needs positive depth")
    ones = np.ones(pixel.shape[:-1] + (1,))
    hom = np.concatenate([pixel, ones], axis=-1)
    rays = hom @ np.linalg.inv(cam.K).T
    xc = rays * depth[..., None]
    return (xc - cam.t) @ cam.R


def camera_rays(cam: Camera) -> np.ndarray:
    """Per-pixel world-space ray directions with unit camera-space z (H,W,3)."""
    us, vs = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    hom = np.stack([us, vs, np.ones_like(us)], axis=-1).astype(np.float64)
    rays_cam = hom @ np.linalg.inv(cam.K).T
    return rays_cam @ cam.R


def plane_sweep_coords(
    ref: Camera, src: Camera, d: float, grid_w: int, grid_h: int
) -> tuple[np.ndarray, np.ndarray]:
    """Source-view pixel coords of each ref-grid pixel back-projected at depth d.

    The cameras are rescaled to the grid resolution. Returns float32 coords
    (grid_h, grid_w, 2) and a boolean mask, False where the 3D point falls
    behind the source camera.
    """
    if d <= 0:
        raise ValueError("plane depth must be positive")
    ref_g = ref.scaled(ref.width / grid_w, grid_w, grid_h)
    src_g = src.scaled(src.width / grid_w, grid_w, grid_h)

    R_rel = src_g.R @ ref_g.R.T
    t_rel = src_g.t - R_rel @ ref_g.t

    us, vs = np.meshgrid(np.arange(grid_w), np.arange(grid_h))
    hom = np.stack([us, vs, np.ones_like(us)], axis=-1).astype(np.float64)
    rays_ref = hom @ np.linalg.inv(ref_g.K).T           # ref camera frame, z = 1
    x_src = d * (rays_ref @ R_rel.T) + t_rel            # source camera frame
    z = x_src[..., 2]
    valid = z > _MIN_DEPTH
    zsafe = np.where(valid, z, 1.0)
    uvw = x_src @ src_g.K.T
    coords = (uvw[..., :2] / zsafe[..., None]).astype(np.float32)
    coords[~valid] = -1.0
    return coords, valid


def nearest_views(cams: list[Camera], i: int, m: int) -> list[int]:
    """Indices of the m cameras closest (by center) to view i, ties by index."""
    n = len(cams)
    if not (0 <= i < n):
        raise ValueError(f"view index {i} out of range")
    if m >= n:
        raise ValueError(f"need m < number of views, got m={m}, n={n}")
    ci = cams[i].center
    order = sorted(
        (float(np.linalg.norm(cams[j].center - ci)), j) for j in range(n) if j != i
    )
    return [j for _, j in order[:m]]


# ---------------------------------------------------------------------------
# Camera file format: UTF-8 text, one JSON object per line per view, with
# K (9 row-major), R (9), t (3), width, height.
# ---------------------------------------------------------------------------

def save_cameras(path, cams: list[Camera]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cam in cams:
            rec = {
                "K": [float(v) for v in cam.K.reshape(-1)],
                "R": [float(v) for v in cam.R.reshape(-1)],
                "t": [float(v) for v in cam.t],
                "width": cam.width,
                "height": cam.height,
            }
            fh.write(json.dumps(rec) + "\n")


def load_cameras(path) -> list[Camera]:
    text = Path(path).read_text(encoding="utf-8").strip()
    if not text:
        raise ValueError(f"{path}: empty camera file")
    if text.startswith("["):
        records = json.loads(text)
    else:
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
    cams = []
    for idx, rec in enumerate(records):
        try:
            cams.append(
                Camera(
                    np.asarray(rec["K"], dtype=np.float64).reshape(3, 3),
                    np.asarray(rec["R"], dtype=np.float64).reshape(3, 3),
                    np.asarray(rec["t"], dtype=np.float64),
                    int(rec["width"]),
                    int(rec["height"]),
                )
            )
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}: bad camera record {idx}: {exc}") from exc
    return cams


def look_at_camera(
    eye, target, up, fx: float, fy: float, width: int, height: int
) -> Camera:
    """Build a camera at ``eye`` looking toward ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    xaxis = np.cross(up, fwd)
    nx = np.linalg.norm(xaxis)
    if nx < 1e-9:
        raise ValueError("up direction parallel to viewing direction")
    xaxis /= nx
    yaxis = np.cross(fwd, xaxis)
    R = np.stack([xaxis, yaxis, fwd])  # rows: camera axes in world frame
    t = -R @ eye
    K = np.array(
        [[fx, 0, (width - 1) / 2.0], [0, fy, (height - 1) / 2.0], [0, 0, 1.0]]
    )
    return Camera(K, R, t, width, height)
