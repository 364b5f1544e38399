"""Ground-truth scenes: textured planes and spheres with analytic depth.

The ray tracer here is the independent photometric reference for the
pipeline; it shares no rendering code with the splatting rasterizer.
Textures are band-limited sinusoid mixtures so bilinear warps of rendered
images stay well-posed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .numerics.tensor import DTYPE

_MIN_HIT = 1e-6


def procedural_texture(seed: int, waves: int = 12, f_lo: float = 0.35, f_hi: float = 1.0):
    """Deterministic band-limited RGB texture over the plane (u, v)."""
    rng = np.random.default_rng(seed)
    mag = rng.uniform(f_lo, f_hi, size=waves)
    ang = rng.uniform(0, 2 * np.pi, size=waves)
    freqs = np.stack([mag * np.cos(ang), mag * np.sin(ang)], axis=-1)
    phases = rng.uniform(0, 2 * np.pi, size=(waves, 3))
    amps = rng.uniform(0.5, 1.0, size=(waves, 3))

    def tex(u, v):
        out = np.zeros(np.shape(u) + (3,))
        for k in range(waves):
            arg = freqs[k, 0] * u + freqs[k, 1] * v
            for c in range(3):
                out[..., c] += amps[k, c] * np.sin(arg + phases[k, c])
        return out / (2 * waves) + 0.5

    return tex


@dataclass
class Plane:
    center: np.ndarray
    u_axis: np.ndarray        # in-plane orthonormal axes
    v_axis: np.ndarray
    half_u: float
    half_v: float
    texture_seed: int
    texture_scale: float = 12.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.u_axis = np.asarray(self.u_axis, dtype=np.float64)
        self.v_axis = np.asarray(self.v_axis, dtype=np.float64)
        self.normal = np.cross(self.u_axis, self.v_axis)
        self._tex = procedural_texture(self.texture_seed)

    def intersect(self, origin, dirs):
        """Hit distances (inf where missed) and colors for ray bundles."""
        denom = dirs @ self.normal
        offs = (self.center - origin) @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-12, offs / denom, np.inf)
        pts = origin + t[..., None] * dirs
        lu = (pts - self.center) @ self.u_axis
        lv = (pts - self.center) @ self.v_axis
        hit = (t > _MIN_HIT) & (np.abs(lu) <= self.half_u) & (np.abs(lv) <= self.half_v)
        t = np.where(hit, t, np.inf)
        color = self._tex(lu * self.texture_scale, lv * self.texture_scale)
        return t, color


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    texture_seed: int
    texture_scale: float = 3.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self._tex = procedural_texture(self.texture_seed)

    def intersect(self, origin, dirs):
        oc = origin - self.center
        a = (dirs * dirs).sum(-1)
        b = 2.0 * dirs @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        sqrt_disc = np.sqrt(np.maximum(disc, 0.0))
        t0 = (-b - sqrt_disc) / (2 * a)
        t1 = (-b + sqrt_disc) / (2 * a)
        t = np.where(t0 > _MIN_HIT, t0, t1)
        hit = (disc > 0) & (t > _MIN_HIT)
        t = np.where(hit, t, np.inf)
        pts = origin + t[..., None] * dirs
        rel = pts - self.center
        theta = np.arctan2(rel[..., 1], rel[..., 0])
        phi = np.arccos(np.clip(rel[..., 2] / self.radius, -1, 1))
        color = self._tex(theta * self.texture_scale, phi * self.texture_scale)
        return t, color


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    views: int = 3
    planes: int = 1
    spheres: int = 1
    near: float = 20.0
    far: float = 80.0
    baseline_min: float = 1.0
    baseline_max: float = 4.0
    focal: float | None = None       # defaults to image width
    texture_scale: float = 12.0
    background: tuple = (0.0, 0.0, 0.0)
    min_coverage: float = 0.5

    @classmethod
    def from_text(cls, text: str) -> "SceneSpec":
        """Parse a plain-text ``key = value`` scene description."""
        spec = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"scene spec line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if not hasattr(spec, key):
                raise ValueError(f"scene spec line {lineno}: unknown key {key!r}")
            current = getattr(spec, key)
            if key == "background":
                setattr(spec, key, tuple(float(v) for v in value.split(",")))
            elif isinstance(current, int):
                setattr(spec, key, int(value))
            else:
                setattr(spec, key, float(value))
        return spec


@dataclass
class SyntheticScene:
    primitives: list
    cameras: list
    spec: SceneSpec
    seed: int
    _cache: dict = field(default_factory=dict, repr=False)

    def raytrace_view(self, view: int):
        if view not in self._cache:
            self._cache[view] = raytrace(self, self.cameras[view])
        return self._cache[view]

    def image(self, view: int) -> np.ndarray:
        return self.raytrace_view(view)[0]

    def truth_depth(self, view: int) -> np.ndarray:
        return self.raytrace_view(view)[1]


def raytrace(scene, cam: geo.Camera):
    """Nearest-hit ray casting; returns (image, depth) float32.

    Rays carry unit camera-space z, so the hit parameter equals camera
    depth. Missed pixels take the background color and depth 0.
    """
    dirs = geo.camera_rays(cam)
    origin = cam.center
    h, w = dirs.shape[:2]
    best_t = np.full((h, w), np.inf)
    image = np.empty((h, w, 3))
    image[...] = np.asarray(scene.spec.background, dtype=np.float64)
    for prim in scene.primitives:
        t, color = prim.intersect(origin, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        image[closer] = color[closer]
    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    return image.astype(DTYPE), depth.astype(DTYPE)


def coverage(scene, cam: geo.Camera) -> float:
    return float((scene.truth_depth(scene.cameras.index(cam)) > 0).mean())


def _random_orthonormal_pair(rng, normal_hint):
    n = normal_hint / np.linalg.norm(normal_hint)
    helper = np.array([0.0, 1.0, 0.0])
    if abs(n @ helper) > 0.95:
        helper = np.array([1.0, 0.0, 0.0])
    u = np.cross(helper, n)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    return u, v


def generate(spec: SceneSpec, seed: int = 0) -> SyntheticScene:
    """Deterministic scene for (spec, seed); retries camera placement until
    every view covers at least ``spec.min_coverage`` of its pixels."""
    rng = np.random.default_rng(seed)
    mid = 0.5 * (spec.near + spec.far)
    span = max(spec.far - spec.near, 1e-6)
    lateral = 0.35 * mid

    primitives = []
    for i in range(spec.planes):
        depth = rng.uniform(spec.near + 0.25 * span, spec.far - 0.25 * span)
        center = np.array([
            rng.uniform(-0.3, 0.3) * lateral,
            rng.uniform(-0.3, 0.3) * lateral,
            depth,
        ])
        tilt = rng.uniform(-0.25, 0.25, size=2)
        normal = np.array([tilt[0], tilt[1], -1.0])
        u, v = _random_orthonormal_pair(rng, normal)
        half = rng.uniform(1.6, 2.6) * lateral
        primitives.append(Plane(center, u, v, half, half, texture_seed=seed * 31 + i,
                                texture_scale=spec.texture_scale / mid))
    for i in range(spec.spheres):
        depth = rng.uniform(spec.near + 0.2 * span, spec.far - 0.3 * span)
        center = np.array([
            rng.uniform(-0.4, 0.4) * lateral,
            rng.uniform(-0.4, 0.4) * lateral,
            depth,
        ])
        radius = rng.uniform(0.25, 0.5) * lateral
        primitives.append(Sphere(center, radius, texture_seed=seed * 37 + 7 + i))

    focal = spec.focal or float(spec.width)
    target = np.mean([p.center for p in primitives], axis=0)

    for attempt in range(100):
        cams = []
        for v in range(spec.views):
            step = rng.uniform(spec.baseline_min, spec.baseline_max)
            eye = np.array([
                (v - (spec.views - 1) / 2) * step + rng.uniform(-0.1, 0.1) * step,
                rng.uniform(-0.2, 0.2) * step,
                rng.uniform(-0.05, 0.05) * step,
            ])
            cams.append(geo.look_at_camera(eye, target, np.array([0.0, 1.0, 0.0]),
                                           focal, focal, spec.width, spec.height))
        scene = SyntheticScene(primitives, cams, spec, seed)
        if all((scene.truth_depth(v) > 0).mean() >= spec.min_coverage
               for v in range(spec.views)):
            return scene
    raise RuntimeError(f"could not reach {spec.min_coverage:.0%} coverage in 100 attempts")
