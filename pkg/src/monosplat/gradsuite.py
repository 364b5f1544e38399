"""Gradient verification suites for every trainable block and the rasterizer.

Each case builds a small randomized instance, runs the analytic backward
pass, and compares against central finite differences. Network blocks are
checked at h=1e-5 under float64 forward storage (small enough that the
aggregate bias of nearby relu kinks vanishes; the forward is noise-free in
float64). The rasterizer runs at h=1e-3 on a scene that keeps splats away
from the alpha-cutoff and transmittance-stop discontinuities.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import costvolume as cvol
from . import features as feat
from . import gaussians as ga
from . import geometry as geo
from . import renderer as rd
from .gaussians import GaussianSet
from .numerics import Parameter, backward, leaf, ops
from .numerics.autodiff import scalar_value
from .numerics.tensor import precision64
from .optim import GradCheckReport, grad_check


@dataclass
class SuiteResult:
    name: str
    report: GradCheckReport
    seconds: float
    tol: float = 1e-3

    @property
    def passed(self) -> bool:
        return self.report.ok(self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"[{status}] {self.name}: max rel err {self.report.max_rel_err:.2e} "
            f"({self.report.checked} checked, {self.report.excluded} excluded, "
            f"{self.seconds:.1f}s)"
        )


def _samples_per_param(params, min_samples):
    """Smallest per-parameter count whose capped total reaches min_samples."""
    sizes = [p.size for p in params]
    per = max(1, math.ceil(min_samples / max(len(params), 1)))
    while sum(min(per, s) for s in sizes) < min(min_samples, sum(sizes)):
        per += 1
    return per


def _check_graph_case(name, build_loss, params, min_samples=200, h=1e-5, rng=None):
    for p in params:
        p.zero_grad()
    backward(build_loss())
    per_param = _samples_per_param(params, min_samples)
    t0 = time.time()
    with precision64():
        report = grad_check(lambda: scalar_value(build_loss()), params, h=h,
                            tol=1e-3, samples_per_param=per_param, rng=rng)
    return SuiteResult(name, report, time.time() - t0)


def case_dpt_fusion(seed=0, min_samples=200):
    rng = np.random.default_rng(seed)
    fuser = feat.DptFusion([5, 5, 5, 5], out_dim=6, rng=rng)
    scales = [ops.constant(rng.normal(size=(s, s, 5)).astype(np.float32))
              for s in (8, 4, 2, 1)]
    proj = rng.normal(size=(8, 8, 6)).astype(np.float32)

    def build():
        return ops.mean_all(ops.mul(fuser(scales), proj))

    return _check_graph_case("dpt_fusion", build, fuser.parameters(),
                             min_samples, rng=np.random.default_rng(seed + 1))


def case_cross_view_attention(seed=0, min_samples=200):
    rng = np.random.default_rng(seed)
    attn = feat.CrossViewAttention(dim=6, window=2, depth=2, rng=rng)
    f = ops.constant(rng.normal(size=(4, 4, 6)).astype(np.float32))
    g = ops.constant(rng.normal(size=(4, 4, 6)).astype(np.float32))
    proj = rng.normal(size=(4, 4, 6)).astype(np.float32)

    def build():
        mv, _ = attn(f, [g], view_id=0, neighbor_ids=[1])
        return ops.mean_all(ops.mul(mv, proj))

    return _check_graph_case("cross_view_attention", build, attn.parameters(),
                             min_samples, rng=np.random.default_rng(seed + 1))


def case_cost_refiner(seed=0, min_samples=200):
    rng = np.random.default_rng(seed)
    net = cvol.CostVolumeRefiner(4, 3, 2, base=6, rng=rng)
    net.unet.head.weight.value[...] = (
        rng.normal(size=net.unet.head.weight.value.shape) * 0.05
    ).astype(np.float32)
    raw = ops.constant(rng.normal(size=(6, 6, 4)).astype(np.float32))
    mono = rng.normal(size=(6, 6, 2)).astype(np.float32)
    mv = ops.constant(rng.normal(size=(6, 6, 3)).astype(np.float32))
    proj = rng.normal(size=(6, 6, 4)).astype(np.float32)

    def build():
        return ops.mean_all(ops.mul(net(raw, mono, mv), proj))

    return _check_graph_case("cost_volume_refiner", build, net.parameters(),
                             min_samples, rng=np.random.default_rng(seed + 1))


def case_feature_refiner(seed=0, min_samples=200):
    rng = np.random.default_rng(seed)
    net = ga.FeatureRefiner(mv_channels=3, mono_channels=2, out_channels=4,
                            base=4, rng=rng)
    depth = ops.constant(rng.normal(size=(4, 4)).astype(np.float32))
    mono = rng.normal(size=(4, 4, 2)).astype(np.float32)
    mv = ops.constant(rng.normal(size=(4, 4, 3)).astype(np.float32))
    image = rng.uniform(0, 1, size=(16, 16, 3)).astype(np.float32)
    proj = rng.normal(size=(16, 16, 4)).astype(np.float32)

    def build():
        return ops.mean_all(ops.mul(net(depth, mono, mv, image), proj))

    return _check_graph_case("feature_refiner", build, net.parameters(),
                             min_samples, rng=np.random.default_rng(seed + 1))


def case_gaussian_heads(seed=0, min_samples=200):
    rng = np.random.default_rng(seed)
    K = np.array([[20.0, 0, 3.5], [0, 20.0, 3.5], [0, 0, 1.0]])
    cam = geo.Camera(K, np.eye(3), np.zeros(3), 8, 8)
    image = rng.uniform(0, 1, size=(8, 8, 3)).astype(np.float32)
    featmap = ops.constant(rng.normal(size=(8, 8, 4)).astype(np.float32))
    depth_q = ops.constant(np.full((2, 2), 4.0, dtype=np.float32))
    heads = ga.GaussianHeads(4, sh_bands=4, rng=rng)
    dr = geo.DepthRange(1.0, 9.0)

    def build():
        _, nodes = heads(featmap, depth_q, image, cam, dr)
        total = None
        for key in ("mu", "alpha", "scale", "rot", "sh"):
            piece = ops.mean_all(ops.mul(nodes[key], nodes[key]))
            total = piece if total is None else ops.add(total, piece)
        return total

    return _check_graph_case("gaussian_heads", build, heads.parameters(),
                             min_samples, rng=np.random.default_rng(seed + 1))


def case_renderer_backward(seed=0, min_samples=200, n_gaussians=12, size=32):
    rng = np.random.default_rng(seed)
    f = 30.0
    K = np.array([[f, 0, (size - 1) / 2], [0, f, (size - 1) / 2], [0, 0, 1.0]])
    cam = geo.Camera(K, np.eye(3), np.zeros(3), size, size)
    mu = np.stack([rng.uniform(-1.6, 1.6, n_gaussians),
                   rng.uniform(-1.6, 1.6, n_gaussians),
                   rng.uniform(2.5, 6.0, n_gaussians)], axis=1)
    q = rng.normal(size=(n_gaussians, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    sh = rng.normal(scale=0.2, size=(n_gaussians, 3, 4))
    sh[:, :, 0] = rng.uniform(0.2, 3.0, size=(n_gaussians, 3))
    params = {
        "mu": Parameter(mu.astype(np.float32), name="mu"),
        "alpha": Parameter(rng.uniform(0.15, 0.6, n_gaussians).astype(np.float32), name="alpha"),
        "scale": Parameter(rng.uniform(0.1, 0.45, (n_gaussians, 3)).astype(np.float32), name="scale"),
        "rot": Parameter(q.astype(np.float32), name="rot"),
        "sh": Parameter(sh.astype(np.float32), name="sh"),
    }
    st = rd.settings_for(cam, background=(0.1, 0.05, 0.2), alpha_cutoff=1e-9)
    g_img = rng.normal(size=(size, size, 3))

    def current_set():
        return GaussianSet(params["mu"].value, params["alpha"].value,
                           params["scale"].value, params["rot"].value,
                           params["sh"].value)

    out = rd.render(current_set(), cam, st, retain_state=True)
    grads = rd.render_backward(current_set(), cam, st, g_img, out.state)
    for key, p in params.items():
        p.zero_grad()
        p.grad[...] = grads[key]

    def loss():
        img = rd.render(current_set(), cam, st).image.astype(np.float64)
        return float((img * g_img).sum())

    plist = list(params.values())
    per_param = _samples_per_param(plist, min_samples)
    t0 = time.time()
    with precision64():
        report = grad_check(loss, plist, h=1e-3, tol=1e-3, samples_per_param=per_param,
                            rng=np.random.default_rng(seed + 1))
    return SuiteResult("renderer_backward", report, time.time() - t0)


ALL_CASES = (
    case_dpt_fusion,
    case_cross_view_attention,
    case_cost_refiner,
    case_feature_refiner,
    case_gaussian_heads,
    case_renderer_backward,
)


def run_gradient_suite(seed=0, min_samples=200):
    """Every trainable block plus the rasterizer backward."""
    return [case(seed=seed, min_samples=min_samples) for case in ALL_CASES]
