"""End-to-end reconstruction pipeline and its training objective.

Wires provider features through fusion, cross-view attention, the cost
volume, and the Gaussian heads into a merged primitive set, honoring the
ablation toggles. The training objective renders target views, feeds the
photometric gradient through the rasterizer's analytic backward, and
back-propagates into every trainable block.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import costvolume as cvol
from . import features as feat
from . import gaussians as ga
from . import geometry as geo
from . import renderer as rd
from .blocks import Block, Conv2dLayer
from .numerics import Node, backward_from, ops
from .numerics.tensor import DTYPE
from .optim import LossConfig, loss as photometric_loss, psnr

ABLATIONS = {
    "no-mf": {"mono_in_cost": False, "mono_in_refine": False},
    "mf-cost-only": {"mono_in_refine": False},
    "mf-refine-only": {"mono_in_cost": False},
    "no-cross": {"cross_aggregation": False},
    "no-dpt": {"dpt": False},
}


@dataclass
class PipelineConfig:
    planes: int = 128
    near: float = 0.5
    far: float = 100.0
    feat_dim: int = 64            # fused feature width C
    mv_dim: int = 64              # multi-view feature width C_mv
    window: int = 8
    neighbors: int = 2            # M, clamped to N-1 per scene
    sh_bands: int = 16
    tile: int = 16
    lambda_lpips: float = 0.05
    mono_in_cost: bool = True
    mono_in_refine: bool = True
    cross_aggregation: bool = True
    dpt: bool = True
    seed: int = 0
    # architecture widths (paper defaults; shrink for desk-scale runs)
    cost_base: int = 128
    refine_base: int = 32
    refine_dim: int = 32
    attn_depth: int = 3
    attn_heads: int = 1
    scale_min: float = 0.5
    scale_max: float = 15.0
    inverse_depth: bool = False
    residual_scale: float | None = None
    zero_init_heads: bool = False

    def __post_init__(self):
        if self.planes < 2:
            raise ValueError("need at least two depth planes")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if self.feat_dim != self.mv_dim and not self.cross_aggregation:
            raise ValueError("cross-aggregation ablation requires feat_dim == mv_dim")

    def apply_ablation(self, name: str) -> None:
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; choices: {sorted(ABLATIONS)}")
        for key, value in ABLATIONS[name].items():
            setattr(self, key, value)

    def echo(self) -> dict:
        return asdict(self)


def toy_config(**overrides) -> PipelineConfig:
    """Desk-scale preset for 16x16 synthetic-scene training runs."""
    base = dict(
        planes=16, near=20.0, far=80.0, feat_dim=16, mv_dim=16, window=4,
        neighbors=1, sh_bands=1, cost_base=16, refine_base=8, refine_dim=8,
        attn_depth=2, seed=0,
    )
    base.update(overrides)
    return PipelineConfig(**base)


@dataclass
class ViewResult:
    depth: Node                  # (h, w) quarter-resolution expected depth
    prob: Node                   # (h, w, D)
    gaussians: ga.GaussianSet
    nodes: dict
    validity: np.ndarray
    meta: dict


@dataclass
class ReconstructionResult:
    gaussians: ga.GaussianSet
    views: list
    candidates: cvol.DepthCandidates
    config: PipelineConfig


class ReconstructionModel(Block):
    """Feed-forward reconstruction: posed images to a merged Gaussian set."""

    def __init__(self, provider, cfg: PipelineConfig):
        self.provider = provider
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c_enc = provider.enc_channels
        c_mono = provider.mono_channels
        self.mono_channels = c_mono
        if cfg.dpt:
            self.fuser = feat.DptFusion([c_enc] * 4, out_dim=cfg.feat_dim, rng=rng)
        else:
            # single-scale fallback: project the coarsest encoder map
            self.fuser = None
            self.single_proj = Conv2dLayer(c_enc, cfg.feat_dim, k=1, padding=0,
                                           rng=rng, name="single_proj")
        if cfg.cross_aggregation:
            self.cross = feat.CrossViewAttention(
                dim=cfg.feat_dim, window=cfg.window, depth=cfg.attn_depth,
                heads=cfg.attn_heads, rng=rng,
            )
            self.mv_proj = (
                Conv2dLayer(cfg.feat_dim, cfg.mv_dim, k=1, padding=0, rng=rng, name="mv_proj")
                if cfg.feat_dim != cfg.mv_dim else None
            )
        else:
            self.cross = None
            self.mv_proj = None
        self.cost_refiner = cvol.CostVolumeRefiner(
            cfg.planes, cfg.mv_dim, c_mono if cfg.mono_in_cost else None,
            base=cfg.cost_base, rng=rng,
        )
        self.feat_refiner = ga.FeatureRefiner(
            cfg.mv_dim, c_mono if cfg.mono_in_refine else None,
            out_channels=cfg.refine_dim, base=cfg.refine_base, rng=rng,
        )
        self.heads = ga.GaussianHeads(
            cfg.refine_dim, sh_bands=cfg.sh_bands,
            scale_bounds=(cfg.scale_min, cfg.scale_max),
            residual_scale=cfg.residual_scale, rng=rng,
            zero_init=cfg.zero_init_heads,
        )
        self.depth_range = geo.DepthRange(cfg.near, cfg.far)
        self.candidates = cvol.sample_candidates(self.depth_range, cfg.planes,
                                                 inverse=cfg.inverse_depth)

    def extract_features(self, images) -> list:
        """Frozen provider pass per view; cache the result across steps."""
        return [self.provider.extract(img, view=i) for i, img in enumerate(images)]

    def parameter_counts(self) -> dict:
        trainable = sum(p.size for p in self.parameters() if p.trainable)
        frozen = sum(p.size for p in self.parameters() if not p.trainable)
        frozen += provider_parameter_count(self.provider)
        return {"trainable": trainable, "frozen": frozen}

    def _fuse(self, scales):
        nodes = [ops.constant(s) for s in scales]
        if self.fuser is not None:
            return self.fuser(nodes)
        target = scales[0].shape[:2]
        up = ops.upsample_bilinear(nodes[-1], *target)
        return self.single_proj(up)

    def reconstruct(self, images, cams, features=None) -> ReconstructionResult:
        """Run the full pipeline over N >= 2 posed views."""
        n = len(images)
        if n < 2:
            raise ValueError("need at least two views")
        if len(cams) != n:
            raise ValueError("image/camera count mismatch")
        for img, cam in zip(images, cams):
            if img.shape[0] % 16 or img.shape[1] % 16:
                raise ValueError("image extents must be divisible by 16")
            if img.shape[:2] != (cam.height, cam.width):
                raise ValueError("camera raster does not match image")
        cfg = self.cfg
        features = features or self.extract_features(images)

        fused = [self._fuse(scales) for scales, _ in features]
        monos = [mono for _, mono in features]

        m = min(cfg.neighbors, n - 1)
        neighbor_ids = [geo.nearest_views(cams, i, m) for i in range(n)]

        mv = []
        metas = []
        for i in range(n):
            if self.cross is not None:
                mv_i, meta = self.cross(
                    fused[i], [fused[j] for j in neighbor_ids[i]],
                    view_id=i, neighbor_ids=neighbor_ids[i],
                )
                if self.mv_proj is not None:
                    mv_i = self.mv_proj(mv_i)
            else:
                mv_i, meta = fused[i], {"self_only": False, "ablated": True}
            mv.append(mv_i)
            metas.append(meta)

        views = []
        per_view_sets = []
        for i in range(n):
            vol = cvol.build(
                mv[i], [mv[j] for j in neighbor_ids[i]], cams[i],
                [cams[j] for j in neighbor_ids[i]], self.candidates,
            )
            refined = self.cost_refiner(
                vol.raw, monos[i] if cfg.mono_in_cost else None, mv[i]
            )
            prob, depth_q = cvol.to_depth(refined, self.candidates)
            feat_full = self.feat_refiner(
                depth_q, monos[i] if cfg.mono_in_refine else None, mv[i], images[i]
            )
            gs_i, nodes = self.heads(feat_full, depth_q, images[i], cams[i],
                                     self.depth_range)
            views.append(ViewResult(depth=depth_q, prob=prob, gaussians=gs_i,
                                    nodes=nodes, validity=vol.validity, meta=metas[i]))
            per_view_sets.append(gs_i)

        merged = ga.merge(per_view_sets)
        return ReconstructionResult(gaussians=merged, views=views,
                                    candidates=self.candidates, config=cfg)


def provider_parameter_count(provider) -> int:
    if isinstance(provider, feat.SyntheticFeatureProvider):
        total = sum(e.size + o.size for e, o in provider._scale_bases)
        return total + provider._mono_basis[0].size + provider._mono_basis[1].size
    return 0


@dataclass
class TrainingSetup:
    """One training scene: which views feed the model, which supervise it."""

    images: list
    cams: list
    input_views: list
    target_views: list
    holdout_views: list = field(default_factory=list)


def make_photometric_objective(model: ReconstructionModel, setups: list,
                               loss_cfg: LossConfig | None = None,
                               threads: int = 1):
    """Objective for optim.fit: renders targets, bridges rasterizer gradients
    into the graph, returns (loss, metrics)."""
    loss_cfg = loss_cfg or LossConfig()
    cached = [
        model.extract_features([s.images[v] for v in s.input_views])
        for s in setups
    ]

    def objective(step: int):
        total = 0.0
        count = 0
        seeds = []
        cots = []
        first_psnr = None
        for setup, features in zip(setups, cached):
            in_imgs = [setup.images[v] for v in setup.input_views]
            in_cams = [setup.cams[v] for v in setup.input_views]
            result = model.reconstruct(in_imgs, in_cams, features=features)
            gs = result.gaussians
            n_targets = len(setup.target_views)
            for t in setup.target_views:
                cam = setup.cams[t]
                st = rd.settings_for(cam, tile=model.cfg.tile)
                out = rd.render(gs, cam, st, threads=threads, retain_state=True)
                gt = setup.images[t]
                total += photometric_loss(out.image, gt, loss_cfg)
                count += 1
                if first_psnr is None:
                    first_psnr = psnr(np.clip(out.image, 0, 1), gt)
                g_img = 2.0 * (out.image.astype(np.float64) - gt) / out.image.size
                g_img /= n_targets * len(setups)
                grads = rd.render_backward(gs, cam, st, g_img, out.state)
                offset = 0
                for view in result.views:
                    nview = len(view.gaussians)
                    for key in ("mu", "alpha", "scale", "rot", "sh"):
                        seeds.append(view.nodes[key])
                        cots.append(grads[key][offset : offset + nview])
                    offset += nview
        backward_from(seeds, cots)
        return total / max(count, 1), {"psnr": first_psnr}

    return objective


def novel_view_psnr(model: ReconstructionModel, setup: TrainingSetup,
                    threads: int = 1) -> float:
    """PSNR of the held-out views for the current model parameters."""
    in_imgs = [setup.images[v] for v in setup.input_views]
    in_cams = [setup.cams[v] for v in setup.input_views]
    result = model.reconstruct(in_imgs, in_cams)
    scores = []
    for v in setup.holdout_views:
        cam = setup.cams[v]
        out = rd.render(result.gaussians, cam, rd.settings_for(cam, tile=model.cfg.tile),
                        threads=threads)
        scores.append(psnr(np.clip(out.image, 0, 1), setup.images[v]))
    return float(np.mean(scores))
