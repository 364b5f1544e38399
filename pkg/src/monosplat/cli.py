"""Command-line pipeline: every stage as a subcommand with file interfaces.

Exit codes: 0 success, 2 input error, 3 numeric error. Flags override a
``--config`` JSON file; every report echoes the merged configuration and the
content hashes of all inputs. Runs are deterministic given (inputs, seed);
the renderer's fixed-order tile reduction makes thread count irrelevant.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import costvolume as cvol
from . import features as feat
from . import gaussians as ga
from . import geometry as geo
from . import pipeline as pl
from . import renderer as rd
from . import synthscene as sc
from .gradsuite import run_gradient_suite
from .imageio import read_png, write_pfm, write_png
from .numerics import NumericError, ops, write_mtf
from .optim import LossConfig, fit, psnr, ssim

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _thread_count(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("MONOSPLAT_THREADS")
    return max(1, int(env)) if env else 1


def _load_config_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return data


_CONFIG_FLAGS = {
    "planes": int, "near": float, "far": float, "feat_dim": int, "mv_dim": int,
    "window": int, "neighbors": int, "sh_bands": int, "tile": int,
    "lambda_lpips": float, "seed": int, "cost_base": int, "refine_base": int,
    "refine_dim": int, "attn_depth": int, "attn_heads": int,
    "scale_min": float, "scale_max": float,
}


def _build_pipeline_config(args, base: dict | None = None) -> pl.PipelineConfig:
    """Defaults < file config < flags; ablations applied last."""
    merged = dict(base or {})
    if getattr(args, "config", None):
        file_cfg = _load_config_file(args.config)
        valid = {f.name for f in fields(pl.PipelineConfig)}
        unknown = set(file_cfg) - valid
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key in _CONFIG_FLAGS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    cfg = pl.PipelineConfig(**merged)
    for name in getattr(args, "ablate", None) or []:
        cfg.apply_ablation(name)
    return cfg


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with PipelineConfig fields")
    p.add_argument("--planes", type=int, help="depth plane count")
    p.add_argument("--near", type=float)
    p.add_argument("--far", type=float)
    p.add_argument("--feat-dim", dest="feat_dim", type=int)
    p.add_argument("--mv-dim", dest="mv_dim", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--neighbors", type=int)
    p.add_argument("--sh-bands", dest="sh_bands", type=int)
    p.add_argument("--tile", type=int)
    p.add_argument("--lambda-lpips", dest="lambda_lpips", type=float)
    p.add_argument("--cost-base", dest="cost_base", type=int)
    p.add_argument("--refine-base", dest="refine_base", type=int)
    p.add_argument("--refine-dim", dest="refine_dim", type=int)
    p.add_argument("--attn-depth", dest="attn_depth", type=int)
    p.add_argument("--attn-heads", dest="attn_heads", type=int)
    p.add_argument("--scale-min", dest="scale_min", type=float)
    p.add_argument("--scale-max", dest="scale_max", type=float)
    p.add_argument("--ablate", action="append", default=[],
                   help=f"ablation toggle, repeatable; one of {sorted(pl.ABLATIONS)}")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--provider", default="synthetic",
                   help="'synthetic' or 'dir:<path>' with exported MTF features")
    p.add_argument("--provider-seed", type=int, default=0)
    p.add_argument("--provider-channels", type=int, default=None)
    p.add_argument("--provider-mono-channels", type=int, default=32)


def _make_provider(args):
    spec = args.provider
    if spec == "synthetic":
        return feat.SyntheticFeatureProvider(
            seed=args.provider_seed,
            enc_channels=args.provider_channels,
            mono_channels=args.provider_mono_channels,
        )
    if spec.startswith("dir:"):
        return feat.FileFeatureProvider(spec[4:])
    raise ValueError(f"unknown provider {spec!r}; use 'synthetic' or 'dir:<path>'")


def _load_images(image_arg) -> tuple:
    path = Path(image_arg)
    if path.is_dir():
        files = sorted(path.glob("*.png"))
        if not files:
            raise ValueError(f"{path}: no PNG files")
    else:
        files = [Path(p) for p in image_arg.split(",")]
    images = [read_png(p) for p in files]
    return images, files


def _write_report(out_dir: Path, name: str, payload: dict) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _run_reconstruction(args):
    images, files = _load_images(args.images)
    cams = geo.load_cameras(args.cameras)
    if len(cams) != len(images):
        raise ValueError(f"{len(images)} images but {len(cams)} cameras")
    cfg = _build_pipeline_config(args)
    provider = _make_provider(args)
    model = pl.ReconstructionModel(provider, cfg)
    t0 = time.time()
    result = model.reconstruct(images, cams)
    elapsed = time.time() - t0
    report = {
        "config": cfg.echo(),
        "provider": {"backend": provider.backend,
                     "layer_ids": provider.layer_ids,
                     "state_hash": provider.state_hash()},
        "inputs": {str(f): _sha256(f) for f in files},
        "cameras": _sha256(args.cameras),
        "gaussians": len(result.gaussians),
        "parameters": model.parameter_counts(),
        "seconds": round(elapsed, 4),
        "view_meta": [v.meta for v in result.views],
        "validity_fraction": [float(v.validity.mean()) for v in result.views],
    }
    return images, cams, model, result, report


def cmd_reconstruct(args) -> int:
    out = Path(args.out)
    images, cams, model, result, report = _run_reconstruction(args)
    out.mkdir(parents=True, exist_ok=True)
    ga.save_ply(out / "gaussians.ply", result.gaussians)
    for i, view in enumerate(result.views):
        depth = view.depth.value.astype(np.float32)
        write_pfm(out / f"depth_view{i}.pfm", depth)
        write_mtf(out / f"depth_view{i}.mtf", depth)
    report["outputs"] = {
        "ply": _sha256(out / "gaussians.ply"),
        "depth": {f"depth_view{i}.mtf": _sha256(out / f"depth_view{i}.mtf")
                  for i in range(len(result.views))},
    }
    _write_report(out, "report.json", report)
    print(f"wrote {len(result.gaussians)} gaussians to {out / 'gaussians.ply'}")
    return EXIT_OK


def cmd_depth(args) -> int:
    out = Path(args.out)
    images, cams, model, result, report = _run_reconstruction(args)
    out.mkdir(parents=True, exist_ok=True)
    for i, view in enumerate(result.views):
        depth = view.depth.value.astype(np.float32)
        write_pfm(out / f"depth_view{i}.pfm", depth)
        write_mtf(out / f"depth_view{i}.mtf", depth)
    report["outputs"] = {f"depth_view{i}.mtf": _sha256(out / f"depth_view{i}.mtf")
                         for i in range(len(result.views))}
    _write_report(out, "report.json", report)
    print(f"wrote {len(result.views)} cost-volume depth maps to {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    out = Path(args.out)
    gs = ga.load_ply(args.ply)
    cams = geo.load_cameras(args.cameras)
    threads = _thread_count(args)
    background = tuple(float(v) for v in args.background.split(","))
    out.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for i, cam in enumerate(cams):
        st = rd.settings_for(cam, background=background, tile=args.tile or 16)
        res = rd.render(gs, cam, st, threads=threads)
        write_png(out / f"render_{i}.png", res.image)
        write_pfm(out / f"depth_{i}.pfm", res.depth)
        hashes[f"render_{i}.png"] = _sha256(out / f"render_{i}.png")
    report = {
        "ply": _sha256(args.ply),
        "cameras": _sha256(args.cameras),
        "background": background,
        "threads": threads,
        "gaussians": len(gs),
        "outputs": hashes,
    }
    _write_report(out, "report.json", report)
    print(f"rendered {len(cams)} views to {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.spec:
        spec = sc.SceneSpec.from_text(Path(args.spec).read_text(encoding="utf-8"))
    else:
        spec = sc.SceneSpec()
    scene = sc.generate(spec, seed=args.seed or 0)
    out.mkdir(parents=True, exist_ok=True)
    for v in range(spec.views):
        img, depth = scene.raytrace_view(v)
        write_png(out / f"view_{v}.png", img)
        write_pfm(out / f"truth_depth_{v}.pfm", depth)
    geo.save_cameras(out / "cameras.json", scene.cameras)
    report = {
        "spec": vars(spec) | {"background": list(spec.background)},
        "seed": args.seed or 0,
        "coverage": [float((scene.truth_depth(v) > 0).mean()) for v in range(spec.views)],
        "outputs": {f"view_{v}.png": _sha256(out / f"view_{v}.png")
                    for v in range(spec.views)},
    }
    _write_report(out, "report.json", report)
    print(f"generated {spec.views} views to {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    out = Path(args.out)
    if args.spec:
        spec = sc.SceneSpec.from_text(Path(args.spec).read_text(encoding="utf-8"))
    else:
        spec = sc.SceneSpec(width=16, height=16, views=5, near=20.0, far=80.0,
                            baseline_min=2.0, baseline_max=4.0)
    scene = sc.generate(spec, seed=args.scene_seed)
    images = [scene.image(v) for v in range(spec.views)]
    cams = scene.cameras
    cfg = _build_pipeline_config(args, base=pl.toy_config().echo())
    provider = _make_provider(args)
    model = pl.ReconstructionModel(provider, cfg)

    n_inputs = min(2, spec.views - 1)
    input_views = list(range(n_inputs))
    holdout = [spec.views - 1] if spec.views > n_inputs + 1 else []
    targets = [v for v in range(spec.views) if v not in holdout]
    setup = pl.TrainingSetup(images=images, cams=cams, input_views=input_views,
                             target_views=targets, holdout_views=holdout)
    objective = pl.make_photometric_objective(
        model, [setup], LossConfig(lambda_lpips=cfg.lambda_lpips),
        threads=_thread_count(args),
    )
    out.mkdir(parents=True, exist_ok=True)
    result = fit(model.trainable_parameters(), objective, steps=args.steps,
                 lr=args.lr, momentum=args.momentum, schedule=args.schedule,
                 report_path=out / "train.ndjson")
    summary = {
        "config": cfg.echo(),
        "scene_seed": args.scene_seed,
        "steps": result.steps_run,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "loss_ratio": result.final_loss / result.initial_loss if result.initial_loss else None,
        "diverged": result.diverged,
        "holdout_psnr": pl.novel_view_psnr(model, setup) if holdout else None,
    }
    _write_report(out, "report.json", summary)
    print(f"trained {result.steps_run} steps: loss {result.initial_loss:.5f} -> "
          f"{result.final_loss:.5f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    rows = []
    for size in (32, 64, 128):
        for n in (64, 256):
            mu = np.stack([rng.uniform(-2, 2, n), rng.uniform(-2, 2, n),
                           rng.uniform(2.5, 7, n)], axis=1)
            q = rng.normal(size=(n, 4))
            q /= np.linalg.norm(q, axis=1, keepdims=True)
            sh = rng.normal(scale=0.2, size=(n, 3, 4))
            gs = ga.GaussianSet(mu, rng.uniform(0.2, 0.9, n),
                                rng.uniform(0.05, 0.4, (n, 3)), q, sh)
            K = np.array([[size, 0, (size - 1) / 2], [0, size, (size - 1) / 2], [0, 0, 1]])
            cam = geo.Camera(K, np.eye(3), np.zeros(3), size, size)
            t0 = time.time()
            rd.render(gs, cam, rd.settings_for(cam))
            rows.append(("render", size, n, round(1000 * (time.time() - t0), 3)))
    for res in (64, 128):
        feats = rng.normal(size=(res // 4, res // 4, 16)).astype(np.float32)
        K = np.array([[res, 0, (res - 1) / 2], [0, res, (res - 1) / 2], [0, 0, 1]])
        ref = geo.Camera(K, np.eye(3), np.zeros(3), res, res)
        src = geo.Camera(K, np.eye(3), np.array([-0.5, 0, 0]), res, res)
        cands = cvol.sample_candidates(geo.DepthRange(1.0, 10.0), 32)
        t0 = time.time()
        cvol.build(ops.constant(feats), [ops.constant(feats)], ref, [src], cands)
        rows.append(("cost_volume", res, 32, round(1000 * (time.time() - t0), 3)))
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["operation", "size", "count", "milliseconds"])
        writer.writerows(rows)
    print(f"wrote {len(rows)} timings to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradient_suite(seed=args.seed or 0,
                                 min_samples=args.samples)
    for r in results:
        print(r.line())
    if all(r.passed for r in results):
        print("gradient suite: all passed")
        return EXIT_OK
    print("gradient suite: FAILURES", file=sys.stderr)
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="monosplat",
        description="Feed-forward Gaussian reconstruction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", help="images + cameras -> gaussians + depth")
    p.add_argument("--images", required=True, help="directory of PNGs or comma list")
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("depth", help="dump cost-volume expected depth per view")
    p.add_argument("--images", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_depth)

    p = sub.add_parser("render", help="render a PLY from a camera file")
    p.add_argument("--ply", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--background", default="0,0,0")
    p.add_argument("--tile", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("synth", help="generate an oracle scene")
    p.add_argument("--spec", help="plain-text key=value scene spec")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="toy photometric training on a synthetic scene")
    p.add_argument("--spec", help="scene spec file; default 16x16 five-view scene")
    p.add_argument("--scene-seed", dest="scene_seed", type=int, default=1)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--schedule", default="constant", choices=("constant", "cosine"))
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_fit, provider_channels=24, provider_mono_channels=8,
                   provider_seed=1)

    p = sub.add_parser("bench", help="timing sweeps to CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="run the gradient verification suites")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=200)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, json.JSONDecodeError, RuntimeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
