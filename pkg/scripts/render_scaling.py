#!/usr/bin/env python3
"""Rasterizer timing: tiled renderer vs brute-force reference over sizes."""

import argparse
import time

import numpy as np

from monosplat import geometry as geo
from monosplat import renderer as rd
from monosplat.gaussians import GaussianSet


def scene(rng, n):
    mu = np.stack([rng.uniform(-2, 2, n), rng.uniform(-2, 2, n),
                   rng.uniform(2.5, 7, n)], axis=1)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    sh = rng.normal(scale=0.2, size=(n, 3, 4))
    sh[:, :, 0] = rng.uniform(0.2, 3.0, (n, 3))
    return GaussianSet(mu, rng.uniform(0.2, 0.9, n),
                       rng.uniform(0.05, 0.4, (n, 3)), q, sh)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--max-gaussians", type=int, default=1024)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'size':>5} {'N':>6} {'tiled_ms':>9} {'brute_ms':>9} {'max_diff':>9}")
    for size in (64, 128, 256):
        K = np.array([[size, 0, (size - 1) / 2], [0, size, (size - 1) / 2], [0, 0, 1]])
        cam = geo.Camera(K, np.eye(3), np.zeros(3), size, size)
        st = rd.settings_for(cam)
        n = 64
        while n <= args.max_gaussians:
            gs = scene(rng, n)
            t0 = time.time()
            a = rd.render(gs, cam, st)
            t_tiled = time.time() - t0
            t0 = time.time()
            b = rd.render_brute(gs, cam, st)
            t_brute = time.time() - t0
            diff = float(np.abs(a.image - b.image).max())
            print(f"{size:>5} {n:>6} {1000 * t_tiled:>9.1f} {1000 * t_brute:>9.1f} "
                  f"{diff:>9.2e}")
            n *= 4


if __name__ == "__main__":
    main()
