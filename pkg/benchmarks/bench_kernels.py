"""Time the compiled kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one row per kernel with the best wall time of each backend and the
speed-up. Inputs are sized like a desk-recipe training step.
"""

import argparse
import timeit

import numpy as np

from trimip import kernels
from trimip.encoding import build_pyramid
from trimip.geometry import Aabb
from trimip.surface import DensityGrid, build_bvh, marching_cubes


def mip_case(rng, n=16384):
    mip = build_pyramid(rng.normal(size=(64, 64, 8)).astype(np.float32))
    u, v = rng.random(n), rng.random(n)
    lvl = rng.uniform(0, mip.n_levels - 1, n)
    up = rng.normal(size=(n, 8)).astype(np.float32)

    def gather(k):
        out = np.empty((n, 8), dtype=np.float32)
        return lambda: k.mip_gather(mip.flat, mip.offsets, mip.heights, mip.widths, u, v, lvl, out)

    def scatter(k):
        g = np.zeros_like(mip.flat)
        return lambda: k.mip_scatter(g, mip.offsets, mip.heights, mip.widths, u, v, lvl, up)

    return {"mip_gather": gather, "mip_scatter": scatter}


def composite_case(rng, n_rays=1024, per_ray=16):
    counts = rng.integers(1, 2 * per_ray, n_rays)
    n = int(counts.sum())
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    tau = rng.exponential(5.0, n)
    rgb = rng.random((n, 3))
    delta = np.full(n, 0.01)
    t = np.cumsum(delta)
    bg = np.ones(3)
    g_out = rng.normal(size=(n_rays, 3))

    def fwd(k):
        out = [np.empty((n_rays, 3)), np.empty(n_rays), np.empty(n_rays), np.empty(n),
               np.empty(n_rays)]
        return lambda: k.composite_forward(tau, rgb, delta, t, offsets, bg, *out)

    def bwd(k):
        g_tau, g_rgb = np.empty(n), np.empty((n, 3))
        return lambda: k.composite_backward(tau, rgb, delta, offsets, bg, g_out, g_tau, g_rgb)

    return {"composite_forward": fwd, "composite_backward": bwd}


def bvh_case(rng, n=4096):
    ax = (np.arange(48) + 0.5) / 48 * 2 - 1
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    mesh = marching_cubes(DensityGrid(np.exp(-4 * (x * x + y * y + z * z)), Aabb.cube(1.0)), 0.5)
    b = build_bvh(mesh.vertices, mesh.triangles)
    o = rng.uniform(-2, 2, (n, 3))
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)

    def hit(k):
        t = np.empty(n)
        tri = np.empty(n, dtype=np.int64)

        def run():
            t.fill(np.inf)
            tri.fill(-1)
            k.bvh_closest_hit(b.bmin, b.bmax, b.left, b.right, b.start, b.count, b.tris,
                              o, d, t, tri)
        return run

    return {"bvh_closest_hit": hit}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    try:
        cy = kernels.backend("cython")
    except ImportError:
        raise SystemExit("compiled extension not built; run `pip install -e .` first")
    py = kernels.backend("python")
    rng = np.random.default_rng(0)
    cases = {}
    for make in (mip_case, composite_case, bvh_case):
        cases.update(make(rng))
    print(f"{'kernel':<20}{'numpy ms':>12}{'cython ms':>12}{'speed-up':>10}")
    for name, factory in cases.items():
        times = []
        for k in (py, cy):
            fn = factory(k)
            fn()
            times.append(min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3)
        print(f"{name:<20}{times[0]:>12.2f}{times[1]:>12.2f}{times[0] / times[1]:>9.1f}x")


if __name__ == "__main__":
    main()
