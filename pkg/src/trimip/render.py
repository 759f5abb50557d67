"""Quadrature compositing, cone rendering and the occupancy grid."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from .encoding import TriMipEncoding
from .field import FieldParams, density_forward, field_forward, sh_encode
from .geometry import (Aabb, Cone, ConeBatch, PackedSamples, camera_cones, default_step,
                       sample_batch)

TILE = 4096


@dataclass
class CompositeResult:
    rgb: np.ndarray
    opacity: float
    depth: float
    weights: np.ndarray


def composite(taus, colors, ts, background=(1.0, 1.0, 1.0), step=None, deltas=None) -> CompositeResult:
    """Alpha-composite one ray's samples front to back.

    Interval i spans ``ts[i+1] - ts[i]``; the last one is ``step`` (or the
    previous interval when ``step`` is omitted). ``deltas`` overrides both.
    """
    taus = np.asarray(taus, dtype=np.float64).ravel()
    ts = np.asarray(ts, dtype=np.float64).ravel()
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    n = ts.shape[0]
    if not (taus.shape[0] == colors.shape[0] == n):
        raise ValueError("taus, colors and ts must have the same length")
    if n > 1 and np.any(np.diff(ts) < 0):
        raise ValueError("sample distances must be sorted")
    if deltas is None:
        deltas = np.empty(n)
        if n:
            deltas[:-1] = np.diff(ts)
            if step is None:
                if n == 1:
                    raise ValueError("a single sample needs an explicit step")
                step = deltas[-2]
            deltas[-1] = step
    deltas = np.ascontiguousarray(deltas, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    out = _composite_packed(taus, colors, deltas, ts, np.array([0, n], dtype=np.int64), bg)
    return CompositeResult(out["rgb"][0], float(out["opacity"][0]), float(out["depth"][0]),
                           out["weights"])


def _composite_packed(tau, rgb, delta, t, offsets, bg):
    n_rays = offsets.shape[0] - 1
    res = {
        "rgb": np.empty((n_rays, 3)),
        "opacity": np.empty(n_rays),
        "depth": np.empty(n_rays),
        "weights": np.empty(tau.shape[0]),
        "trans": np.empty(n_rays),
    }
    kernels.composite_forward(
        np.ascontiguousarray(tau, dtype=np.float64), np.ascontiguousarray(rgb, dtype=np.float64),
        np.ascontiguousarray(delta, dtype=np.float64), np.ascontiguousarray(t, dtype=np.float64),
        offsets, np.ascontiguousarray(bg, dtype=np.float64),
        res["rgb"], res["opacity"], res["depth"], res["weights"], res["trans"])
    return res


def composite_packed_backward(tau, rgb, delta, offsets, bg, grad_out):
    g_tau = np.empty(tau.shape[0])
    g_rgb = np.empty((tau.shape[0], 3))
    kernels.composite_backward(
        np.ascontiguousarray(tau, dtype=np.float64), np.ascontiguousarray(rgb, dtype=np.float64),
        np.ascontiguousarray(delta, dtype=np.float64), offsets,
        np.ascontiguousarray(bg, dtype=np.float64), np.ascontiguousarray(grad_out, dtype=np.float64),
        g_tau, g_rgb)
    return g_tau, g_rgb


class OccupancyGrid:
    """Coarse N^3 voxelisation of the AABB with a running density estimate per cell."""

    def __init__(self, aabb: Aabb, resolution=64, decay=0.95, threshold=1e-3,
                 step_ref=None, occupancy=None):
        self.aabb = aabb
        self.resolution = int(resolution)
        self.decay = decay
        self.threshold = threshold
        self.step_ref = default_step(aabb) if step_ref is None else step_ref
        if occupancy is None:
            # start fully occupied; the first updates pull empty cells down
            occupancy = np.full((self.resolution,) * 3, 10.0 * threshold / self.step_ref)
        self.occupancy = np.asarray(occupancy, dtype=np.float64)
        self.binarize()

    def binarize(self):
        self.binary = self.occupancy * self.step_ref > self.threshold

    @classmethod
    def full(cls, aabb, resolution=64, **kw):
        return cls(aabb, resolution, **kw)

    @classmethod
    def empty(cls, aabb, resolution=64, **kw):
        return cls(aabb, resolution, occupancy=np.zeros((resolution,) * 3), **kw)

    @property
    def cell_size(self) -> np.ndarray:
        return self.aabb.extent / self.resolution

    def cell_index(self, pts):
        idx = np.floor((pts - self.aabb.b_min) / self.cell_size).astype(np.int64)
        return np.clip(idx, 0, self.resolution - 1)

    def occupied_at(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        inside = np.all((pts >= self.aabb.b_min) & (pts <= self.aabb.b_max), axis=-1)
        idx = self.cell_index(pts)
        return inside & self.binary[idx[:, 0], idx[:, 1], idx[:, 2]]

    def cell_centers(self):
        g = np.arange(self.resolution) + 0.5
        ii, jj, kk = np.meshgrid(g, g, g, indexing="ij")
        return self.aabb.b_min + np.stack([ii, jj, kk], axis=-1) * self.cell_size


def density_at(enc: TriMipEncoding, params: FieldParams, points, radius, chunk=1 << 16):
    """Density at world points for spheres of the given radius."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.empty(points.shape[0])
    for s in range(0, points.shape[0], chunk):
        p = points[s:s + chunk]
        feats = enc.encode_many(p, np.broadcast_to(radius, p.shape[:1]))
        out[s:s + chunk] = density_forward(feats, params)[0]
    return out


def occupancy_update(grid: OccupancyGrid, enc: TriMipEncoding, params: FieldParams,
                     step_count: int, seed: int = 0) -> OccupancyGrid:
    """One EMA update: density at a jittered point per cell, max-decay, re-threshold."""
    rng = np.random.default_rng([seed, step_count])
    n = grid.resolution
    ii, jj, kk = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    cells = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
    pts = grid.aabb.b_min + (cells + rng.random(cells.shape)) * grid.cell_size
    radius = 0.5 * float(np.linalg.norm(grid.cell_size))
    tau = density_at(enc, params, pts, radius).reshape(n, n, n)
    grid.occupancy = np.maximum(grid.decay * grid.occupancy, tau)
    grid.binarize()
    return grid


@dataclass
class RayRender:
    rgb: np.ndarray
    opacity: np.ndarray
    depth: np.ndarray
    n_evals: np.ndarray  # field evaluations per ray


def _eval_samples(cones: ConeBatch, packed: PackedSamples, enc, params, sh_ray=None):
    ray = packed.ray
    t = packed.t
    centers = cones.origins[ray] + t[:, None] * cones.dirs[ray]
    radii = t * cones.ratios[ray]
    feats = enc.encode_many(centers, radii)
    if sh_ray is None:
        sh_ray = sh_encode(cones.dirs)
    tau, rgb, cache = field_forward(feats, sh_ray[ray], params)
    return tau, rgb, cache, centers, radii


def render_cones(cones: ConeBatch, enc: TriMipEncoding, params: FieldParams, step: float,
                 grid: OccupancyGrid | None = None, background=(1.0, 1.0, 1.0),
                 early_stop: float | None = 1e-4, wave: int = 32,
                 packed: PackedSamples | None = None) -> RayRender:
    """Render a batch of cones; ``early_stop`` stops rays whose transmittance drops below it."""
    bg = np.asarray(background, dtype=np.float64)
    if packed is None:
        packed = sample_batch(cones, enc.aabb, step, grid)
    n_rays = len(cones)
    counts = packed.counts
    if not early_stop:
        if packed.t.size == 0:
            return RayRender(np.tile(bg, (n_rays, 1)), np.zeros(n_rays), np.zeros(n_rays),
                             np.zeros(n_rays, dtype=np.int64))
        tau, rgb, _, _, _ = _eval_samples(cones, packed, enc, params)
        res = _composite_packed(tau, rgb, np.full(tau.shape, step), packed.t, packed.offsets, bg)
        return RayRender(res["rgb"], res["opacity"], res["depth"], counts.copy())

    # march in fixed-size waves, dropping rays once they are (nearly) opaque
    sh_ray = sh_encode(cones.dirs)
    rgb_acc = np.zeros((n_rays, 3))
    opa_acc = np.zeros(n_rays)
    dep_acc = np.zeros(n_rays)
    trans = np.ones(n_rays)
    n_evals = np.zeros(n_rays, dtype=np.int64)
    local = np.arange(packed.t.shape[0]) - packed.offsets[:-1][packed.ray]
    zero_bg = np.zeros(3)
    for start in range(0, int(counts.max()) if n_rays else 0, wave):
        active = trans >= early_stop
        sel = active[packed.ray] & (local >= start) & (local < start + wave)
        if not sel.any():
            break
        sub = PackedSamples.from_counts(packed.t[sel], np.bincount(packed.ray[sel], minlength=n_rays))
        tau, rgb, _, _, _ = _eval_samples(cones, sub, enc, params, sh_ray)
        res = _composite_packed(tau, rgb, np.full(tau.shape, step), sub.t, sub.offsets, zero_bg)
        rgb_acc += trans[:, None] * res["rgb"]
        opa_acc += trans * res["opacity"]
        dep_acc += trans * res["opacity"] * res["depth"]
        trans = trans * res["trans"]
        n_evals += sub.counts
    rgb_out = rgb_acc + (1.0 - opa_acc)[:, None] * bg
    depth = np.where(opa_acc > 1e-10, dep_acc / np.maximum(opa_acc, 1e-10), 0.0)
    return RayRender(rgb_out, opa_acc, depth, n_evals)


def render_pixel(cone: Cone, enc: TriMipEncoding, params: FieldParams, grid=None, step=None,
                 background=(1.0, 1.0, 1.0), early_stop=None) -> CompositeResult:
    step = default_step(enc.aabb) if step is None else step
    batch = ConeBatch(np.asarray(cone.origin, dtype=np.float64)[None], cone.unit_dir[None],
                      np.array([cone.radius_ratio]), np.array([cone.disc_radius]))
    packed = sample_batch(batch, enc.aabb, step, grid)
    bg = np.asarray(background, dtype=np.float64)
    if packed.t.size == 0:
        return CompositeResult(bg.copy(), 0.0, 0.0, np.zeros(0))
    if early_stop:
        r = render_cones(batch, enc, params, step, grid, bg, early_stop, packed=packed)
        return CompositeResult(r.rgb[0], float(r.opacity[0]), float(r.depth[0]), np.zeros(0))
    tau, rgb, _, _, _ = _eval_samples(batch, packed, enc, params)
    return composite(tau, rgb, packed.t, bg, deltas=np.full(tau.shape, step))


def render_image(camera, enc: TriMipEncoding, params: FieldParams, grid=None, step=None,
                 background=(1.0, 1.0, 1.0), early_stop=1e-4, threads=1, return_stats=False):
    """H x W x 4 image (rgb + opacity).

    Pixels are split into fixed tiles so the arithmetic, and therefore the
    output, does not depend on ``threads``.
    """
    step = default_step(enc.aabb) if step is None else step
    cones = camera_cones(camera)
    n = len(cones)
    tiles = [np.arange(s, min(s + TILE, n)) for s in range(0, n, TILE)]

    def run(idx):
        return render_cones(cones.subset(idx), enc, params, step, grid, background, early_stop)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, tiles))
    else:
        parts = [run(t) for t in tiles]
    rgb = np.concatenate([p.rgb for p in parts])
    opa = np.concatenate([p.opacity for p in parts])
    img = np.concatenate([rgb, opa[:, None]], axis=1).reshape(camera.height, camera.width, 4)
    if return_stats:
        depth = np.concatenate([p.depth for p in parts]).reshape(camera.height, camera.width)
        evals = np.concatenate([p.n_evals for p in parts]).reshape(camera.height, camera.width)
        return img, {"depth": depth, "n_evals": evals}
    return img
