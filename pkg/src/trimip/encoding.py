"""Tri-plane mipmap encoding of spheres.

Each of the three axis-aligned planes carries a trainable base feature map;
coarser levels are exact 2x2 means of the level below. A sphere is projected
onto every plane as a disc of the same radius, the disc radius picks a
fractional pyramid level, and the feature is a trilinear (u, v, level) read.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import Aabb, SphereSample

PLANES = ("xy", "xz", "yz")
PLANE_AXES = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}


def _is_pow2(n: int) -> bool:
    return n >= 2 and (n & (n - 1)) == 0


def downsample2(grid: np.ndarray) -> np.ndarray:
    h, w, c = grid.shape
    return grid.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))


class Mipmap:
    """An image pyramid stored level-after-level in one (texels, C) array."""

    def __init__(self, levels):
        self.levels = list(levels)
        self.heights = np.array([lv.shape[0] for lv in self.levels], dtype=np.int64)
        self.widths = np.array([lv.shape[1] for lv in self.levels], dtype=np.int64)
        sizes = self.heights * self.widths
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        self.channels = self.levels[0].shape[2]
        self.flat = np.ascontiguousarray(
            np.concatenate([lv.reshape(-1, self.channels) for lv in self.levels]))

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def base(self) -> np.ndarray:
        return self.levels[0]


def build_pyramid(base: np.ndarray, max_levels: int | None = None) -> Mipmap:
    base = np.asarray(base)
    if base.ndim != 3:
        raise ValueError("base must be H x W x C")
    h, w, _ = base.shape
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ValueError(f"mipmap base {h}x{w} must have power-of-two sides >= 2")
    n = int(np.log2(min(h, w))) + 1
    if max_levels is not None:
        n = min(n, max_levels)
    levels = [base]
    for _ in range(n - 1):
        levels.append(downsample2(levels[-1]))
    return Mipmap(levels)


def trilinear_query(mip: Mipmap, uv, level) -> np.ndarray:
    """Features at normalised plane coordinates ``uv`` (N, 2) and fractional ``level``."""
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    level = np.broadcast_to(np.asarray(level, dtype=np.float64), uv.shape[:1])
    out = np.empty((uv.shape[0], mip.channels), dtype=mip.flat.dtype)
    kernels.mip_gather(mip.flat, mip.offsets, mip.heights, mip.widths,
                       np.ascontiguousarray(uv[:, 0]), np.ascontiguousarray(uv[:, 1]),
                       np.ascontiguousarray(level), out)
    return out


def pull_to_base(level_grads) -> np.ndarray:
    """Adjoint of repeated 2x2 mean pooling: fold per-level gradients into the base."""
    g = level_grads[-1]
    for finer in reversed(level_grads[:-1]):
        g = finer + np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * 0.25
    return g


@dataclass
class EncGrads:
    g_xy: np.ndarray
    g_xz: np.ndarray
    g_yz: np.ndarray

    def as_list(self):
        return [self.g_xy, self.g_xz, self.g_yz]


class TriMipEncoding:
    """Three mipmapped feature planes over an AABB.

    With ``mipmap=False`` the pyramids are cut to their base level, which is
    the flat tri-plane ablation (every query becomes a bilinear point sample).
    """

    def __init__(self, bases, aabb: Aabb, mipmap: bool = True):
        bases = [np.ascontiguousarray(b) for b in bases]
        if len(bases) != 3:
            raise ValueError("need exactly three base planes")
        if len({b.shape for b in bases}) != 1:
            raise ValueError("the three planes must share H, W, C")
        self.aabb = aabb
        self.mipmap = mipmap
        self.bases = bases
        self.rebuild()

    @classmethod
    def random(cls, aabb: Aabb, height=64, width=64, channels=8, rng=None,
               dtype=np.float32, mipmap=True, init_range=0.01):
        rng = np.random.default_rng(rng)
        bases = [rng.uniform(-init_range, init_range, (height, width, channels)).astype(dtype)
                 for _ in PLANES]
        return cls(bases, aabb, mipmap)

    def rebuild(self):
        """Re-derive every coarser level from the current base planes."""
        self.mips = [build_pyramid(b, None if self.mipmap else 1) for b in self.bases]

    @property
    def shape(self):
        return self.bases[0].shape

    @property
    def channels(self) -> int:
        return self.shape[2]

    @property
    def feat_dim(self) -> int:
        return 3 * self.channels

    @property
    def n_levels(self) -> int:
        return self.mips[0].n_levels

    def base_radius(self, plane: str) -> float:
        """Radius of one base-level texel's disc on ``plane``."""
        h, w, _ = self.shape
        a, b = PLANE_AXES[plane]
        ext = self.aabb.extent
        return float(np.sqrt(ext[a] * ext[b] / (h * w * np.pi)))

    def level_of(self, r, plane: str = "xy"):
        r = np.asarray(r, dtype=np.float64)
        with np.errstate(divide="ignore"):
            lvl = np.log2(r / self.base_radius(plane))
        return np.clip(lvl, 0.0, self.n_levels - 1)

    def _coords(self, centers, radii):
        uvn = (np.asarray(centers, dtype=np.float64) - self.aabb.b_min) / self.aabb.extent
        for plane in PLANES:
            a, b = PLANE_AXES[plane]
            yield (plane, np.ascontiguousarray(uvn[:, a]), np.ascontiguousarray(uvn[:, b]),
                   np.ascontiguousarray(self.level_of(radii, plane)))

    def encode_many(self, centers, radii) -> np.ndarray:
        centers = np.atleast_2d(centers)
        radii = np.broadcast_to(np.asarray(radii, dtype=np.float64), centers.shape[:1])
        n = centers.shape[0]
        C = self.channels
        out = np.empty((n, 3 * C), dtype=self.bases[0].dtype)
        for p, (plane, u, v, lvl) in enumerate(self._coords(centers, radii)):
            mip = self.mips[p]
            part = np.empty((n, C), dtype=mip.flat.dtype)
            kernels.mip_gather(mip.flat, mip.offsets, mip.heights, mip.widths, u, v, lvl, part)
            out[:, p * C:(p + 1) * C] = part
        return out

    def backward_many(self, centers, radii, upstream) -> EncGrads:
        centers = np.atleast_2d(centers)
        radii = np.broadcast_to(np.asarray(radii, dtype=np.float64), centers.shape[:1])
        C = self.channels
        grads = []
        for p, (plane, u, v, lvl) in enumerate(self._coords(centers, radii)):
            mip = self.mips[p]
            flat = np.zeros_like(mip.flat)
            up = np.ascontiguousarray(upstream[:, p * C:(p + 1) * C], dtype=flat.dtype)
            kernels.mip_scatter(flat, mip.offsets, mip.heights, mip.widths, u, v, lvl, up)
            per_level = [flat[o:o + h * w].reshape(h, w, C)
                         for o, h, w in zip(mip.offsets, mip.heights, mip.widths)]
            grads.append(pull_to_base(per_level))
        return EncGrads(*grads)


def level_of(r, enc: TriMipEncoding, plane: str = "xy"):
    return enc.level_of(r, plane)


def encode(sphere: SphereSample, enc: TriMipEncoding) -> np.ndarray:
    return enc.encode_many(np.asarray(sphere.center)[None], [sphere.radius])[0]


def encode_backward(sphere: SphereSample, enc: TriMipEncoding, upstream) -> EncGrads:
    up = np.asarray(upstream, dtype=enc.bases[0].dtype).reshape(1, -1)
    return enc.backward_many(np.asarray(sphere.center)[None], [sphere.radius], up)
