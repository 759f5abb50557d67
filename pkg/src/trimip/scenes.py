"""Analytic test scenes and their exact reference renderer.

Primitives are either participating media with constant density and colour
(``density`` finite) or opaque surfaces (``density=inf``) whose colour may vary
over the surface (checker textures, Lambertian shading). For this class of
scenes transmittance along a ray has a closed form, so the reference renderer
has no quadrature error; the only approximation is the pixel supersampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Aabb, Camera, look_at


@dataclass
class Primitive:
    kind: str                       # "sphere" | "box" | "plane"
    center: np.ndarray
    size: np.ndarray                # sphere: (radius,), box: half extents, plane: (half_x, half_y)
    density: float = np.inf
    albedo: tuple = (0.8, 0.8, 0.8)
    albedo2: tuple | None = None    # second checker colour
    checker: int = 0                # checker cells per side (0 = plain)
    lambert: bool = False

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        if not self.density >= 0:
            raise ValueError("density must be non-negative")
        for c in (self.albedo, self.albedo2 or (0, 0, 0)):
            if min(c) < 0 or max(c) > 1:
                raise ValueError("albedo must lie in [0, 1]")
        if np.isfinite(self.density) and (self.checker or self.lambert):
            raise ValueError("textured or shaded primitives must be opaque")

    def intervals(self, o, d):
        """Entry/exit distances per ray, inf where missed."""
        if self.kind == "sphere":
            oc = o - self.center
            b = np.einsum("ij,ij->i", oc, d)
            c = np.einsum("ij,ij->i", oc, oc) - self.size[0] ** 2
            disc = b * b - c
            ok = disc >= 0
            s = np.sqrt(np.where(ok, disc, 0.0))
            t0, t1 = -b - s, -b + s
        elif self.kind == "box":
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / d
                a = (self.center - self.size - o) * inv
                b = (self.center + self.size - o) * inv
            lo = np.where(np.isnan(a), -np.inf, np.minimum(a, b)).max(axis=1)
            hi = np.where(np.isnan(b), np.inf, np.maximum(a, b)).min(axis=1)
            ok = hi >= lo
            t0, t1 = lo, hi
        elif self.kind == "plane":
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (self.center[2] - o[:, 2]) / d[:, 2]
            p = o + t[:, None] * d
            rel = np.abs(p[:, :2] - self.center[:2])
            ok = np.isfinite(t) & (rel[:, 0] <= self.size[0]) & (rel[:, 1] <= self.size[1])
            t0 = t1 = t
        else:
            raise ValueError(f"unknown primitive {self.kind!r}")
        ok &= t1 > 0
        t0 = np.where(ok, np.maximum(t0, 0.0), np.inf)
        t1 = np.where(ok, t1, np.inf)
        return t0, t1

    def color_at(self, p, light):
        n_pts = p.shape[0]
        base = np.broadcast_to(np.asarray(self.albedo, dtype=np.float64), (n_pts, 3))
        if self.checker:
            if self.kind == "plane":
                uv = (p[:, :2] - self.center[:2] + self.size[:2]) / (2 * self.size[:2])
            elif self.kind == "sphere":
                q = (p - self.center) / self.size[0]
                uv = np.stack([np.arctan2(q[:, 1], q[:, 0]) / (2 * np.pi) + 0.5,
                               np.arccos(np.clip(q[:, 2], -1, 1)) / np.pi], axis=1)
            else:
                uv = (p[:, :2] - self.center[:2] + self.size[:2]) / (2 * self.size[:2])
            cell = np.floor(np.clip(uv, 0, 1 - 1e-12) * self.checker).astype(np.int64)
            odd = (cell[:, 0] + cell[:, 1]) % 2 == 1
            base = np.where(odd[:, None], np.asarray(self.albedo2, dtype=np.float64), base)
        if self.lambert:
            normal = self._normal(p)
            shade = 0.35 + 0.65 * np.maximum(normal @ light, 0.0)
            base = base * shade[:, None]
        return base

    def _normal(self, p):
        if self.kind == "sphere":
            n = p - self.center
            return n / np.linalg.norm(n, axis=1, keepdims=True)
        if self.kind == "plane":
            return np.tile([0.0, 0.0, 1.0], (p.shape[0], 1))
        rel = (p - self.center) / self.size
        axis = np.argmax(np.abs(rel), axis=1)
        n = np.zeros_like(p)
        n[np.arange(p.shape[0]), axis] = np.sign(rel[np.arange(p.shape[0]), axis])
        return n


@dataclass
class AnalyticScene:
    name: str
    primitives: list
    aabb: Aabb
    background: tuple = (1.0, 1.0, 1.0)
    light: np.ndarray = field(default_factory=lambda: np.array([0.3, -0.5, 0.8]))
    orbit_radius: float = 3.0
    orbit_elevation: tuple = (20.0, 60.0)
    fov_deg: float = 40.0

    def __post_init__(self):
        self.light = np.asarray(self.light, dtype=np.float64)
        self.light = self.light / np.linalg.norm(self.light)


SCENES = ("single-sphere", "checker-plane", "checker-sphere", "boxes")


def generate_scene(spec: str, seed: int = 0) -> AnalyticScene:
    """Named fixture scenes; ``seed`` only perturbs the randomised ones."""
    if not spec:
        raise ValueError("empty scene spec")
    rng = np.random.default_rng(seed)
    if spec == "single-sphere":
        prims = [Primitive("sphere", [0, 0, 0], [0.5], albedo=(0.85, 0.35, 0.2), lambert=True)]
        return AnalyticScene(spec, prims, Aabb.cube(0.7))
    if spec == "checker-plane":
        prims = [Primitive("plane", [0, 0, 0], [0.5, 0.5], albedo=(0.92, 0.92, 0.92),
                           albedo2=(0.08, 0.08, 0.08), checker=32)]
        return AnalyticScene(spec, prims, Aabb([-0.5, -0.5, -0.125], [0.5, 0.5, 0.125]),
                             orbit_radius=1.6, orbit_elevation=(35.0, 75.0))
    if spec == "checker-sphere":
        prims = [Primitive("sphere", [0, 0, 0], [0.5], albedo=(0.9, 0.9, 0.2),
                           albedo2=(0.1, 0.2, 0.6), checker=16, lambert=True)]
        return AnalyticScene(spec, prims, Aabb.cube(0.7))
    if spec == "boxes":
        prims = []
        for _ in range(3):
            c = rng.uniform(-0.4, 0.4, 3)
            prims.append(Primitive("box", c, rng.uniform(0.1, 0.25, 3),
                                   albedo=tuple(rng.uniform(0.1, 0.9, 3)), lambert=True))
        prims.append(Primitive("sphere", [0, 0, 0], [0.3], density=4.0, albedo=(0.2, 0.6, 0.9)))
        return AnalyticScene(spec, prims, Aabb.cube(0.8))
    raise ValueError(f"unknown scene spec {spec!r}; choose from {SCENES}")


def orbit_cameras(scene: AnalyticScene, n: int, width: int, height: int | None = None,
                  seed: int = 0, offset: float = 0.0):
    """``n`` cameras on a spiral around the scene, all looking at the origin."""
    height = width if height is None else height
    rng = np.random.default_rng(seed)
    f = 0.5 * width / np.tan(np.radians(scene.fov_deg) / 2)
    lo, hi = scene.orbit_elevation
    cams = []
    for k in range(n):
        az = 2 * np.pi * (k + offset) / n + rng.uniform(-0.1, 0.1)
        el = np.radians(lo + (hi - lo) * ((k * 0.618034 + offset) % 1.0))
        eye = scene.orbit_radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera(width, height, f, f, width / 2, height / 2, look_at(eye, [0, 0, 0])))
    return cams


def trace_rays(scene: AnalyticScene, o, d):
    """Exact (premultiplied rgb, alpha) per ray."""
    n = o.shape[0]
    opaque = [p for p in scene.primitives if not np.isfinite(p.density)]
    media = [p for p in scene.primitives if np.isfinite(p.density)]
    t_hit = np.full(n, np.inf)
    hit_color = np.zeros((n, 3))
    for p in opaque:
        t0, _ = p.intervals(o, d)
        closer = t0 < t_hit
        if closer.any():
            pts = o[closer] + t0[closer, None] * d[closer]
            hit_color[closer] = p.color_at(pts, scene.light)
            t_hit[closer] = t0[closer]
    rgb = np.zeros((n, 3))
    trans = np.ones(n)
    if media:
        spans = [p.intervals(o, d) for p in media]
        ends = np.concatenate([np.stack(s, axis=1) for s in spans], axis=1)
        ends = np.minimum(ends, t_hit[:, None])
        bounds = np.sort(np.concatenate([np.zeros((n, 1)), ends], axis=1), axis=1)
        for k in range(bounds.shape[1] - 1):
            a, b = bounds[:, k], bounds[:, k + 1]
            fin = np.isfinite(b)
            b_fin = np.where(fin, b, a)
            length = np.where(fin, b_fin - np.where(np.isfinite(a), a, 0.0), 0.0)
            mid = 0.5 * (a + b_fin)
            tau = np.zeros(n)
            emit = np.zeros((n, 3))
            for p, (t0, t1) in zip(media, spans):
                act = (t0 <= mid) & (mid <= t1) & (length > 0)
                tau += np.where(act, p.density, 0.0)
                emit += np.where(act, p.density, 0.0)[:, None] * np.asarray(p.albedo)
            col = np.where(tau[:, None] > 0, emit / np.where(tau > 0, tau, 1.0)[:, None], 0.0)
            alpha = 1.0 - np.exp(-tau * length)
            rgb += (trans * alpha)[:, None] * col
            trans = trans * (1.0 - alpha)
    surf = np.isfinite(t_hit)
    rgb[surf] += trans[surf, None] * hit_color[surf]
    alpha = np.where(surf, 1.0, 1.0 - trans)
    return rgb, alpha


def oracle_render(scene: AnalyticScene, camera: Camera, spp: int = 64, seed: int = 0,
                  chunk: int = 1 << 18):
    """Supersampled reference image (H, W, 4): straight rgb plus alpha.

    Sub-pixel positions are stratified on a ceil(sqrt(spp))^2 grid, jittered
    from ``seed``, with ``spp`` strata kept.
    """
    if spp < 1:
        raise ValueError("spp must be >= 1")
    rng = np.random.default_rng(seed)
    side = int(np.ceil(np.sqrt(spp)))
    sx, sy = np.meshgrid(np.arange(side), np.arange(side))
    strata = np.stack([sx.ravel(), sy.ravel()], axis=1)[:spp]
    H, W = camera.height, camera.width
    jj, ii = np.mgrid[0:H, 0:W]
    pix = np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.float64)
    acc_rgb = np.zeros((H * W, 3))
    acc_a = np.zeros(H * W)
    rot = camera.rotation
    origin = camera.center
    for s in range(spp):
        jitter = (strata[s] + rng.random((H * W, 2))) / side if spp > 1 else np.full((H * W, 2), 0.5)
        xy = pix + jitter
        d_cam = np.stack([(xy[:, 0] - camera.cx) / camera.fx, (xy[:, 1] - camera.cy) / camera.fy,
                          np.ones(H * W)], axis=1)
        d = d_cam @ rot.T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(origin, d.shape)
        for c in range(0, H * W, chunk):
            rgb, a = trace_rays(scene, np.ascontiguousarray(o[c:c + chunk]), d[c:c + chunk])
            acc_rgb[c:c + chunk] += rgb
            acc_a[c:c + chunk] += a
    acc_rgb /= spp
    acc_a /= spp
    straight = np.where(acc_a[:, None] > 0, acc_rgb / np.maximum(acc_a, 1e-12)[:, None], 0.0)
    img = np.concatenate([np.clip(straight, 0, 1), acc_a[:, None]], axis=1)
    return img.reshape(H, W, 4)
