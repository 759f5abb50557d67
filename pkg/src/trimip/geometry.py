"""Pinhole cameras, per-pixel cones, inscribed spheres and AABB sampling.

Camera space follows the image convention: x right, y down, z forward, with the
image plane at z = 1. Directions are built in those units and rotated into the
world without rescaling, so the focal length of every cone is exactly 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FOCAL = 1.0


@dataclass(frozen=True)
class Aabb:
    b_min: np.ndarray
    b_max: np.ndarray

    def __post_init__(self):
        b_min = np.asarray(self.b_min, dtype=np.float64).reshape(3)
        b_max = np.asarray(self.b_max, dtype=np.float64).reshape(3)
        if not np.all(b_min < b_max):
            raise ValueError(f"degenerate AABB: {b_min} !< {b_max}")
        object.__setattr__(self, "b_min", b_min)
        object.__setattr__(self, "b_max", b_max)

    @classmethod
    def cube(cls, half: float = 1.0) -> "Aabb":
        return cls(np.full(3, -half), np.full(3, half))

    @property
    def extent(self) -> np.ndarray:
        return self.b_max - self.b_min

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def to_list(self):
        return [self.b_min.tolist(), self.b_max.tolist()]


@dataclass(frozen=True)
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    cam_to_world: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("camera needs at least one pixel")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        m = np.asarray(self.cam_to_world, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("cam_to_world must be 4x4")
        rot = m[:3, :3]
        if np.abs(rot.T @ rot - np.eye(3)).max() >= 1e-9:
            raise ValueError("cam_to_world rotation is not orthonormal")
        if not np.allclose(m[3], [0, 0, 0, 1]):
            raise ValueError("cam_to_world last row must be [0, 0, 0, 1]")
        object.__setattr__(self, "cam_to_world", m)

    @property
    def center(self) -> np.ndarray:
        return self.cam_to_world[:3, 3].copy()

    @property
    def rotation(self) -> np.ndarray:
        return self.cam_to_world[:3, :3]

    def scaled(self, factor: float) -> "Camera":
        """Same pose with the image resampled by ``factor`` (0.5 halves it)."""
        return Camera(
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=self.cx * factor,
            cy=self.cy * factor,
            cam_to_world=self.cam_to_world,
        )


@dataclass(frozen=True)
class Cone:
    origin: np.ndarray
    dir: np.ndarray
    f: float
    disc_radius: float
    d_norm: float

    @property
    def unit_dir(self) -> np.ndarray:
        return self.dir / self.d_norm

    @property
    def radius_ratio(self) -> float:
        return float(radius_ratio(self.d_norm, self.disc_radius, self.f))


@dataclass(frozen=True)
class SphereSample:
    center: np.ndarray
    radius: float
    t: float


@dataclass
class ConeBatch:
    """Structure-of-arrays view of many cones, as used by the renderer."""

    origins: np.ndarray      # (R, 3)
    dirs: np.ndarray         # (R, 3) unit axis directions
    ratios: np.ndarray       # (R,) sphere radius per unit distance
    disc_radius: np.ndarray  # (R,) pixel disc radius on the image plane

    def __len__(self):
        return self.origins.shape[0]

    def subset(self, idx) -> "ConeBatch":
        return ConeBatch(self.origins[idx], self.dirs[idx], self.ratios[idx], self.disc_radius[idx])

    @classmethod
    def concat(cls, batches) -> "ConeBatch":
        return cls(*(np.concatenate([getattr(b, k) for b in batches])
                     for k in ("origins", "dirs", "ratios", "disc_radius")))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at ``eye`` facing ``target`` (y-down image)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        right = np.cross(fwd, [1.0, 0.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    m = np.eye(4)
    m[:3, 0] = right
    m[:3, 1] = down
    m[:3, 2] = fwd
    m[:3, 3] = eye
    return m


def pixel_disc_radius(camera: Camera) -> float:
    dx = 1.0 / camera.fx
    dy = 1.0 / camera.fy
    return float(np.sqrt(dx * dy / np.pi))


def radius_ratio(d_norm, disc_radius, f=FOCAL, formula="inscribed"):
    """Sphere radius per unit distance along a cone axis.

    ``formula="inscribed"`` gives the largest sphere that stays inside the
    oblique cone; its binding generatrix runs through the rim point farthest
    from the optical axis. ``formula="published"`` uses the rim point nearest
    the axis instead, which agrees on-axis but overshoots the cone elsewhere.
    """
    d_norm = np.asarray(d_norm, dtype=np.float64)
    lateral = np.sqrt(np.maximum(d_norm * d_norm - f * f, 0.0))
    if formula == "inscribed":
        rim = lateral + disc_radius
    elif formula == "published":
        rim = lateral - disc_radius
    else:
        raise ValueError(f"unknown radius formula {formula!r}")
    return f * disc_radius / (d_norm * np.sqrt(rim * rim + f * f))


def _camera_dirs(camera: Camera, i, j):
    x = (np.asarray(i, dtype=np.float64) + 0.5 - camera.cx) / camera.fx
    y = (np.asarray(j, dtype=np.float64) + 0.5 - camera.cy) / camera.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    return d_cam @ camera.rotation.T


def cone_for_pixel(camera: Camera, i: int, j: int) -> Cone:
    if not (0 <= i < camera.width and 0 <= j < camera.height):
        raise IndexError(f"pixel ({i}, {j}) outside {camera.width}x{camera.height} image")
    d = _camera_dirs(camera, i, j)
    return Cone(camera.center, d, FOCAL, pixel_disc_radius(camera), float(np.linalg.norm(d)))


def cones_for_pixels(camera: Camera, i, j, formula="inscribed") -> ConeBatch:
    """Vectorised ``cone_for_pixel`` over integer pixel arrays."""
    i = np.asarray(i).ravel()
    j = np.asarray(j).ravel()
    d = _camera_dirs(camera, i, j)
    d_norm = np.linalg.norm(d, axis=-1)
    rdot = pixel_disc_radius(camera)
    return ConeBatch(
        origins=np.broadcast_to(camera.center, d.shape).copy(),
        dirs=d / d_norm[:, None],
        ratios=radius_ratio(d_norm, rdot, FOCAL, formula),
        disc_radius=np.full(d_norm.shape, rdot),
    )


def camera_cones(camera: Camera, formula="inscribed") -> ConeBatch:
    """All cones of an image in row-major order."""
    jj, ii = np.mgrid[0:camera.height, 0:camera.width]
    return cones_for_pixels(camera, ii, jj, formula)


def sphere_at(cone: Cone, t: float, formula="inscribed") -> SphereSample:
    if not t > 0:
        raise ValueError("sphere distance must be positive")
    center = cone.origin + t * cone.unit_dir
    r = t * float(radius_ratio(cone.d_norm, cone.disc_radius, cone.f, formula))
    return SphereSample(center, r, float(t))


def aabb_intersect(origin, unit_dir, aabb: Aabb):
    """Slab test clipped to t >= 0; returns ``(t_enter, t_exit)`` or None."""
    t_in, t_out = aabb_intersect_many(np.asarray(origin, dtype=np.float64)[None],
                                      np.asarray(unit_dir, dtype=np.float64)[None], aabb)
    if not np.isfinite(t_in[0]):
        return None
    return float(t_in[0]), float(t_out[0])


def aabb_intersect_many(origins, dirs, aabb: Aabb):
    """Vectorised slab test; misses get ``t_enter = t_exit = inf``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (aabb.b_min - origins) * inv
        t1 = (aabb.b_max - origins) * inv
    # zero direction component: inside the slab -> (-inf, inf), outside -> empty
    zero = dirs == 0
    inside = (origins >= aabb.b_min) & (origins <= aabb.b_max)
    lo_ax = np.where(zero, np.where(inside, -np.inf, np.inf), np.minimum(t0, t1))
    hi_ax = np.where(zero, np.where(inside, np.inf, -np.inf), np.maximum(t0, t1))
    t_enter = np.maximum(lo_ax.max(axis=1), 0.0)
    t_exit = hi_ax.min(axis=1)
    miss = t_exit < t_enter
    t_enter = np.where(miss, np.inf, t_enter)
    t_exit = np.where(miss, np.inf, t_exit)
    return t_enter, t_exit


def default_step(aabb: Aabb, n: int = 256) -> float:
    return aabb.diagonal / n


@dataclass
class PackedSamples:
    """Distances for many rays, concatenated; ray ``r`` owns ``offsets[r]:offsets[r+1]``."""

    t: np.ndarray
    ray: np.ndarray
    offsets: np.ndarray

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    @classmethod
    def from_counts(cls, t, counts):
        offsets = np.zeros(counts.shape[0] + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        ray = np.repeat(np.arange(counts.shape[0], dtype=np.int64), counts)
        return cls(t, ray, offsets)

    def select(self, keep) -> "PackedSamples":
        counts = np.bincount(self.ray[keep], minlength=self.offsets.shape[0] - 1)
        return PackedSamples.from_counts(self.t[keep], counts)


def uniform_distances(t_enter, t_exit, step, max_samples=None, offset=None) -> PackedSamples:
    """Distances ``t_enter + (k + u) * step`` strictly inside each interval.

    ``u`` is 0.5 (midpoints) unless a per-ray ``offset`` in [0, 1) is given.
    """
    hit = np.isfinite(t_enter)
    span = np.zeros(t_enter.shape)
    span[hit] = t_exit[hit] - t_enter[hit]
    t_enter = np.where(hit, t_enter, 0.0)
    u = np.full(t_enter.shape, 0.5) if offset is None else np.asarray(offset, dtype=np.float64)
    counts = np.ceil(span / step - u).astype(np.int64)
    counts = np.maximum(counts, 0)
    # sample k lies inside iff (k + u) * step < span
    counts = np.where((counts > 0) & ((counts - 1 + u) * step >= span), counts - 1, counts)
    if max_samples is not None:
        counts = np.minimum(counts, max_samples)
    packed = PackedSamples.from_counts(np.empty(0), counts)
    k = np.arange(packed.offsets[-1]) - packed.offsets[:-1][packed.ray]
    packed.t = t_enter[packed.ray] + (k + u[packed.ray]) * step
    return packed


def sample_distances(cone: Cone, aabb: Aabb, step: float, grid=None, near_far=None):
    """Sorted sample distances along one cone axis, skipping empty grid cells."""
    if not step > 0:
        raise ValueError("step must be positive")
    batch = ConeBatch(cone.origin[None], cone.unit_dir[None], np.array([cone.radius_ratio]),
                      np.array([cone.disc_radius]))
    packed = sample_batch(batch, aabb, step, grid, near_far)
    return packed.t


def sample_batch(cones: ConeBatch, aabb: Aabb, step: float, grid=None, near_far=None,
                 offset=None) -> PackedSamples:
    t_in, t_out = aabb_intersect_many(cones.origins, cones.dirs, aabb)
    if near_far is not None:
        miss = ~np.isfinite(t_in)
        t_in = np.where(miss, near_far[0], t_in)
        t_out = np.where(miss, near_far[1], t_out)
    packed = uniform_distances(t_in, t_out, step, offset=offset)
    if grid is not None and packed.t.size:
        pts = cones.origins[packed.ray] + packed.t[:, None] * cones.dirs[packed.ray]
        packed = packed.select(grid.occupied_at(pts))
    return packed
