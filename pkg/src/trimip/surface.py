"""Proxy surface for fast rendering: density grid, marching cubes, BVH ray casts
and the narrow-band (hybrid) renderer that only samples around the surface hit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from ._mc_tables import CORNERS, EDGES, TRI_TABLE
from .encoding import TriMipEncoding
from .field import FieldParams
from .geometry import Aabb, Cone, ConeBatch, PackedSamples, camera_cones
from .render import TILE, CompositeResult, RayRender, _composite_packed, _eval_samples, density_at

MIN_T = 1e-6
LEAF_SIZE = 4


@dataclass
class DensityGrid:
    values: np.ndarray   # (N, N, N) density at cell centres, indexed [x, y, z]
    aabb: Aabb

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def cell_size(self) -> np.ndarray:
        return self.aabb.extent / np.asarray(self.values.shape)

    def points(self) -> np.ndarray:
        axes = [self.aabb.b_min[a] + (np.arange(n) + 0.5) * self.cell_size[a]
                for a, n in enumerate(self.values.shape)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def extract_density_grid(enc: TriMipEncoding, params: FieldParams, resolution: int,
                         chunk: int = 1 << 16) -> DensityGrid:
    """Density at every cell centre; the query radius is half the cell diagonal."""
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    grid = DensityGrid(np.zeros((resolution,) * 3), enc.aabb)
    radius = 0.5 * float(np.linalg.norm(grid.cell_size))
    tau = density_at(enc, params, grid.points().reshape(-1, 3), radius, chunk)
    grid.values = tau.reshape((resolution,) * 3)
    return grid


def default_iso(step: float, alpha: float = 0.05) -> float:
    """Density at which one marching step has opacity ``alpha``."""
    return float(-np.log1p(-alpha) / step)


def default_delta_t(step: float, enc: TriMipEncoding, steps: float = 3.0, texels: float = 8.0) -> float:
    """Hybrid half-band: ``steps`` marching steps or ``texels`` base texels, whichever is wider.

    A learned surface is only as sharp as the planes allow, so its opacity
    ramp spans a few texels; with coarse planes a band of three steps ends
    before the ray turns opaque.
    """
    h, w, _ = enc.shape
    texel = float(np.max(enc.aabb.extent)) / min(h, w)
    return max(steps * step, texels * texel)


@dataclass
class Bvh:
    bmin: np.ndarray
    bmax: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray     # > 0 marks a leaf
    tris: np.ndarray      # (T, 3, 3) triangle corners in leaf order
    order: np.ndarray     # leaf-order position -> original triangle index


def build_bvh(vertices, triangles, leaf_size: int = LEAF_SIZE) -> Bvh:
    """Median split on the longest centroid axis."""
    tri_pts = np.asarray(vertices, dtype=np.float64)[np.asarray(triangles)]
    n = tri_pts.shape[0]
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        return Bvh(np.zeros((0, 3)), np.zeros((0, 3)), empty, empty, empty, empty,
                   np.zeros((0, 3, 3)), empty)
    lo_t = tri_pts.min(axis=1)
    hi_t = tri_pts.max(axis=1)
    cent = tri_pts.mean(axis=1)
    order = np.arange(n)
    bmin, bmax, left, right, start, count = [], [], [], [], [], []

    def new_node(s, e):
        idx = order[s:e]
        bmin.append(lo_t[idx].min(axis=0))
        bmax.append(hi_t[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(s)
        count.append(e - s)
        return len(bmin) - 1

    stack = [(new_node(0, n), 0, n)]
    while stack:
        node, s, e = stack.pop()
        if e - s <= leaf_size:
            continue
        idx = order[s:e]
        c = cent[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        mid = (e - s) // 2
        # stable tie-break keeps the build deterministic
        part = np.argsort(c[:, axis], kind="stable")
        order[s:e] = idx[part]
        l_node = new_node(s, s + mid)
        r_node = new_node(s + mid, e)
        left[node], right[node] = l_node, r_node
        count[node] = 0
        stack.append((r_node, s + mid, e))
        stack.append((l_node, s, s + mid))
    as_i = lambda a: np.asarray(a, dtype=np.int64)  # noqa: E731
    return Bvh(np.asarray(bmin), np.asarray(bmax), as_i(left), as_i(right), as_i(start),
               as_i(count), np.ascontiguousarray(tri_pts[order]), order)


class ProxyMesh:
    """Triangle mesh with a lazily built BVH."""

    def __init__(self, vertices, triangles):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        self._bvh = None

    def __len__(self):
        return self.triangles.shape[0]

    @property
    def bvh(self) -> Bvh:
        if self._bvh is None:
            self._bvh = build_bvh(self.vertices, self.triangles)
        return self._bvh

    def triangle_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def volume(self) -> float:
        """Signed enclosed volume (positive when normals face outwards)."""
        p = self.vertices[self.triangles]
        return float(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0)

    def edges(self) -> np.ndarray:
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]],
                            self.triangles[:, [2, 0]]])
        return np.sort(e, axis=1)

    def is_watertight(self) -> bool:
        """Every edge is shared by exactly two triangles."""
        if len(self) == 0:
            return False
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles)
        n_edges = len(np.unique(self.edges(), axis=0))
        return int(len(used) - n_edges + len(self))


def _edge_geometry():
    corners = np.asarray(CORNERS, dtype=np.int64)
    start = np.empty((12, 3), dtype=np.int64)
    axis = np.empty(12, dtype=np.int64)
    for e, (a, b) in enumerate(EDGES):
        start[e] = np.minimum(corners[a], corners[b])
        axis[e] = int(np.argmax(np.abs(corners[a] - corners[b])))
    table = np.full((256, 15), -1, dtype=np.int64)
    n_tri = np.zeros(256, dtype=np.int64)
    for c, entry in enumerate(TRI_TABLE):
        table[c, :len(entry)] = entry
        n_tri[c] = len(entry) // 3
    return corners, start, axis, table, n_tri


_CORNERS, _EDGE_START, _EDGE_AXIS, _TABLE, _NTRI = _edge_geometry()


def marching_cubes(grid: DensityGrid, iso: float, weld_tol: float = 1e-7) -> ProxyMesh:
    """Iso-surface ``density == iso`` through the grid's sample points.

    Vertices on a shared cube edge are generated once (edge-id welding) and
    then merged within ``weld_tol``; triangles face towards lower density.
    """
    if not iso > 0:
        raise ValueError("iso must be positive")
    V = np.asarray(grid.values, dtype=np.float64)
    nx, ny, nz = V.shape
    if min(V.shape) < 2:
        return ProxyMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    below = V < iso
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for k, (dx, dy, dz) in enumerate(_CORNERS):
        case |= below[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz].astype(np.int64) << k
    active = np.nonzero((case != 0) & (case != 255))
    if active[0].size == 0:
        return ProxyMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    origin = np.stack(active, axis=1)
    cases = case[active]
    per_cube = _NTRI[cases]
    cube = np.repeat(np.arange(cases.size), per_cube)
    slot = np.arange(cube.size) - np.repeat(np.cumsum(per_cube) - per_cube, per_cube)
    tri_edges = np.stack([_TABLE[cases[cube], 3 * slot + j] for j in range(3)], axis=1)

    # global edge id: axis * (nx*ny*nz) + flat index of the edge's lower endpoint
    lower = origin[cube][:, None, :] + _EDGE_START[tri_edges]
    flat = (lower[..., 0] * ny + lower[..., 1]) * nz + lower[..., 2]
    gid = _EDGE_AXIS[tri_edges] * (nx * ny * nz) + flat
    uniq, inverse = np.unique(gid.ravel(), return_inverse=True)
    tris = inverse.reshape(-1, 3)

    axis = uniq // (nx * ny * nz)
    rest = uniq % (nx * ny * nz)
    p0 = np.stack([rest // (ny * nz), (rest // nz) % ny, rest % nz], axis=1)
    p1 = p0.copy()
    p1[np.arange(p1.shape[0]), axis] += 1
    v0 = V[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = V[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = np.clip((iso - v0) / (v1 - v0), 0.0, 1.0)
    pos_idx = p0 + t[:, None] * (p1 - p0)
    verts = grid.aabb.b_min + (pos_idx + 0.5) * grid.cell_size

    # merge coincident vertices (edge cuts landing exactly on a shared corner)
    key = np.round(verts / weld_tol).astype(np.int64)
    _, first, remap = np.unique(key, axis=0, return_index=True, return_inverse=True)
    remap = remap.ravel()
    verts = verts[first]
    tris = remap[tris]
    keep = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    tris = tris[keep]
    return ProxyMesh(verts, tris)


def ray_mesh_hit_many(mesh: ProxyMesh, origins, dirs):
    """Nearest hit per ray: (t, original triangle index), inf/-1 on a miss."""
    origins = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    dirs = np.ascontiguousarray(np.atleast_2d(dirs), dtype=np.float64)
    n = origins.shape[0]
    t = np.full(n, np.inf)
    tri = np.full(n, -1, dtype=np.int64)
    if len(mesh) == 0 or n == 0:
        return t, tri
    b = mesh.bvh
    kernels.bvh_closest_hit(b.bmin, b.bmax, b.left, b.right, b.start, b.count, b.tris,
                            origins, dirs, t, tri)
    hit = tri >= 0
    tri[hit] = b.order[tri[hit]]
    return t, tri


def ray_mesh_hit(mesh: ProxyMesh, origin, unit_dir):
    """Distance to the nearest triangle along the ray, or None."""
    t, _ = ray_mesh_hit_many(mesh, np.asarray(origin)[None], np.asarray(unit_dir)[None])
    return float(t[0]) if np.isfinite(t[0]) else None


def hybrid_sample(t_hit, delta_t: float, n: int, rng=None) -> np.ndarray:
    """``n`` midpoints over [t_hit - delta_t, t_hit + delta_t], kept above 1e-6.

    With ``rng`` each sample is jittered uniformly within its stratum instead.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not delta_t > 0:
        raise ValueError("delta_t must be positive")
    t_hit = np.asarray(t_hit, dtype=np.float64)
    width = 2.0 * delta_t / n
    u = np.full(n, 0.5) if rng is None else rng.random(t_hit.shape + (n,))
    t = t_hit[..., None] - delta_t + (np.arange(n) + u) * width
    return np.maximum(t, MIN_T)


def render_cones_hybrid(cones: ConeBatch, mesh: ProxyMesh, enc: TriMipEncoding,
                        params: FieldParams, delta_t: float, n: int,
                        background=(1.0, 1.0, 1.0)) -> RayRender:
    bg = np.asarray(background, dtype=np.float64)
    n_rays = len(cones)
    t_hit, _ = ray_mesh_hit_many(mesh, cones.origins, cones.dirs)
    hit = np.isfinite(t_hit)
    counts = np.where(hit, n, 0).astype(np.int64)
    ts = hybrid_sample(t_hit[hit], delta_t, n).ravel()
    packed = PackedSamples.from_counts(ts, counts)
    if ts.size == 0:
        return RayRender(np.tile(bg, (n_rays, 1)), np.zeros(n_rays), np.zeros(n_rays), counts)
    tau, rgb, _, _, _ = _eval_samples(cones, packed, enc, params)
    res = _composite_packed(tau, rgb, np.full(tau.shape, 2.0 * delta_t / n), packed.t,
                            packed.offsets, bg)
    return RayRender(res["rgb"], res["opacity"], res["depth"], counts)


def render_pixel_hybrid(cone: Cone, mesh: ProxyMesh, enc: TriMipEncoding, params: FieldParams,
                        delta_t: float, n: int, background=(1.0, 1.0, 1.0)) -> CompositeResult:
    batch = ConeBatch(np.asarray(cone.origin, dtype=np.float64)[None], cone.unit_dir[None],
                      np.array([cone.radius_ratio]), np.array([cone.disc_radius]))
    r = render_cones_hybrid(batch, mesh, enc, params, delta_t, n, background)
    return CompositeResult(r.rgb[0], float(r.opacity[0]), float(r.depth[0]), np.zeros(0))


def render_image_hybrid(camera, mesh: ProxyMesh, enc: TriMipEncoding, params: FieldParams,
                        delta_t: float, n: int, background=(1.0, 1.0, 1.0), return_stats=False):
    cones = camera_cones(camera)
    parts = [render_cones_hybrid(cones.subset(np.arange(s, min(s + TILE, len(cones)))), mesh,
                                 enc, params, delta_t, n, background)
             for s in range(0, len(cones), TILE)]
    rgb = np.concatenate([p.rgb for p in parts])
    opa = np.concatenate([p.opacity for p in parts])
    img = np.concatenate([rgb, opa[:, None]], axis=1).reshape(camera.height, camera.width, 4)
    if return_stats:
        shape = (camera.height, camera.width)
        return img, {"depth": np.concatenate([p.depth for p in parts]).reshape(shape),
                     "n_evals": np.concatenate([p.n_evals for p in parts]).reshape(shape)}
    return img


def write_obj(path, mesh: ProxyMesh):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.triangles + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")


def read_obj(path) -> ProxyMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return ProxyMesh(np.asarray(verts).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3))
