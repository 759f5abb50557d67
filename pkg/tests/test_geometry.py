import math

import numpy as np
import pytest
from conftest import random_camera
from hypothesis import given
from hypothesis import strategies as st
from oracles import aabb_faces_bruteforce, generatrix_distance

from trimip.geometry import (Aabb, Camera, Cone, aabb_intersect, aabb_intersect_many,
                             camera_cones, cone_for_pixel, default_step, look_at,
                             pixel_disc_radius, radius_ratio, sample_distances, sphere_at,
                             uniform_distances)
from trimip.render import OccupancyGrid


def cam(fx=1.0, fy=None, w=2, h=2):
    fy = fx if fy is None else fy
    return Camera(w, h, fx, fy, w / 2, h / 2)


class TestDiscRadius:
    def test_unit_focal(self):
        assert pixel_disc_radius(cam(1.0)) == pytest.approx(1 / math.sqrt(math.pi), rel=1e-12)
        assert pixel_disc_radius(cam(1.0)) == pytest.approx(0.564190, abs=1e-6)

    def test_focal_800(self):
        assert pixel_disc_radius(cam(800.0)) == pytest.approx(7.0523e-4, rel=1e-4)

    def test_anisotropic(self):
        assert pixel_disc_radius(cam(2.0, 8.0)) == pytest.approx(0.141047, abs=1e-6)


class TestCamera:
    def test_rejects_bad_intrinsics(self):
        with pytest.raises(ValueError):
            Camera(4, 4, 0.0, 1.0, 2, 2)
        with pytest.raises(ValueError):
            Camera(0, 4, 1.0, 1.0, 2, 2)

    def test_rejects_non_orthonormal_pose(self):
        m = np.eye(4)
        m[0, 0] = 1.001
        with pytest.raises(ValueError):
            Camera(4, 4, 1.0, 1.0, 2, 2, m)

    def test_scaled_halves_intrinsics(self):
        c = Camera(800, 600, 800.0, 800.0, 400.0, 300.0).scaled(0.5)
        assert (c.width, c.height, c.fx, c.fy, c.cx, c.cy) == (400, 300, 400.0, 400.0, 200.0, 150.0)

    def test_look_at_faces_target(self):
        m = look_at([0, -3, 1], [0, 0, 0])
        fwd = m[:3, 2]
        expect = np.array([0, 3, -1]) / math.sqrt(10)
        assert np.allclose(fwd, expect)
        assert np.allclose(m[:3, :3].T @ m[:3, :3], np.eye(3))


class TestConeForPixel:
    def test_center_pixel_on_axis(self):
        c = cone_for_pixel(Camera(4, 4, 2.0, 2.0, 2.0, 2.0), 1, 1)
        # pixel (1,1) of a 4x4 image with principal point (2,2) is off-centre by half a pixel
        c = cone_for_pixel(Camera(3, 3, 2.0, 2.0, 1.5, 1.5), 1, 1)
        assert np.allclose(c.dir, [0, 0, 1]) and c.d_norm == pytest.approx(1.0) and c.f == 1.0

    def test_offset_pixel(self):
        # (i + 0.5 - cx) / fx = 1 -> camera direction (1, 0, 1)
        c = cone_for_pixel(Camera(3, 3, 1.0, 1.0, 0.5, 1.5), 1, 1)
        assert np.allclose(c.dir, [1, 0, 1])
        assert c.d_norm == pytest.approx(math.sqrt(2))

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            cone_for_pixel(cam(), 2, 0)
        with pytest.raises(IndexError):
            cone_for_pixel(cam(), 0, -1)

    def test_lateral_offset_matches_projection(self, rng):
        # ||d||^2 - f^2 equals the squared lateral offset of the pixel centre,
        # computed here by projecting d onto the camera's image axes directly
        for _ in range(50):
            camera = random_camera(rng)
            i, j = int(rng.integers(camera.width)), int(rng.integers(camera.height))
            c = cone_for_pixel(camera, i, j)
            right, down, fwd = camera.cam_to_world[:3, 0], camera.cam_to_world[:3, 1], camera.cam_to_world[:3, 2]
            assert c.dir @ fwd == pytest.approx(1.0, abs=1e-12)
            lateral = (c.dir @ right) ** 2 + (c.dir @ down) ** 2
            assert c.d_norm ** 2 - c.f ** 2 == pytest.approx(lateral, rel=1e-9, abs=1e-12)
            expect = ((i + 0.5 - camera.cx) / camera.fx) ** 2 + ((j + 0.5 - camera.cy) / camera.fy) ** 2
            assert lateral == pytest.approx(expect, rel=1e-9, abs=1e-12)


class TestSphereAt:
    def make(self, d, rdot=0.1):
        d = np.asarray(d, dtype=np.float64)
        return Cone(np.zeros(3), d, 1.0, rdot, float(np.linalg.norm(d)))

    def test_on_axis(self):
        s = sphere_at(self.make([0, 0, 1]), 1.0)
        assert s.radius == pytest.approx(0.1 / math.sqrt(1.01), rel=1e-12)
        assert s.radius == pytest.approx(0.0995037, abs=1e-7)

    def test_off_axis_published_form(self):
        s = sphere_at(self.make([1, 0, 1]), math.sqrt(2), formula="published")
        assert s.radius == pytest.approx(0.1 / math.sqrt(1.81), rel=1e-12)
        assert s.radius == pytest.approx(0.0743294, abs=1e-7)

    def test_off_axis_inscribed_matches_tangency(self):
        cone = self.make([1, 0, 1])
        s = sphere_at(cone, math.sqrt(2))
        dist = generatrix_distance(cone.origin, cone.dir, np.eye(3), 0.1, s.center)
        assert s.radius == pytest.approx(dist, rel=1e-6)
        # the published form overshoots the cone surface for this pixel
        pub = sphere_at(cone, math.sqrt(2), formula="published")
        assert pub.radius > dist * 1.05

    def test_metric_distance(self):
        cone = self.make([0.3, -0.2, 1])
        s = sphere_at(cone, 2.5)
        assert np.linalg.norm(s.center - cone.origin) == pytest.approx(2.5, rel=1e-12)

    def test_linear_in_t(self):
        cone = self.make([0.3, -0.2, 1])
        assert sphere_at(cone, 2.0).radius / sphere_at(cone, 1.0).radius == 2.0

    def test_rejects_nonpositive_t(self):
        with pytest.raises(ValueError):
            sphere_at(self.make([0, 0, 1]), 0.0)

    def test_pathological_disc_finite(self):
        assert np.isfinite(sphere_at(self.make([0.01, 0, 1], rdot=5.0), 1.0).radius)

    def test_unknown_formula(self):
        with pytest.raises(ValueError):
            radius_ratio(1.0, 0.1, 1.0, "bogus")

    @given(st.integers(0, 10_000), st.floats(0.01, 50.0), st.floats(0.01, 50.0))
    def test_ratio_constant_along_cone(self, seed, t1, t2):
        rng = np.random.default_rng(seed)
        camera = random_camera(rng)
        c = cone_for_pixel(camera, int(rng.integers(camera.width)), int(rng.integers(camera.height)))
        r1, r2 = sphere_at(c, t1).radius, sphere_at(c, t2).radius
        assert abs((r1 / t1) / (r2 / t2) - 1) < 1e-9

    @given(st.integers(0, 10_000))
    def test_tangent_to_cone(self, seed):
        rng = np.random.default_rng(seed)
        camera = random_camera(rng)
        c = cone_for_pixel(camera, int(rng.integers(camera.width)), int(rng.integers(camera.height)))
        t = float(rng.uniform(0.1, 10.0))
        s = sphere_at(c, t)
        dist = generatrix_distance(c.origin, c.dir, camera.rotation, c.disc_radius, s.center)
        assert abs(dist - s.radius) / s.radius < 1e-6


class TestAabbIntersect:
    box = Aabb.cube(1.0)

    def test_axis_aligned(self):
        assert aabb_intersect([0, 0, -2], [0, 0, 1], self.box) == (1.0, 3.0)

    def test_inside_clipped(self):
        t0, t1 = aabb_intersect([0.2, 0, 0], [1, 0, 0], self.box)
        assert t0 == 0.0 and t1 == pytest.approx(0.8)

    def test_miss_and_behind(self):
        assert aabb_intersect([0, 3, -2], [0, 0, 1], self.box) is None
        assert aabb_intersect([0, 0, 2], [0, 0, 1], self.box) is None

    def test_grazing_edge(self):
        d = np.array([1.0, -1.0, 0.0]) / math.sqrt(2)
        hit = aabb_intersect([0, 2, 0], d, self.box)
        assert hit is not None
        assert hit[0] == pytest.approx(math.sqrt(2)) and hit[1] == pytest.approx(hit[0], abs=1e-12)
        ref = aabb_faces_bruteforce(np.array([0.0, 2, 0]), d, self.box.b_min, self.box.b_max)
        assert ref[0] == pytest.approx(hit[0]) and ref[1] == pytest.approx(hit[1])

    def test_zero_component_slabs(self):
        assert aabb_intersect([0.5, 0.5, -3], [0, 0, 1], self.box) == (2.0, 4.0)
        assert aabb_intersect([1.5, 0.5, -3], [0, 0, 1], self.box) is None

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            Aabb([0, 0, 0], [1, 0, 1])

    def test_matches_face_bruteforce(self):
        rng = np.random.default_rng(7)
        n = 100_000
        box = Aabb([-1.0, -0.5, -0.25], [1.0, 0.5, 0.75])
        o = rng.uniform(-3, 3, (n, 3))
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        t0, t1 = aabb_intersect_many(o, d, box)
        hits = np.isfinite(t0)
        # vectorised face oracle
        ref_lo = np.full(n, np.inf)
        ref_hi = np.full(n, -np.inf)
        for axis in range(3):
            others = [a for a in range(3) if a != axis]
            for bound in (box.b_min[axis], box.b_max[axis]):
                t = (bound - o[:, axis]) / d[:, axis]
                p = o + t[:, None] * d
                ok = np.all((p[:, others] >= box.b_min[others] - 1e-12)
                            & (p[:, others] <= box.b_max[others] + 1e-12), axis=1)
                ref_lo = np.where(ok, np.minimum(ref_lo, t), ref_lo)
                ref_hi = np.where(ok, np.maximum(ref_hi, t), ref_hi)
        ref_hit = np.isfinite(ref_lo) & (ref_hi >= 0)
        assert np.array_equal(hits, ref_hit)
        assert np.allclose(t0[hits], np.maximum(ref_lo[hits], 0), atol=1e-9)
        assert np.allclose(t1[hits], ref_hi[hits], atol=1e-9)
        # spot-check the scalar oracle on a few rays
        for k in range(0, n, 5000):
            ref = aabb_faces_bruteforce(o[k], d[k], box.b_min, box.b_max)
            assert (ref is None) == (not hits[k])


class TestSampleDistances:
    def cone(self):
        return Cone(np.array([0.0, 0, -2]), np.array([0.0, 0, 1]), 1.0, 0.01, 1.0)

    def test_uniform_midpoints(self):
        t = sample_distances(self.cone(), Aabb.cube(1.0), 0.5)
        assert np.allclose(t, [1.25, 1.75, 2.25, 2.75])

    def test_miss_is_empty(self):
        c = Cone(np.array([5.0, 0, -2]), np.array([0.0, 0, 1]), 1.0, 0.01, 1.0)
        assert sample_distances(c, Aabb.cube(1.0), 0.1).size == 0

    def test_near_far_fallback(self):
        c = Cone(np.array([5.0, 0, -2]), np.array([0.0, 0, 1]), 1.0, 0.01, 1.0)
        assert np.allclose(sample_distances(c, Aabb.cube(1.0), 0.5, near_far=(1.0, 2.0)), [1.25, 1.75])

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            sample_distances(self.cone(), Aabb.cube(1.0), 0.0)

    def test_grid_full_and_empty(self):
        box = Aabb.cube(1.0)
        ref = sample_distances(self.cone(), box, 0.05)
        full = OccupancyGrid.full(box, 8)
        assert np.array_equal(sample_distances(self.cone(), box, 0.05, full), ref)
        empty = OccupancyGrid.empty(box, 8)
        assert sample_distances(self.cone(), box, 0.05, empty).size == 0

    def test_default_step(self):
        assert default_step(Aabb.cube(1.0)) == pytest.approx(2 * math.sqrt(3) / 256)

    @given(st.integers(0, 10_000))
    def test_grid_subset_and_monotone(self, seed):
        rng = np.random.default_rng(seed)
        box = Aabb.cube(1.0)
        grid = OccupancyGrid.empty(box, 8)
        grid.binary = rng.random((8, 8, 8)) < 0.5
        camera = random_camera(rng, 6, 6)
        for cone_idx in range(3):
            c = cone_for_pixel(camera, cone_idx, cone_idx)
            step = float(rng.uniform(0.01, 0.2))
            ref = sample_distances(c, box, step)
            sub = sample_distances(c, box, step, grid)
            assert np.all(np.isin(sub, ref))
            assert np.all(np.diff(sub) > 0) and np.all(np.diff(ref) > 0)


class TestLatticeOffset:
    def test_examples(self):
        p = uniform_distances(np.array([1.0]), np.array([3.0]), 0.5, offset=np.array([0.0]))
        assert np.allclose(p.t, [1.0, 1.5, 2.0, 2.5])
        p = uniform_distances(np.array([1.0]), np.array([3.0]), 0.5, offset=np.array([0.9]))
        assert np.allclose(p.t, [1.45, 1.95, 2.45, 2.95])

    def test_half_is_midpoints(self):
        a = uniform_distances(np.array([0.3, 1.0]), np.array([1.7, 1.05]), 0.1)
        b = uniform_distances(np.array([0.3, 1.0]), np.array([1.7, 1.05]), 0.1,
                              offset=np.array([0.5, 0.5]))
        assert np.array_equal(a.t, b.t) and np.array_equal(a.offsets, b.offsets)

    @given(st.integers(0, 10_000))
    def test_inside_interval_and_complete(self, seed):
        rng = np.random.default_rng(seed)
        n = 20
        t0 = rng.uniform(0, 2, n)
        t1 = t0 + rng.uniform(0, 1, n)
        u = rng.random(n)
        step = float(rng.uniform(0.01, 0.3))
        p = uniform_distances(t0, t1, step, offset=u)
        for r in range(n):
            t = p.t[p.offsets[r]:p.offsets[r + 1]]
            assert np.all((t >= t0[r]) & (t < t1[r]))
            assert np.allclose(np.diff(t), step)
            # the next lattice point would leave the interval (up to rounding)
            assert t0[r] + (t.size + u[r]) * step >= t1[r] - 1e-12


def test_camera_cones_row_major():
    camera = Camera(3, 2, 2.0, 2.0, 1.5, 1.0)
    cones = camera_cones(camera)
    c = cone_for_pixel(camera, 2, 1)
    assert np.allclose(cones.dirs[1 * 3 + 2], c.unit_dir)
    assert cones.ratios[5] == pytest.approx(c.radius_ratio)
