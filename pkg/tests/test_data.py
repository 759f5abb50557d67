import json
import math

import numpy as np
import pytest

from trimip.data import (Dataset, DatasetError, Frame, camera_from_gl, camera_to_gl,
                         compile_multiscale, downscale_box, load_blender_dataset,
                         load_blender_split, load_png, save_png, write_blender_split)
from trimip.geometry import Aabb, Camera, camera_cones, look_at
from trimip.scenes import (AnalyticScene, Primitive, generate_scene, oracle_render, orbit_cameras,
                           trace_rays)


class TestScenes:
    def test_single_sphere(self):
        sc = generate_scene("single-sphere")
        (p,) = sc.primitives
        assert p.kind == "sphere" and p.size[0] == 0.5 and np.all(p.center == 0) and p.lambert

    def test_checker_plane(self):
        sc = generate_scene("checker-plane")
        (p,) = sc.primitives
        assert p.kind == "plane" and p.checker == 32
        assert np.all(sc.aabb.b_min <= p.center - [0.5, 0.5, 0]) and np.all(sc.aabb.b_max >= p.center + [0.5, 0.5, 0])

    def test_deterministic(self):
        a, b = generate_scene("boxes", seed=3), generate_scene("boxes", seed=3)
        assert all(np.array_equal(p.center, q.center) and np.array_equal(p.size, q.size)
                   for p, q in zip(a.primitives, b.primitives))
        c = generate_scene("boxes", seed=4)
        assert not np.array_equal(a.primitives[0].center, c.primitives[0].center)

    def test_bad_specs(self):
        with pytest.raises(ValueError):
            generate_scene("")
        with pytest.raises(ValueError):
            generate_scene("teapot")

    def test_invalid_primitive(self):
        with pytest.raises(ValueError):
            Primitive("sphere", [0, 0, 0], [1], density=-1)
        with pytest.raises(ValueError):
            Primitive("sphere", [0, 0, 0], [1], albedo=(1.2, 0, 0))


class TestOracleRender:
    def test_empty_scene(self):
        sc = AnalyticScene("empty", [], Aabb.cube(1.0), background=(0.3, 0.3, 0.3))
        img = oracle_render(sc, orbit_cameras(sc, 1, 8)[0], spp=4)
        assert np.all(img[..., 3] == 0) and np.all(img[..., :3] == 0)

    def test_opaque_plane_fills_view(self):
        sc = AnalyticScene("wall", [Primitive("plane", [0, 0, 0], [100, 100], albedo=(0.2, 0.4, 0.6))],
                           Aabb.cube(1.0))
        cam = Camera(8, 8, 8, 8, 4, 4, look_at([0, 0, 3], [0, 0, 0], up=[0, 1, 0]))
        img = oracle_render(sc, cam, spp=4)
        assert np.allclose(img[..., :3], [0.2, 0.4, 0.6]) and np.all(img[..., 3] == 1)

    def test_homogeneous_medium_exact(self):
        # a ray through the centre of a sphere of density 2 and radius 0.5 crosses length 1
        sc = AnalyticScene("fog", [Primitive("sphere", [0, 0, 0], [0.5], density=2.0,
                                             albedo=(1.0, 0.5, 0.0))], Aabb.cube(1.0))
        rgb, a = trace_rays(sc, np.array([[0, 0, -3.0]]), np.array([[0, 0, 1.0]]))
        assert a[0] == pytest.approx(1 - math.exp(-2.0), rel=1e-14)
        assert np.allclose(rgb[0], a[0] * np.array([1.0, 0.5, 0.0]), rtol=1e-14)

    def test_deterministic(self):
        sc = generate_scene("checker-sphere")
        cam = orbit_cameras(sc, 1, 16)[0]
        assert np.array_equal(oracle_render(sc, cam, 4, seed=2), oracle_render(sc, cam, 4, seed=2))

    @staticmethod
    def _grazing():
        sc = generate_scene("checker-plane")
        cam = Camera(32, 32, 60.0, 60.0, 16, 16, look_at([0, -1.5, 0.3], [0, 0, 0]))
        return sc, cam

    @staticmethod
    def _psnr_between(sc, cam, spp_a, spp_b):
        a = oracle_render(sc, cam, spp_a, seed=0)
        b = oracle_render(sc, cam, spp_b, seed=1)
        fa = a[..., :3] * a[..., 3:] + (1 - a[..., 3:])
        fb = b[..., :3] * b[..., 3:] + (1 - b[..., 3:])
        return 10 * math.log10(1 / np.mean((fa - fb) ** 2))

    @pytest.mark.xfail(strict=True, reason="jittered stratified sampling of checker edges converges "
                       "at MSE ~ N^-1.5; 64 vs 256 samples measure about 36 dB, 45 dB needs ~256 vs 1024")
    def test_converged_at_grazing_view(self):
        sc, cam = self._grazing()
        assert self._psnr_between(sc, cam, 64, 256) > 45.0

    def test_stratified_convergence_rate(self):
        # quadrupling the samples should buy about 10 log10(4^1.5) = 9 dB
        sc, cam = self._grazing()
        p16 = self._psnr_between(sc, cam, 16, 1024)
        p64 = self._psnr_between(sc, cam, 64, 1024)
        assert p64 - p16 > 7.0
        assert self._psnr_between(sc, cam, 256, 1024) > 40.0

    def test_rejects_zero_spp(self):
        sc = generate_scene("single-sphere")
        with pytest.raises(ValueError):
            oracle_render(sc, orbit_cameras(sc, 1, 8)[0], spp=0)


class TestMultiscale:
    def test_box_filter_2x2(self):
        img = np.array([[[1.0], [2.0]], [[3.0], [6.0]]])
        assert np.allclose(downscale_box(img, 2), [[[3.0]]])

    def test_alpha_aware_composites_consistently(self, rng):
        img = rng.random((8, 8, 4))
        img[..., 3] = rng.choice([0.0, 0.3, 1.0], (8, 8))
        bg = np.array([0.2, 0.9, 0.5])
        over = lambda x: x[..., :3] * x[..., 3:] + bg * (1 - x[..., 3:])  # noqa: E731
        assert np.allclose(over(downscale_box(img, 4)), downscale_box(over(img), 4), atol=1e-14)

    def test_tiers_and_intrinsics(self):
        cam = Camera(800, 800, 800.0, 800.0, 400.0, 400.0)
        frames = compile_multiscale([Frame(cam, np.zeros((800, 800, 4)), 1.0, "r_0")])
        assert [f.image.shape[0] for f in frames] == [800, 400, 200, 100]
        assert [f.scale for f in frames] == [1.0, 0.5, 0.25, 0.125]
        assert frames[1].camera.fx == 400.0 and frames[1].name == "r_0_d2"

    def test_indivisible_rejected(self):
        cam = Camera(12, 12, 10.0, 10.0, 6, 6)
        with pytest.raises(DatasetError):
            compile_multiscale([Frame(cam, np.zeros((12, 12, 4)))])

    def test_rays_collinear_across_scales(self, rng):
        cam = Camera(16, 16, 20.0, 22.0, 7.3, 8.9, look_at([1, 2, 3], [0, 0, 0]))
        half = cam.scaled(0.5)
        d_full = camera_cones(cam).dirs.reshape(16, 16, 3)
        d_half = camera_cones(half).dirs.reshape(8, 8, 3)
        # a half-res pixel centre is the shared corner of a 2x2 block of full-res pixels;
        # its ray is the one through the full-res point (2i + 1, 2j + 1)
        for j in range(8):
            for i in range(8):
                x, y = 2 * i + 1.0, 2 * j + 1.0
                d = cam.rotation @ np.array([(x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0])
                d /= np.linalg.norm(d)
                assert np.arccos(min(1.0, float(d @ d_half[j, i]))) < 1e-9 or np.linalg.norm(d - d_half[j, i]) < 1e-9
        assert d_full.shape == (16, 16, 3)

    def test_dataset_scales(self):
        cam = Camera(8, 8, 8.0, 8.0, 4, 4)
        ds = Dataset(compile_multiscale([Frame(cam, np.zeros((8, 8, 4)))]), Aabb.cube(1.0))
        assert ds.scales() == [1.0, 0.5, 0.25, 0.125]
        assert len(ds.at_scale(0.25)) == 1

    def test_frame_shape_checked(self):
        with pytest.raises(DatasetError):
            Frame(Camera(8, 8, 8.0, 8.0, 4, 4), np.zeros((4, 8, 4)))


class TestPng:
    def test_roundtrip_bound(self, tmp_path, rng):
        img = rng.random((5, 7, 4))
        img[..., 3] = rng.choice([0.0, 1.0], (5, 7))
        save_png(tmp_path / "a.png", img)
        back = load_png(tmp_path / "a.png")
        assert back.shape == img.shape
        assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12
        assert np.array_equal(back[..., 3], img[..., 3])

    def test_single_red_pixel(self, tmp_path):
        save_png(tmp_path / "a.png", np.array([[[1.0, 0, 0, 1]]]))
        assert np.array_equal(load_png(tmp_path / "a.png"), [[[1.0, 0, 0, 1]]])

    def test_grey_and_rgb(self, tmp_path):
        save_png(tmp_path / "g.png", np.full((2, 2), 0.5))
        assert load_png(tmp_path / "g.png").shape == (2, 2)
        save_png(tmp_path / "c.png", np.zeros((2, 2, 3)))
        assert load_png(tmp_path / "c.png").shape == (2, 2, 3)

    def test_bad_channels(self, tmp_path):
        with pytest.raises(ValueError):
            save_png(tmp_path / "x.png", np.zeros((2, 2, 2)))

    def test_malformed_file(self, tmp_path):
        (tmp_path / "x.png").write_bytes(b"not a png")
        with pytest.raises(OSError):
            load_png(tmp_path / "x.png")


class TestBlender:
    def test_focal_from_angle(self):
        cam = camera_from_gl(np.eye(4), 800, 800, 0.6911112)
        assert cam.fx == pytest.approx(1111.111, abs=1e-3) and cam.fy == cam.fx

    def test_axis_conversion(self):
        gl = np.eye(4)
        gl[:3, 3] = [1, 2, 3]
        cam = camera_from_gl(gl, 4, 4, 1.0)
        # an OpenGL camera looks down its -z axis and its image y points up
        assert np.allclose(cam.cam_to_world[:3, 2], [0, 0, -1])
        assert np.allclose(cam.cam_to_world[:3, 1], [0, -1, 0])
        assert np.allclose(cam.center, [1, 2, 3])
        assert np.allclose(camera_to_gl(cam), gl)

    def test_write_load_roundtrip(self, tmp_path, rng):
        cams = orbit_cameras(generate_scene("single-sphere"), 2, 16)
        frames = compile_multiscale([Frame(c, rng.random((16, 16, 4)), 1.0, f"r_{k}")
                                     for k, c in enumerate(cams)], (1, 2))
        angle = 2 * math.atan(0.5 * 16 / cams[0].fx)
        write_blender_split(tmp_path, "train", frames, angle, Aabb.cube(0.7), {"scene": "x"})
        ds = load_blender_dataset(tmp_path, "train")
        assert len(ds) == 4 and ds.meta["scene"] == "x"
        assert np.allclose(ds.aabb.b_max, 0.7)
        for a, b in zip(frames, ds.frames):
            assert a.name == b.name and a.scale == b.scale
            assert np.allclose(a.camera.cam_to_world, b.camera.cam_to_world, atol=1e-12)
            assert b.camera.fx == pytest.approx(a.camera.fx, rel=1e-12)
            assert np.max(np.abs(a.image - b.image)) <= 0.5 / 255 + 1e-12
        assert len(load_blender_split(tmp_path, "train", scales=False)) == 2

    def test_schema_errors(self, tmp_path):
        (tmp_path / "transforms_train.json").write_text(json.dumps({"camera_angle_x": 0.5}))
        with pytest.raises(DatasetError, match="frames"):
            load_blender_split(tmp_path, "train")
        (tmp_path / "transforms_train.json").write_text("{oops")
        with pytest.raises(DatasetError):
            load_blender_split(tmp_path, "train")
        with pytest.raises(DatasetError, match="missing"):
            load_blender_split(tmp_path, "val")

    def test_non_square_rejected(self, tmp_path):
        save_png(tmp_path / "a.png", np.zeros((4, 4, 4)))
        meta = {"camera_angle_x": 0.8, "camera_angle_y": 0.5,
                "frames": [{"file_path": "./a", "transform_matrix": np.eye(4).tolist()}]}
        (tmp_path / "transforms_train.json").write_text(json.dumps(meta))
        with pytest.raises(DatasetError, match="non-square"):
            load_blender_split(tmp_path, "train")
