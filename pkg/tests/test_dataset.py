import json
import math

import numpy as np
import pytest

from meshbake.dataset import (Camera, Frame, SceneSpec, camera_angle_for,
                              generate_synthetic_scene, load_dataset, look_at,
                              render_oracle_frame, save_dataset)
from meshbake.errors import FormatError, ValidationError


def small_scene(primitive="sphere", views=4, res=32, **kw):
    return generate_synthetic_scene(
        SceneSpec(primitive=primitive, n_views=views, resolution=res, **kw))


class TestCamera:
    def test_focal_from_nerf_synthetic_angle(self, tmp_path):
        # camera_angle_x from the NeRF synthetic convention at W = 800
        ds = small_scene(views=2, res=16)
        save_dataset(ds, tmp_path)
        manifest = json.loads((tmp_path / "transforms.json").read_text())
        manifest["camera_angle_x"] = 0.6911112
        (tmp_path / "transforms.json").write_text(json.dumps(manifest))
        loaded = load_dataset(tmp_path)
        w = loaded.frames[0].camera.width
        expected = 0.5 * w / math.tan(0.5 * 0.6911112)
        assert abs(loaded.frames[0].camera.focal - expected) < 1e-9
        # at W = 800 the same formula gives the well-known 1111.11 px
        assert abs(0.5 * 800 / math.tan(0.5 * 0.6911112) - 1111.11) < 0.01

    def test_orthonormality_accepted_for_random_rigid_transforms(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            q = rng.normal(size=(3, 3))
            r, _ = np.linalg.qr(q)
            c2w = np.eye(4)
            c2w[:3, :3] = r
            c2w[:3, 3] = rng.normal(size=3)
            Camera(focal=100, width=32, height=32, c2w=c2w)

    def test_non_orthonormal_rotation_rejected(self):
        c2w = np.eye(4)
        c2w[0, 0] = 1.01
        with pytest.raises(ValidationError):
            Camera(focal=100, width=32, height=32, c2w=c2w)

    def test_basic_invariants(self):
        with pytest.raises(ValidationError):
            Camera(focal=-1, width=32, height=32, c2w=np.eye(4))
        with pytest.raises(ValidationError):
            Camera(focal=10, width=0, height=32, c2w=np.eye(4))

    def test_project_inverts_ray_grid(self):
        cam = Camera(focal=50, width=40, height=30, c2w=look_at([1.2, -0.7, 2.0]))
        origins, dirs = cam.ray_grid()
        pts = origins + 2.5 * dirs
        screen, depth = cam.project(pts.reshape(-1, 3))
        px, py = np.meshgrid(np.arange(40) + 0.5, np.arange(30) + 0.5)
        expected = np.stack([px, py], axis=-1).reshape(-1, 2)
        assert np.abs(screen - expected).max() < 1e-9
        assert (depth > 0).all()


class TestSyntheticScenes:
    def test_sphere_dataset_shape_and_exact_depths(self):
        ds = small_scene(views=5, res=32)
        assert len(ds.frames) == 5
        for fr in ds.frames:
            assert fr.image.shape == (32, 32, 3)
            assert fr.mask is not None and fr.depth_prior is not None
            hit = fr.mask > 0.5
            assert hit.any()
            assert (fr.depth_prior[hit] > 0).all()

    def test_center_pixel_depth_is_distance_minus_radius(self):
        # odd resolution puts a pixel center exactly on the optical axis
        spec = SceneSpec(primitive="sphere", n_views=2, resolution=33)
        angle = camera_angle_for(spec)
        focal = 0.5 * 33 / math.tan(0.5 * angle)
        cam = Camera(focal=focal, width=33, height=33,
                     c2w=look_at([0.0, 0.0, spec.camera_distance]))
        _, _, depth = render_oracle_frame(spec, cam)
        assert abs(depth[16, 16] - (spec.camera_distance - spec.radius)) < 1e-6

    def test_bowl_interior_deeper_than_rim(self):
        spec = SceneSpec(primitive="bowl", n_views=2, resolution=65)
        angle = camera_angle_for(spec)
        focal = 0.5 * 65 / math.tan(0.5 * angle)
        cam = Camera(focal=focal, width=65, height=65,
                     c2w=look_at([0.0, 0.0, spec.camera_distance]))
        _, mask, depth = render_oracle_frame(spec, cam)
        center_depth = depth[32, 32]          # bowl interior
        # rim: walk outward from the center until close to the rim radius
        origins, dirs = cam.ray_grid()
        pts = origins + depth[..., None] * dirs
        rho = np.sqrt(pts[..., 0] ** 2 + pts[..., 1] ** 2)
        rim = (mask > 0.5) & (np.abs(pts[..., 2]) < 1e-9) & (rho > 0.76)
        assert rim.any()
        assert center_depth > depth[rim].max() - 1e-9

    def test_mask_consistent_with_depth(self):
        for prim in ("sphere", "box", "bowl"):
            ds = small_scene(primitive=prim, views=3, res=24)
            for fr in ds.frames:
                assert (fr.mask[fr.depth_prior > 0] == 1.0).all()

    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            SceneSpec(primitive="torus")
        with pytest.raises(ValidationError):
            SceneSpec(n_views=1)
        with pytest.raises(ValidationError):
            SceneSpec(resolution=4)
        with pytest.raises(ValidationError):
            SceneSpec(lobe=1.5)

    def test_glossy_brightens_frontal_pixels(self):
        mat = small_scene(views=4, res=32, lobe=0.0, albedo="solid")
        glossy = small_scene(views=4, res=32, lobe=0.6, albedo="solid")
        diff = glossy.frames[0].image - mat.frames[0].image
        assert diff.max() > 0.1
        assert diff.min() >= -1e-9


class TestRoundTrip:
    def test_save_load_reproduces_poses_and_images(self, tmp_path):
        ds = small_scene(views=4, res=24)
        save_dataset(ds, tmp_path)
        loaded = load_dataset(tmp_path)
        assert len(loaded.frames) == 4
        for a, b in zip(ds.frames, loaded.frames):
            assert np.abs(a.camera.c2w - b.camera.c2w).max() < 1e-6
            assert abs(a.camera.focal - b.camera.focal) < 1e-6 * a.camera.focal
            assert np.array_equal(a.image, b.image)
            assert np.array_equal(a.mask, b.mask)
        lo_a, hi_a = ds.scene_bounds
        lo_b, hi_b = loaded.scene_bounds
        assert np.allclose(lo_a, lo_b) and np.allclose(hi_a, hi_b)

    def test_depth_roundtrip_within_half_scale_step(self, tmp_path):
        ds = small_scene(views=3, res=24)
        save_dataset(ds, tmp_path)
        manifest = json.loads((tmp_path / "transforms.json").read_text())
        scale = manifest["depth_scale"]
        loaded = load_dataset(tmp_path)
        for a, b in zip(ds.frames, loaded.frames):
            assert np.abs(a.depth_prior - b.depth_prior).max() <= 0.5 * scale + 1e-12

    def test_missing_manifest_is_format_error(self, tmp_path):
        with pytest.raises(FormatError):
            load_dataset(tmp_path)

    def test_zero_frames_is_validation_error(self, tmp_path):
        (tmp_path / "transforms.json").write_text(
            json.dumps({"camera_angle_x": 0.7, "frames": []}))
        with pytest.raises(ValidationError):
            load_dataset(tmp_path)

    def test_bad_rotation_in_manifest_rejected(self, tmp_path):
        ds = small_scene(views=2, res=16)
        save_dataset(ds, tmp_path)
        manifest = json.loads((tmp_path / "transforms.json").read_text())
        manifest["frames"][0]["transform_matrix"][0][0] += 0.05
        (tmp_path / "transforms.json").write_text(json.dumps(manifest))
        with pytest.raises(ValidationError):
            load_dataset(tmp_path)

    def test_mask_size_mismatch_rejected(self, tmp_path):
        from PIL import Image

        ds = small_scene(views=2, res=16)
        save_dataset(ds, tmp_path)
        bad = Image.fromarray(np.zeros((8, 8), dtype=np.uint8))
        bad.save(tmp_path / "images" / "r_0_mask.png")
        with pytest.raises(ValidationError):
            load_dataset(tmp_path)


class TestFrameValidation:
    def test_image_shape_must_match_camera(self):
        cam = Camera(focal=10, width=8, height=8, c2w=look_at([0, 0, 2.0]))
        with pytest.raises(ValidationError):
            Frame(camera=cam, image=np.zeros((9, 8, 3)))

    def test_pixel_range_enforced(self):
        cam = Camera(focal=10, width=8, height=8, c2w=look_at([0, 0, 2.0]))
        with pytest.raises(ValidationError):
            Frame(camera=cam, image=np.full((8, 8, 3), 1.5))
