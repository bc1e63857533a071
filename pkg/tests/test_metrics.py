import math

import numpy as np
import pytest

from meshbake.errors import ValidationError
from meshbake.meshes import icosphere
from meshbake.metrics import (chamfer, chamfer_points,
                              chamfer_points_bruteforce, colormap_lookup,
                              error_map, psnr, sample_surface_points, ssim)

# Frozen once from skimage.metrics.structural_similarity on the fixed pair
# below (gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
# data_range=1.0).
SSIM_REFERENCE_64 = 0.9634157735417075


def fixed_pair_64():
    rng = np.random.default_rng(1234)
    base = rng.uniform(0, 1, (64, 64))
    noisy = np.clip(base + 0.08 * rng.normal(size=(64, 64)), 0, 1)
    return base, noisy


class TestPsnr:
    def test_identical_images_positive_infinity(self):
        img = np.random.default_rng(0).uniform(0, 1, (16, 16, 3))
        assert psnr(img, img) == math.inf

    def test_uniform_error_closed_form(self):
        a = np.full((10, 10, 3), 0.2)
        b = np.full((10, 10, 3), 0.3)  # MSE exactly 0.01
        assert abs(psnr(a, b) - 20.0) < 1e-9

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(0, 1, (24, 31, 3))
        b = rng.uniform(0, 1, (24, 31, 3))
        # independent two-pass mean-of-squares
        total = 0.0
        count = 0
        for i in range(24):
            for j in range(31):
                for c in range(3):
                    total += (a[i, j, c] - b[i, j, c]) ** 2
                    count += 1
        oracle = 10.0 * math.log10(1.0 / (total / count))
        assert abs(psnr(a, b) - oracle) < 1e-10

    def test_symmetry_and_dimension_check(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0, 1, (8, 8, 3))
        b = rng.uniform(0, 1, (8, 8, 3))
        assert psnr(a, b) == psnr(b, a)
        with pytest.raises(ValidationError):
            psnr(a, b[:4])


class TestSsim:
    def test_self_similarity_is_one(self):
        img = np.random.default_rng(3).uniform(0, 1, (32, 32, 3))
        assert abs(ssim(img, img) - 1.0) < 1e-12

    def test_negative_image_less_than_one(self):
        img = np.random.default_rng(4).uniform(0, 1, (32, 32))
        assert ssim(img, 1.0 - img) < 1.0

    def test_matches_frozen_reference_value(self):
        a, b = fixed_pair_64()
        assert abs(ssim(a, b) - SSIM_REFERENCE_64) < 1e-4

    def test_symmetry(self):
        a, b = fixed_pair_64()
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12

    def test_window_floor(self):
        small = np.zeros((8, 8))
        with pytest.raises(ValidationError):
            ssim(small, small)


class TestChamfer:
    def test_identical_meshes_zero(self):
        mesh = icosphere(3)
        assert chamfer(mesh, mesh, n_points=5000) < 1e-9

    def test_translated_sphere_bounded_by_offset(self):
        delta = 0.01
        a = icosphere(4)
        b = icosphere(4)
        b = type(b)(b.vertices + np.array([0, 0, delta]), b.faces, b.normals)
        cd = chamfer(a, b, n_points=20000)
        assert 0 < cd <= delta + 1e-6
        assert cd > 0.3 * delta  # same order as the offset

    def test_indexed_matches_bruteforce(self):
        rng = np.random.default_rng(5)
        pa = rng.normal(size=(1500, 3))
        pb = rng.normal(size=(1800, 3))
        assert abs(chamfer_points(pa, pb)
                   - chamfer_points_bruteforce(pa, pb)) < 1e-9

    def test_symmetric_by_construction(self):
        rng = np.random.default_rng(6)
        pa = rng.normal(size=(400, 3))
        pb = rng.normal(size=(500, 3))
        assert abs(chamfer_points(pa, pb) - chamfer_points(pb, pa)) < 1e-12

    def test_surface_samples_lie_on_mesh(self):
        mesh = icosphere(4)
        pts = sample_surface_points(mesh, 5000)
        r = np.linalg.norm(pts, axis=1)
        # n_points is a ray budget; actual count tracks true coverage
        assert 2500 <= len(pts) <= 10000
        assert np.abs(r - 1.0).max() < 5e-3  # icosphere facet depth

    def test_empty_mesh_rejected(self):
        mesh = icosphere(1)
        empty = type(mesh)(np.zeros((0, 3)), np.zeros((0, 3), dtype=int),
                           np.zeros((0, 3)))
        with pytest.raises(ValidationError):
            chamfer(mesh, empty)


class TestErrorMap:
    def test_identical_images_uniform_zero_color(self):
        img = np.random.default_rng(7).uniform(0, 1, (16, 16, 3))
        m = error_map(img, img)
        zero_color = colormap_lookup(0.0)
        assert np.abs(m - zero_color).max() < 1e-12

    def test_checker_vs_inverse_is_max_color(self):
        checker = np.indices((8, 8)).sum(axis=0) % 2
        a = np.repeat(checker[..., None], 3, axis=-1).astype(float)
        b = 1.0 - a
        m = error_map(a, b)
        max_color = colormap_lookup(1.0)
        assert np.abs(m - max_color).max() < 1e-12

    def test_viridis_control_points(self):
        # published viridis table entries at the 0, 0.5, 1 stops
        assert np.abs(colormap_lookup(0.0)
                      - [0.267004, 0.004874, 0.329415]).max() < 1e-6
        assert np.abs(colormap_lookup(0.5)
                      - [0.127568, 0.566949, 0.550556]).max() < 1e-6
        assert np.abs(colormap_lookup(1.0)
                      - [0.993248, 0.906157, 0.143936]).max() < 1e-6

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            error_map(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))
