import numpy as np
import pytest

from meshbake.dataset import Camera, look_at
from meshbake.errors import CapacityError, ValidationError
from meshbake.meshes import TriangleMesh, icosphere
from meshbake.raster import raster_backward, rasterize, unwrap_uv


def quad(half=1.0, z=0.0):
    return TriangleMesh(
        vertices=[[-half, -half, z], [half, -half, z],
                  [half, half, z], [-half, half, z]],
        faces=[[0, 1, 2], [0, 2, 3]],
        normals=[[0, 0, 1]] * 4,
    )


def single_triangle():
    return TriangleMesh(
        vertices=[[-0.7, -0.5, 0.2], [0.8, -0.3, -0.3], [0.1, 0.8, 0.1]],
        faces=[[0, 1, 2]],
        normals=[[0, 0, 1]] * 3,
    )


class TestUnwrap:
    def test_single_triangle_chart_in_unit_square(self):
        atlas = unwrap_uv(single_triangle(), 64)
        assert atlas.face_uvs.shape == (1, 3, 2)
        assert atlas.face_uvs.min() >= 0 and atlas.face_uvs.max() <= 1

    def test_two_faces_zero_texel_overlap(self):
        res = 32
        atlas = unwrap_uv(quad(), res)

        def cross2(u, v):
            return u[0] * v[1] - u[1] * v[0]

        def covered_texels(tri_uv):
            pts = tri_uv * res - 0.5
            hits = set()
            for ty in range(res):
                for tx in range(res):
                    p = np.array([tx, ty], dtype=float)
                    v0, v1, v2 = pts
                    d = cross2(v1 - v0, v2 - v0)
                    a = cross2(v1 - v0, p - v0) / d
                    b = cross2(v2 - v1, p - v1) / d
                    c = cross2(v0 - v2, p - v2) / d
                    if min(a, b, c) >= -1e-12:
                        hits.add((tx, ty))
            return hits

        c0 = covered_texels(atlas.face_uvs[0])
        c1 = covered_texels(atlas.face_uvs[1])
        assert c0 and c1
        assert not (c0 & c1)

    def test_charts_keep_two_texel_separation(self):
        res = 64
        mesh = icosphere(1)   # 80 faces
        atlas = unwrap_uv(mesh, res)
        # minimum pairwise distance between texel-space vertex sets of
        # different cells sharing a diagonal
        tex = atlas.face_uvs * res - 0.5
        a, b = tex[0], tex[1]

        def seg_dist(p, a0, a1):
            d = a1 - a0
            t = np.clip(np.dot(p - a0, d) / np.dot(d, d), 0, 1)
            return np.linalg.norm(p - (a0 + t * d))

        dmin = min(seg_dist(p, b[i], b[(i + 1) % 3])
                   for p in a for i in range(3))
        assert dmin >= 2.0

    def test_icosphere_utilization(self):
        mesh = icosphere(2)   # 320 faces
        atlas = unwrap_uv(mesh, 256)
        assert mesh.n_faces >= 100
        assert atlas.utilization() >= 0.30

    def test_capacity_error(self):
        mesh = icosphere(3)   # 1280 faces
        with pytest.raises(CapacityError):
            unwrap_uv(mesh, 16)


class TestRasterize:
    def test_frontal_quad_vcos_one(self):
        # distant small quad: every fragment direction is axis-aligned to
        # within the stated tolerance
        mesh = quad(half=0.01)
        cam = Camera(focal=3000, width=64, height=64, c2w=look_at([0, 0, 4.0]))
        gb = rasterize(mesh, unwrap_uv(mesh, 64), cam)
        assert gb.covered.sum() > 100
        assert np.abs(gb.vcos[gb.covered] - 1.0).max() < 1e-5

    def test_grazing_geometry_vcos_near_zero(self):
        mesh = quad(half=1.0)
        # camera nearly in the quad plane
        cam = Camera(focal=200, width=64, height=64,
                     c2w=look_at([0.0, -4.0, 0.12]))
        gb = rasterize(mesh, None, cam)
        assert gb.covered.any()
        assert gb.vcos[gb.covered].min() < 0.05
        assert (gb.vcos[gb.covered] > 0).all()

    def test_barycentric_partition_of_unity(self):
        mesh = icosphere(3)
        cam = Camera(focal=80, width=64, height=64, c2w=look_at([0, 0, 2.5]))
        gb = rasterize(mesh, None, cam)
        b = gb.bary[gb.covered]
        assert np.abs(b.sum(axis=1) - 1.0).max() < 1e-6
        assert b.min() >= -1e-9

    def test_sphere_depth_matches_analytic(self):
        mesh = icosphere(5)
        cam = Camera(focal=90, width=96, height=96, c2w=look_at([0, 0, 2.5]))
        gb = rasterize(mesh, None, cam)
        origins, dirs = cam.ray_grid()
        o = origins.reshape(-1, 3)
        d = dirs.reshape(-1, 3)
        b = np.sum(o * d, -1)
        c = np.sum(o * o, -1) - 1.0
        disc = b * b - c
        t = np.where(disc >= 0, -b - np.sqrt(np.maximum(disc, 0)), 0)
        t = t.reshape(96, 96)
        both = gb.covered & (t > 0)
        footprint = 2.5 / 90  # depth / focal: world size of one pixel
        assert np.abs(gb.depth[both] - t[both]).max() < 0.5 * footprint

    def test_vcos_always_in_unit_range(self):
        mesh = icosphere(3)
        cam = Camera(focal=70, width=48, height=48, c2w=look_at([1.5, -1.2, 1.8]))
        gb = rasterize(mesh, None, cam)
        assert (gb.vcos >= -1).all() and (gb.vcos <= 1).all()
        assert (gb.vcos[gb.covered] > 0).all()

    def test_perspective_vs_affine_differ_on_slant(self):
        # 45-degree slanted quad close to the camera
        mesh = TriangleMesh(
            vertices=[[-1, -1, 1.0], [1, -1, -1.0], [1, 1, -1.0], [-1, 1, 1.0]],
            faces=[[0, 1, 2], [0, 2, 3]],
            normals=np.tile([0.70710678, 0.0, 0.70710678], (4, 1)),
        )
        atlas = unwrap_uv(mesh, 64)
        cam = Camera(focal=60, width=64, height=64, c2w=look_at([0, 0, 2.2]))
        gb = rasterize(mesh, atlas, cam)
        ys, xs = np.nonzero(gb.covered)
        b = gb.bary[ys, xs]
        fids = gb.face_id[ys, xs]
        _, w = cam.project(mesh.vertices)
        wk = w[mesh.faces[fids]]
        lam = b * wk
        lam /= lam.sum(axis=1, keepdims=True)
        uv_affine = np.einsum("nk,nkc->nc", lam, atlas.face_uvs[fids])
        assert np.abs(uv_affine - gb.uv[ys, xs]).max() > 1e-3

    def test_deterministic(self):
        mesh = icosphere(3)
        cam = Camera(focal=70, width=48, height=48, c2w=look_at([1.0, 1.0, 1.5]))
        a = rasterize(mesh, None, cam)
        b = rasterize(mesh, None, cam)
        assert np.array_equal(a.face_id, b.face_id)
        assert np.array_equal(a.depth, b.depth)
        assert np.array_equal(a.bary, b.bary)

    def test_offscreen_mesh_empty_gbuffer(self):
        mesh = icosphere(2)
        cam = Camera(focal=80, width=32, height=32,
                     c2w=look_at([0, 0, 20.0], target=(15.0, 0, 20.0)))
        gb = rasterize(mesh, None, cam)
        assert not gb.covered.any()

    def test_atlas_face_count_mismatch(self):
        mesh = icosphere(1)
        atlas = unwrap_uv(icosphere(2), 256)
        cam = Camera(focal=80, width=32, height=32, c2w=look_at([0, 0, 2.5]))
        with pytest.raises(ValidationError):
            rasterize(mesh, atlas, cam)


class TestRasterBackward:
    def _setup(self):
        mesh = single_triangle()
        atlas = unwrap_uv(mesh, 32)
        cam = Camera(focal=60, width=48, height=48,
                     c2w=look_at([0.2, 0.1, 2.2]))
        gb = rasterize(mesh, atlas, cam)
        return mesh, atlas, cam, gb

    def test_zero_upstream_gives_zero(self):
        mesh, atlas, cam, gb = self._setup()
        gv = raster_backward(gb, mesh, cam, np.zeros(gb.uv.shape), atlas)
        assert np.array_equal(gv, np.zeros_like(mesh.vertices))

    def test_interior_pixels_match_finite_differences(self):
        mesh, atlas, cam, gb = self._setup()
        rng = np.random.default_rng(0)
        ys, xs = np.nonzero(gb.covered)
        interior = gb.bary[ys, xs].min(axis=1) > 0.1
        ys, xs = ys[interior][:25], xs[interior][:25]
        dl_duv = np.zeros(gb.uv.shape)
        dl_duv[ys, xs] = rng.normal(size=(len(ys), 2))
        gv = raster_backward(gb, mesh, cam, dl_duv, atlas)

        def loss(vertices):
            g = rasterize(TriangleMesh(vertices, mesh.faces, mesh.normals),
                          atlas, cam)
            return float(np.sum(g.uv[ys, xs] * dl_duv[ys, xs]))

        eps = 1e-6
        for vi in range(3):
            for k in range(3):
                v = mesh.vertices.copy()
                v[vi, k] += eps
                lp = loss(v)
                v[vi, k] -= 2 * eps
                lm = loss(v)
                fd = (lp - lm) / (2 * eps)
                rel = abs(fd - gv[vi, k]) / max(abs(fd), abs(gv[vi, k]), 1e-9)
                assert rel < 1e-3

    def test_rigid_translation_invariance(self):
        mesh, atlas, cam, gb = self._setup()
        rng = np.random.default_rng(1)
        ys, xs = np.nonzero(gb.covered)
        dl_duv = np.zeros(gb.uv.shape)
        dl_duv[ys, xs] = rng.normal(size=(len(ys), 2))
        gv = raster_backward(gb, mesh, cam, dl_duv, atlas)

        shift = np.array([0.4, -0.3, 0.6])
        mesh2 = TriangleMesh(mesh.vertices + shift, mesh.faces, mesh.normals)
        c2w2 = cam.c2w.copy()
        c2w2[:3, 3] += shift
        cam2 = Camera(cam.focal, cam.width, cam.height, c2w2)
        gb2 = rasterize(mesh2, atlas, cam2)
        assert np.array_equal(gb.face_id, gb2.face_id)
        assert np.abs(gb.uv - gb2.uv).max() < 1e-12
        gv2 = raster_backward(gb2, mesh2, cam2, dl_duv, atlas)
        assert np.abs(gv - gv2).max() < 1e-9

    def test_shape_and_finiteness_validation(self):
        mesh, atlas, cam, gb = self._setup()
        with pytest.raises(ValidationError):
            raster_backward(gb, mesh, cam, np.zeros((3, 3, 2)), atlas)
        bad = np.zeros(gb.uv.shape)
        bad[0, 0, 0] = np.inf
        with pytest.raises(ValidationError):
            raster_backward(gb, mesh, cam, bad, atlas)
