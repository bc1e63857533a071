import json

import numpy as np
import pytest

from meshbake.appearance import (AppearanceModel, ShaderWeights,
                                 ViewEncodingSpec, render_model)
from meshbake.dataset import Camera, fibonacci_sphere, look_at
from meshbake.errors import FormatError, ValidationError
from meshbake.meshes import icosphere, read_obj
from meshbake.packaging import (SizeReport, dequantize_planes,
                                export_model, import_package,
                                quantize_texture)
from meshbake.raster import unwrap_uv


def toy_model(channels=12, texture_res=96, seed=0):
    rng = np.random.default_rng(seed)
    mesh = icosphere(2)
    atlas = unwrap_uv(mesh, texture_res)
    shader = ShaderWeights.create(channels, rng)
    tex = rng.uniform(-0.5, 0.8, size=(texture_res, texture_res, channels))
    enc = ViewEncodingSpec(channels=channels, alpha=0.3)
    return AppearanceModel(mesh, atlas, tex, enc, shader,
                           background=(1.0, 1.0, 1.0))


class TestQuantize:
    def test_constant_channel_degenerate_range(self):
        tex = np.zeros((8, 8, 4))
        tex[..., 1] = 0.7321
        planes, ranges = quantize_texture(tex)
        assert len(planes) == 1
        assert (planes[0][..., 1] == 0).all()
        assert ranges[1] == (0.7321, 0.7321)
        back = dequantize_planes(planes, ranges)
        assert np.array_equal(back[..., 1], tex[..., 1])

    def test_roundtrip_error_within_half_step_exhaustive(self):
        rng = np.random.default_rng(1)
        tex = rng.uniform(-1.0, 1.0, (16, 16, 1))
        tex[0, 0, 0] = -1.0
        tex[0, 1, 0] = 1.0
        planes, ranges = quantize_texture(tex)
        back = dequantize_planes(planes, ranges)
        step = (ranges[0][1] - ranges[0][0]) / 255.0
        for i in range(16):
            for j in range(16):
                assert abs(back[i, j, 0] - tex[i, j, 0]) <= step / 2 + 1e-12

    @pytest.mark.parametrize("channels,planes", [(8, 2), (12, 3), (16, 4)])
    def test_plane_counts(self, channels, planes):
        tex = np.random.default_rng(2).uniform(0, 1, (8, 8, channels))
        got, ranges = quantize_texture(tex)
        assert len(got) == planes
        assert len(ranges) == channels

    def test_non_finite_rejected(self):
        tex = np.zeros((4, 4, 4))
        tex[2, 2, 2] = np.inf
        with pytest.raises(ValidationError):
            quantize_texture(tex)


class TestExport:
    def test_package_layout_and_size_report(self, tmp_path):
        model = toy_model(channels=12)
        report = export_model(model, tmp_path / "pkg")
        pkg = tmp_path / "pkg"
        for name in ("mesh.obj", "mesh.mtl", "manifest.json",
                     "feat_0.png", "feat_1.png", "feat_2.png"):
            assert (pkg / name).exists()
            assert report.components[name] == (pkg / name).stat().st_size
        assert not (pkg / "feat_3.png").exists()
        assert report.total == sum(report.components.values())
        assert report.total < 50_000_000

    @pytest.mark.parametrize("channels,planes", [(8, 2), (12, 3), (16, 4)])
    def test_channel_packing_counts_on_disk(self, tmp_path, channels, planes):
        model = toy_model(channels=channels)
        export_model(model, tmp_path / "pkg")
        pngs = sorted(p.name for p in (tmp_path / "pkg").glob("feat_*.png"))
        assert pngs == [f"feat_{i}.png" for i in range(planes)]

    def test_reexport_byte_identical(self, tmp_path):
        model = toy_model()
        export_model(model, tmp_path / "a")
        export_model(model, tmp_path / "b")
        for fa in sorted((tmp_path / "a").iterdir()):
            fb = tmp_path / "b" / fa.name
            assert fa.read_bytes() == fb.read_bytes(), fa.name

    def test_obj_counts_match_mesh(self, tmp_path):
        model = toy_model()
        export_model(model, tmp_path / "pkg")
        mesh, face_uvs = read_obj(tmp_path / "pkg" / "mesh.obj")
        assert mesh.n_vertices == model.mesh.n_vertices
        assert mesh.n_faces == model.mesh.n_faces
        assert face_uvs.shape == model.atlas.face_uvs.shape
        assert np.array_equal(mesh.vertices, model.mesh.vertices)
        assert np.array_equal(face_uvs, model.atlas.face_uvs)


class TestImport:
    def test_roundtrip_render_parity(self, tmp_path):
        model = toy_model(channels=8)
        export_model(model, tmp_path / "pkg")
        back = import_package(tmp_path / "pkg")
        rng_dirs = fibonacci_sphere(5) * 2.6
        for k, pos in enumerate(rng_dirs):
            cam = Camera(focal=60, width=48, height=48, c2w=look_at(pos))
            a = render_model(model, cam)
            b = render_model(back, cam)
            assert np.abs(a - b).max() <= 3.0 / 255.0 + 1e-12, f"camera {k}"

    def test_manifest_plane_count_mismatch(self, tmp_path):
        model = toy_model(channels=12)
        export_model(model, tmp_path / "pkg")
        mpath = tmp_path / "pkg" / "manifest.json"
        manifest = json.loads(mpath.read_text())
        manifest["texture_planes"] = manifest["texture_planes"][:2]
        mpath.write_text(json.dumps(manifest))
        with pytest.raises(FormatError):
            import_package(tmp_path / "pkg")

    def test_unknown_version_is_explicit_error(self, tmp_path):
        model = toy_model()
        export_model(model, tmp_path / "pkg")
        mpath = tmp_path / "pkg" / "manifest.json"
        manifest = json.loads(mpath.read_text())
        manifest["format_version"] = "999"
        mpath.write_text(json.dumps(manifest))
        with pytest.raises(FormatError, match="version"):
            import_package(tmp_path / "pkg")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FormatError):
            import_package(tmp_path)

    def test_truncated_plane_file(self, tmp_path):
        model = toy_model()
        export_model(model, tmp_path / "pkg")
        (tmp_path / "pkg" / "feat_1.png").unlink()
        with pytest.raises(FormatError, match="feat_1"):
            import_package(tmp_path / "pkg")

    def test_package_is_self_contained(self, tmp_path):
        import shutil

        model = toy_model(channels=8)
        export_model(model, tmp_path / "pkg")
        moved = tmp_path / "elsewhere" / "pkg2"
        moved.parent.mkdir()
        shutil.move(str(tmp_path / "pkg"), str(moved))
        back = import_package(moved)
        cam = Camera(focal=60, width=32, height=32, c2w=look_at([0, 0, 2.5]))
        img = render_model(back, cam)
        assert np.isfinite(img).all()

    def test_dequantized_texture_within_half_step(self, tmp_path):
        model = toy_model(channels=8)
        export_model(model, tmp_path / "pkg")
        back = import_package(tmp_path / "pkg")
        for c in range(8):
            mn = model.texture[..., c].min()
            mx = model.texture[..., c].max()
            step = (mx - mn) / 255.0
            err = np.abs(back.texture[..., c] - model.texture[..., c]).max()
            assert err <= step / 2 + 1e-12


class TestSizeReport:
    def test_total_is_exact_sum(self):
        report = SizeReport({"a": 10, "b": 32})
        assert report.total == 42
        assert report.to_json()["total"] == 42
        assert "total" in report.table()
