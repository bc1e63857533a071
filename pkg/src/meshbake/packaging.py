"""Render package serialization: OBJ/MTL mesh, channel-packed quantized RGBA
PNG texture planes, and a JSON manifest carrying dequantization ranges, the
view-encoding constants, and the full shader weights. The package is
self-contained and byte-deterministic for identical models.
"""

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image

from .appearance import AppearanceModel, ShaderWeights, ViewEncodingSpec
from .autodiff import MlpSpec, ParamStore
from .errors import FormatError, ValidationError
from .meshes import TriangleMesh, read_obj, write_mtl, write_obj
from .raster import UvAtlas

FORMAT_VERSION = "1"
MESH_OBJ = "mesh.obj"
MESH_MTL = "mesh.mtl"
MANIFEST = "manifest.json"


@dataclass
class SizeReport:
    components: dict = dc_field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.components.values())

    def to_json(self):
        return {"components": dict(self.components), "total": self.total}

    def table(self) -> str:
        width = max(len(k) for k in self.components) if self.components else 5
        lines = [f"{name:<{width}}  {size / 1e6:8.3f} MB"
                 for name, size in sorted(self.components.items())]
        lines.append(f"{'total':<{width}}  {self.total / 1e6:8.3f} MB")
        return "\n".join(lines)


def quantize_texture(texture: np.ndarray):
    """Per-channel affine quantization to bytes, packed 4 channels per RGBA
    plane. Returns (planes, ranges): ceil(K/4) uint8 (R,R,4) arrays and one
    (min, max) pair per channel. Constant channels store zeros with
    min == max and dequantize exactly."""
    texture = np.asarray(texture, dtype=np.float64)
    if texture.ndim != 3:
        raise ValidationError("texture must be (R, R, K)")
    if not np.all(np.isfinite(texture)):
        raise ValidationError("texture contains non-finite values")
    res, _, k = texture.shape
    ranges = []
    quantized = np.zeros((res, res, k), dtype=np.uint8)
    for c in range(k):
        chan = texture[..., c]
        mn, mx = float(chan.min()), float(chan.max())
        ranges.append((mn, mx))
        if mx > mn:
            quantized[..., c] = np.round((chan - mn) / (mx - mn) * 255.0).astype(np.uint8)
    n_planes = math.ceil(k / 4)
    planes = []
    for p in range(n_planes):
        plane = np.zeros((res, res, 4), dtype=np.uint8)
        width = min(4, k - 4 * p)
        plane[..., :width] = quantized[..., 4 * p:4 * p + width]
        planes.append(plane)
    return planes, ranges


def dequantize_planes(planes, ranges) -> np.ndarray:
    k = len(ranges)
    res = planes[0].shape[0]
    texture = np.zeros((res, res, k))
    for c, (mn, mx) in enumerate(ranges):
        if mx > mn:
            plane = planes[c // 4]
            texture[..., c] = mn + plane[..., c % 4].astype(np.float64) / 255.0 * (mx - mn)
        else:
            texture[..., c] = mn
    return texture


def _shader_manifest(shader: ShaderWeights) -> dict:
    weights, biases = [], []
    for i in range(shader.spec.n_layers):
        weights.append(shader.store[f"{shader.prefix}.w{i}"].tolist())
        biases.append(shader.store[f"{shader.prefix}.b{i}"].tolist())
    return {"widths": list(shader.spec.widths),
            "activations": list(shader.spec.activations),
            "weights": weights, "biases": biases}


def export_package(mesh: TriangleMesh, atlas: UvAtlas, texture: np.ndarray,
                   encoding: ViewEncodingSpec, shader: ShaderWeights,
                   path, background=(1.0, 1.0, 1.0)) -> SizeReport:
    """Write a viewer-consumable package; returns per-component disk sizes."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create package directory {path}: {exc}") from exc
    planes, ranges = quantize_texture(texture)
    plane_names = [f"feat_{p}.png" for p in range(len(planes))]

    write_obj(path / MESH_OBJ, mesh, face_uvs=atlas.face_uvs, mtl_name=MESH_MTL)
    write_mtl(path / MESH_MTL, plane_names[0])
    for name, plane in zip(plane_names, planes):
        Image.fromarray(plane, "RGBA").save(path / name)

    manifest = {
        "format_version": FORMAT_VERSION,
        "channels": texture.shape[-1],
        "texture_resolution": int(texture.shape[0]),
        "atlas_resolution": atlas.resolution,
        "channel_ranges": [[mn, mx] for mn, mx in ranges],
        "view_encoding": encoding.to_json(),
        "shader": _shader_manifest(shader),
        "background": [float(c) for c in background],
        "mesh": MESH_OBJ,
        "texture_planes": plane_names,
    }
    with open(path / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)

    report = SizeReport()
    for name in [MESH_OBJ, MESH_MTL, MANIFEST, *plane_names]:
        report.components[name] = (path / name).stat().st_size
    return report


def export_model(model: AppearanceModel, path) -> SizeReport:
    return export_package(model.mesh, model.atlas, model.texture,
                          model.encoding, model.shader, path,
                          background=model.background)


def import_package(path) -> AppearanceModel:
    """Re-load an exported package; raises FormatError naming the broken
    component on version or consistency problems."""
    path = Path(path)
    manifest_path = path / MANIFEST
    if not manifest_path.exists():
        raise FormatError(f"package manifest missing: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest: malformed JSON ({exc})") from exc

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"manifest: unsupported format version {version!r} "
            f"(this build reads version {FORMAT_VERSION!r})")
    k = int(manifest["channels"])
    plane_names = manifest["texture_planes"]
    if len(plane_names) != math.ceil(k / 4):
        raise FormatError(
            f"texture planes: {k} channels need {math.ceil(k / 4)} planes, "
            f"manifest lists {len(plane_names)}")
    ranges = manifest["channel_ranges"]
    if len(ranges) != k:
        raise FormatError("channel_ranges: length does not match channels")

    planes = []
    for name in plane_names:
        plane_path = path / name
        if not plane_path.exists():
            raise FormatError(f"texture planes: missing file {name}")
        with Image.open(plane_path) as im:
            planes.append(np.asarray(im.convert("RGBA"), dtype=np.uint8))
    texture = dequantize_planes(planes, [(r[0], r[1]) for r in ranges])

    mesh_path = path / manifest["mesh"]
    if not mesh_path.exists():
        raise FormatError(f"mesh: missing file {manifest['mesh']}")
    mesh, face_uvs = read_obj(mesh_path)
    if face_uvs is None:
        raise FormatError("mesh: OBJ lacks per-face uv coordinates")
    atlas = UvAtlas(face_uvs, int(manifest["atlas_resolution"]))

    sh = manifest["shader"]
    spec = MlpSpec(tuple(sh["widths"]), tuple(sh["activations"]))
    store = ParamStore()
    for i in range(spec.n_layers):
        w = np.asarray(sh["weights"][i], dtype=np.float64)
        b = np.asarray(sh["biases"][i], dtype=np.float64)
        if w.shape != (spec.widths[i + 1], spec.widths[i]):
            raise FormatError(f"shader: layer {i} weight shape mismatch")
        store.add(f"shader.w{i}", w)
        store.add(f"shader.b{i}", b)
    shader = ShaderWeights(spec, store)
    encoding = ViewEncodingSpec.from_json(manifest["view_encoding"])
    if encoding.channels != k:
        raise FormatError("view_encoding: channel count mismatch")
    store.add("texture", texture)
    return AppearanceModel(mesh, atlas, store["texture"], encoding, shader,
                           background=tuple(manifest["background"]))
