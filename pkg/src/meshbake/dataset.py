"""Multi-view dataset ingestion and synthetic oracle scenes.

On-disk layout follows the NeRF ``transforms.json`` convention: a manifest
with ``camera_angle_x`` and per-frame ``transform_matrix`` / ``file_path``,
8-bit RGB images, plus optional ``<name>_mask.png`` (8-bit gray) and
``<name>_depth.png`` (16-bit gray, world units per intensity unit declared by
a ``depth_scale`` manifest field). Synthetic scenes are ray-traced
analytically so every downstream stage can be tested against exact depths,
masks, and geometry.
"""

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError, ValidationError

ROTATION_TOL = 1e-6
DEFAULT_BACKGROUND = (1.0, 1.0, 1.0)

# Fixed shading rig for oracle scenes.
_LIGHT_DIR = (0.35, 0.25, 0.9)
_AMBIENT = 0.3
_DIFFUSE = 0.7
_LOBE_EXP = 8.0
_CHECKER_A = (0.8, 0.35, 0.25)
_CHECKER_B = (0.25, 0.5, 0.8)
_SOLID_ALBEDO = (0.7, 0.45, 0.3)


@dataclass
class Camera:
    """Pinhole camera: single focal length in pixels, principal point at the
    image center, camera-to-world rigid transform with x right / y up / z
    backward axes (the camera looks down -z)."""

    focal: float
    width: int
    height: int
    c2w: np.ndarray

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (4, 4):
            raise ValidationError("camera-to-world transform must be 4x4")
        if self.focal <= 0:
            raise ValidationError("focal length must be positive")
        if self.width < 1 or self.height < 1:
            raise ValidationError("image dimensions must be >= 1")
        r = self.c2w[:3, :3]
        if np.abs(r.T @ r - np.eye(3)).max() >= ROTATION_TOL:
            raise ValidationError("camera rotation is not orthonormal")

    @property
    def cx(self):
        return self.width / 2.0

    @property
    def cy(self):
        return self.height / 2.0

    @property
    def origin(self) -> np.ndarray:
        return self.c2w[:3, 3]

    @property
    def w2c(self) -> np.ndarray:
        r = self.c2w[:3, :3]
        t = self.c2w[:3, 3]
        out = np.eye(4)
        out[:3, :3] = r.T
        out[:3, 3] = -r.T @ t
        return out

    def pixel_dirs(self, px: np.ndarray, py: np.ndarray) -> np.ndarray:
        """Unit world-space ray directions through pixel centers (px+0.5, py+0.5)."""
        x = (px + 0.5 - self.cx) / self.focal
        y = -(py + 0.5 - self.cy) / self.focal
        d_cam = np.stack([x, y, -np.ones_like(x)], axis=-1)
        d = d_cam @ self.c2w[:3, :3].T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def ray_grid(self):
        """Origins and unit directions for every pixel, shape (H, W, 3)."""
        px, py = np.meshgrid(np.arange(self.width), np.arange(self.height))
        dirs = self.pixel_dirs(px.astype(np.float64), py.astype(np.float64))
        origins = np.broadcast_to(self.origin, dirs.shape)
        return origins, dirs

    def project(self, points: np.ndarray):
        """World points -> (screen xy in pixels, positive view depth).

        Screen coordinates are continuous; a point at pixel center (i, j)
        projects to (i + 0.5, j + 0.5). Depth w is distance along -z in
        camera space (positive in front of the camera).
        """
        p = np.asarray(points, dtype=np.float64)
        cam = p @ self.w2c[:3, :3].T + self.w2c[:3, 3]
        w = -cam[..., 2]
        safe_w = np.where(w > 1e-12, w, 1e-12)
        sx = self.cx + self.focal * cam[..., 0] / safe_w
        sy = self.cy - self.focal * cam[..., 1] / safe_w
        return np.stack([sx, sy], axis=-1), w


@dataclass
class Frame:
    camera: Camera
    image: np.ndarray
    mask: np.ndarray | None = None
    depth_prior: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        h, w = self.camera.height, self.camera.width
        if self.image.shape != (h, w, 3):
            raise ValidationError(f"image shape {self.image.shape} does not match camera {h}x{w}")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValidationError("image values must lie in [0,1]")
        for arr, label in ((self.mask, "mask"), (self.depth_prior, "depth")):
            if arr is not None and arr.shape != (h, w):
                raise ValidationError(f"{label} shape {arr.shape} does not match camera {h}x{w}")


@dataclass
class Dataset:
    frames: list
    scene_bounds: tuple  # (lo, hi) 3-vectors
    background: tuple = DEFAULT_BACKGROUND
    name: str = "dataset"

    def __post_init__(self):
        lo, hi = (np.asarray(v, dtype=np.float64) for v in self.scene_bounds)
        if not np.all(hi > lo):
            raise ValidationError("scene bounds must have positive volume")
        self.scene_bounds = (lo, hi)

    def require_trainable(self):
        if len(self.frames) < 2:
            raise ValidationError("training requires at least 2 frames")


@dataclass
class SceneSpec:
    primitive: str = "sphere"       # sphere | box | bowl
    albedo: str = "checker"         # checker | solid
    lobe: float = 0.0               # specular lobe strength in [0,1]
    n_views: int = 50
    resolution: int = 128
    radius: float = 1.0
    camera_distance: float = 2.5
    background: tuple = DEFAULT_BACKGROUND

    def __post_init__(self):
        if self.primitive not in ("sphere", "box", "bowl"):
            raise ValidationError(f"unknown primitive {self.primitive!r}")
        if self.albedo not in ("checker", "solid"):
            raise ValidationError(f"unknown albedo pattern {self.albedo!r}")
        if not 0.0 <= self.lobe <= 1.0:
            raise ValidationError("lobe strength must lie in [0,1]")
        if self.n_views < 2:
            raise ValidationError("need at least 2 views")
        if self.resolution < 8:
            raise ValidationError("resolution must be >= 8")


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world transform with the camera at `position` looking at `target`."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    backward = position - target
    backward /= np.linalg.norm(backward)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(up, backward)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(up, backward)
    right /= np.linalg.norm(right)
    true_up = np.cross(backward, right)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = true_up
    c2w[:3, 2] = backward
    c2w[:3, 3] = position
    return c2w


def fibonacci_sphere(n: int) -> np.ndarray:
    """n roughly-uniform unit directions, deterministic."""
    i = np.arange(n, dtype=np.float64)
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    z = 1.0 - (2.0 * i + 1.0) / n
    rho = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)


# ---------------------------------------------------------------------------
# Analytic primitives: first-hit distance and outward normal per ray
# ---------------------------------------------------------------------------

def _hit_sphere(origins, dirs, radius):
    b = np.sum(origins * dirs, axis=-1)
    c = np.sum(origins * origins, axis=-1) - radius * radius
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = -b - sq
    hit = ok & (t > 1e-9)
    t = np.where(hit, t, np.inf)
    safe_t = np.where(hit, t, 0.0)
    normals = (origins + safe_t[..., None] * dirs) / radius
    return t, np.where(hit[..., None], normals, 0.0)


def _hit_box(origins, dirs, half_extents):
    he = np.asarray(half_extents)
    inv = 1.0 / np.where(np.abs(dirs) > 1e-15, dirs, 1e-15)
    t1 = (-he - origins) * inv
    t2 = (he - origins) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_near = tmin.max(axis=-1)
    t_far = tmax.min(axis=-1)
    ok = (t_far >= t_near) & (t_far > 0) & (t_near > 1e-9)
    t = np.where(ok, t_near, np.inf)
    axis = tmin.argmax(axis=-1)
    sign = -np.sign(np.take_along_axis(dirs, axis[..., None], axis=-1))[..., 0]
    normals = np.zeros_like(dirs)
    np.put_along_axis(normals, axis[..., None], sign[..., None], axis=-1)
    return t, normals


def _sphere_roots(origins, dirs, radius):
    b = np.sum(origins * dirs, axis=-1)
    c = np.sum(origins * origins, axis=-1) - radius * radius
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    roots = np.stack([-b - sq, -b + sq], axis=-1)
    return np.where(ok[..., None], roots, np.inf)


def _hit_bowl(origins, dirs, r_outer, r_inner):
    """Hemispherical shell: {r_inner <= |p| <= r_outer, z <= 0}, opening up."""
    cands = []
    norms = []
    for radius, normal_sign in ((r_outer, 1.0), (r_inner, -1.0)):
        roots = _sphere_roots(origins, dirs, radius)
        for k in range(2):
            t = roots[..., k]
            valid = np.isfinite(t) & (t > 1e-9)
            safe_t = np.where(valid, t, 0.0)
            p = origins + safe_t[..., None] * dirs
            valid &= p[..., 2] <= 1e-12
            cands.append(np.where(valid, t, np.inf))
            norms.append(np.where(valid[..., None],
                                  normal_sign * p / radius, 0.0))
    # Rim annulus in the z=0 plane.
    dz = np.where(np.abs(dirs[..., 2]) > 1e-15, dirs[..., 2], 1e-15)
    t_plane = -origins[..., 2] / dz
    p = origins + t_plane[..., None] * dirs
    rho = np.sqrt(p[..., 0] ** 2 + p[..., 1] ** 2)
    valid = (t_plane > 1e-9) & (rho >= r_inner) & (rho <= r_outer)
    cands.append(np.where(valid, t_plane, np.inf))
    rim_n = np.zeros_like(dirs)
    rim_n[..., 2] = 1.0
    norms.append(rim_n)

    t_all = np.stack(cands, axis=-1)
    best = t_all.argmin(axis=-1)
    t = np.take_along_axis(t_all, best[..., None], axis=-1)[..., 0]
    n_all = np.stack(norms, axis=-2)
    normals = np.take_along_axis(n_all, best[..., None, None], axis=-2)[..., 0, :]
    return t, normals


BOWL_THICKNESS = 0.25  # fraction of the outer radius


def trace_primitive(spec: SceneSpec, origins: np.ndarray, dirs: np.ndarray):
    """First hit of the spec primitive: (t, outward normal); t=inf on miss."""
    if spec.primitive == "sphere":
        return _hit_sphere(origins, dirs, spec.radius)
    if spec.primitive == "box":
        he = np.array([0.8, 0.6, 0.5]) * spec.radius
        return _hit_box(origins, dirs, he)
    r_outer = spec.radius
    return _hit_bowl(origins, dirs, r_outer, r_outer * (1.0 - BOWL_THICKNESS))


def primitive_sdf(spec: SceneSpec, points: np.ndarray) -> np.ndarray:
    """Exact signed distance to the spec primitive (negative inside)."""
    p = np.asarray(points, dtype=np.float64)
    if spec.primitive == "sphere":
        return np.linalg.norm(p, axis=-1) - spec.radius
    if spec.primitive == "box":
        he = np.array([0.8, 0.6, 0.5]) * spec.radius
        q = np.abs(p) - he
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside
    # Bowl: intersection of (shell between radii) and (half-space z <= 0),
    # via the exact 2D profile in (rho, z).
    r_outer = spec.radius
    r_inner = r_outer * (1.0 - BOWL_THICKNESS)
    r_mid = 0.5 * (r_outer + r_inner)
    half_th = 0.5 * (r_outer - r_inner)
    rho = np.sqrt(p[..., 0] ** 2 + p[..., 1] ** 2)
    z = p[..., 2]
    radial = np.sqrt(rho * rho + z * z)
    shell = np.abs(radial - r_mid) - half_th
    # Distance in the (rho, z) plane to the rim arc (circle of radius half_th
    # centred at (r_mid, 0)) for points above the cut plane.
    rim = np.sqrt((rho - r_mid) ** 2 + z * z) - half_th
    return np.where(z > 0, np.maximum(shell, rim), shell)


def _albedo(spec: SceneSpec, points: np.ndarray) -> np.ndarray:
    if spec.albedo == "solid":
        return np.broadcast_to(np.asarray(_SOLID_ALBEDO), points.shape).copy()
    cell = 0.35 * spec.radius
    parity = np.floor((points + 0.123 * spec.radius) / cell).sum(axis=-1) % 2
    a = np.asarray(_CHECKER_A)
    b = np.asarray(_CHECKER_B)
    return np.where(parity[..., None] < 0.5, a, b)


def shade_surface(spec: SceneSpec, points, normals, view_dirs):
    """Lambertian term under a fixed light plus a camera-aligned specular lobe.

    The lobe depends on the view direction only through the view cosine, so a
    view-aware texture can represent it exactly.
    """
    light = np.asarray(_LIGHT_DIR) / np.linalg.norm(_LIGHT_DIR)
    ndotl = np.clip(np.sum(normals * light, axis=-1), 0.0, None)
    base = _albedo(spec, points) * (_AMBIENT + _DIFFUSE * ndotl)[..., None]
    vcos = np.clip(np.sum(normals * (-view_dirs), axis=-1), 0.0, 1.0)
    lobe = spec.lobe * np.clip(2.0 * vcos * vcos - 1.0, 0.0, None) ** _LOBE_EXP
    return np.clip(base + lobe[..., None], 0.0, 1.0)


def render_oracle_frame(spec: SceneSpec, camera: Camera):
    """Analytic render: (image, mask, depth); depth is distance along the ray."""
    origins, dirs = camera.ray_grid()
    t, normals = trace_primitive(spec, origins, dirs)
    hit = np.isfinite(t)
    depth = np.where(hit, t, 0.0)
    points = origins + depth[..., None] * dirs
    color = shade_surface(spec, points, normals, dirs)
    bg = np.asarray(spec.background)
    image = np.where(hit[..., None], color, bg)
    image = np.round(image * 255.0) / 255.0  # match 8-bit storage exactly
    return image, hit.astype(np.float64), depth


def camera_angle_for(spec: SceneSpec) -> float:
    return 2.0 * math.atan(1.3 * spec.radius / spec.camera_distance)


def scene_bounds_for(spec: SceneSpec):
    half = 1.25 * spec.radius
    return (np.full(3, -half), np.full(3, half))


def generate_synthetic_scene(spec: SceneSpec) -> Dataset:
    """Ray-traced oracle dataset with exact masks and depths."""
    angle_x = camera_angle_for(spec)
    res = spec.resolution
    focal = 0.5 * res / math.tan(0.5 * angle_x)
    frames = []
    for i, direction in enumerate(fibonacci_sphere(spec.n_views)):
        c2w = look_at(direction * spec.camera_distance)
        camera = Camera(focal=focal, width=res, height=res, c2w=c2w)
        image, mask, depth = render_oracle_frame(spec, camera)
        frames.append(Frame(camera=camera, image=image, mask=mask,
                            depth_prior=depth, name=f"r_{i}"))
    return Dataset(frames=frames, scene_bounds=scene_bounds_for(spec),
                   background=tuple(spec.background),
                   name=f"{spec.primitive}_{spec.albedo}")


# ---------------------------------------------------------------------------
# Disk I/O
# ---------------------------------------------------------------------------

def _save_png(path, arr):
    Image.fromarray(arr).save(path)


def save_dataset(dataset: Dataset, path) -> Path:
    """Write the transforms.json convention; depths as 16-bit PNG with a
    manifest-declared world-unit scale."""
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    max_depth = 0.0
    for fr in dataset.frames:
        if fr.depth_prior is not None:
            max_depth = max(max_depth, float(fr.depth_prior.max()))
    depth_scale = max_depth / 65535.0 if max_depth > 0 else 1.0

    cam0 = dataset.frames[0].camera
    angle_x = 2.0 * math.atan(0.5 * cam0.width / cam0.focal)
    manifest = {
        "camera_angle_x": angle_x,
        "depth_scale": depth_scale,
        "background": list(dataset.background),
        "scene_bounds": {"lo": dataset.scene_bounds[0].tolist(),
                         "hi": dataset.scene_bounds[1].tolist()},
        "frames": [],
    }
    for i, fr in enumerate(dataset.frames):
        name = fr.name or f"r_{i}"
        rel = f"images/{name}"
        _save_png(path / f"{rel}.png",
                  np.round(fr.image * 255.0).astype(np.uint8))
        if fr.mask is not None:
            _save_png(path / f"{rel}_mask.png",
                      np.round(np.clip(fr.mask, 0, 1) * 255.0).astype(np.uint8))
        if fr.depth_prior is not None:
            q = np.round(fr.depth_prior / depth_scale).astype(np.uint16)
            Image.fromarray(q).save(path / f"{rel}_depth.png")
        manifest["frames"].append({
            "file_path": rel,
            "transform_matrix": fr.camera.c2w.tolist(),
        })
    with open(path / "transforms.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return path


def _load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def _load_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def _load_depth(path, depth_scale) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    return arr * depth_scale


def load_dataset(path) -> Dataset:
    """Load a transforms.json-convention dataset directory."""
    path = Path(path)
    manifest_path = path / "transforms.json"
    if not manifest_path.exists():
        raise FormatError(f"no transforms.json manifest in {path}")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed manifest: {exc}") from exc
    if "camera_angle_x" not in manifest or "frames" not in manifest:
        raise FormatError("manifest lacks camera_angle_x or frames")
    if len(manifest["frames"]) == 0:
        raise ValidationError("manifest declares zero frames")

    angle_x = float(manifest["camera_angle_x"])
    depth_scale = float(manifest.get("depth_scale", 1.0))
    background = tuple(manifest.get("background", DEFAULT_BACKGROUND))

    frames = []
    for entry in manifest["frames"]:
        rel = entry["file_path"]
        img_path = path / rel
        if img_path.suffix == "":
            img_path = img_path.with_suffix(".png")
        if not img_path.exists():
            raise FormatError(f"missing image file {img_path}")
        image = _load_image(img_path)
        h, w = image.shape[:2]
        focal = 0.5 * w / math.tan(0.5 * angle_x)
        c2w = np.asarray(entry["transform_matrix"], dtype=np.float64)
        camera = Camera(focal=focal, width=w, height=h, c2w=c2w)

        stem = img_path.with_suffix("")
        mask = None
        mask_path = Path(f"{stem}_mask.png")
        if mask_path.exists():
            mask = _load_gray(mask_path)
            if mask.shape != (h, w):
                raise ValidationError(f"mask size mismatch for {rel}")
            mask = (mask > 0.5).astype(np.float64)
        depth = None
        depth_path = Path(f"{stem}_depth.png")
        if depth_path.exists():
            depth = _load_depth(depth_path, depth_scale)
            if depth.shape != (h, w):
                raise ValidationError(f"depth size mismatch for {rel}")
        frames.append(Frame(camera=camera, image=image, mask=mask,
                            depth_prior=depth,
                            name=os.path.basename(str(stem))))

    if "scene_bounds" in manifest:
        lo = np.asarray(manifest["scene_bounds"]["lo"], dtype=np.float64)
        hi = np.asarray(manifest["scene_bounds"]["hi"], dtype=np.float64)
    else:
        half = 1.5
        lo, hi = np.full(3, -half), np.full(3, half)
    return Dataset(frames=frames, scene_bounds=(lo, hi), background=background,
                   name=path.name)
