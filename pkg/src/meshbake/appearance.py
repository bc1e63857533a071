"""Stage-2 appearance: a learnable implicit texture modulated per channel by
Gaussians of the view cosine, decoded to color by a lightweight neural
shader, trained with an L2 photometric loss against the input views.

Geometry is frozen here: every training view is rasterized once up front and
pixels are drawn from the cached G-buffers, so a step touches only texels and
shader weights.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (Adam, MlpSpec, ParamStore, bilinear_backward,
                       bilinear_sample, mlp_backward, mlp_forward, mlp_init,
                       mlp_param_names)
from .dataset import Dataset
from .errors import DivergenceError, ValidationError
from .meshes import TriangleMesh
from .raster import GBuffer, UvAtlas, rasterize, unwrap_uv

TEXTURE_INIT_SPAN = 0.1


@dataclass
class ViewEncodingSpec:
    """Gaussian view-aware encoding: channel k is weighted by a Gaussian of
    the view cosine centred at t_k = k/(K-1) with width alpha. Disabled mode
    forces every weight to 1 (the wide-Gaussian limit, renormalized)."""

    channels: int
    alpha: float = 0.3
    enabled: bool = True

    def __post_init__(self):
        if self.channels < 1:
            raise ValidationError("need at least one texture channel")
        if self.alpha <= 0:
            raise ValidationError("alpha must be positive")

    @property
    def centers(self) -> np.ndarray:
        k = self.channels
        if k == 1:
            return np.zeros(1)
        return np.arange(k, dtype=np.float64) / (k - 1)

    @property
    def peak(self) -> float:
        return 1.0 / (self.alpha * math.sqrt(2.0 * math.pi))

    def weight(self, vcos) -> np.ndarray:
        v = np.asarray(vcos, dtype=np.float64)[..., None]
        if not self.enabled:
            return np.ones(v.shape[:-1] + (self.channels,))
        t = self.centers
        return self.peak * np.exp(-((v - t) ** 2) / (2.0 * self.alpha ** 2))

    def to_json(self):
        return {"channels": self.channels, "alpha": self.alpha,
                "enabled": self.enabled, "centers": self.centers.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["channels"], obj["alpha"], obj.get("enabled", True))


def view_aware_encode(f: np.ndarray, vcos, spec: ViewEncodingSpec,
                      want_ctx=False):
    """Per-channel Gaussian modulation of texture features by the view cosine.

    Differentiable in both f and vcos. Returns (f_l, ctx).
    """
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != spec.channels:
        raise ValidationError("feature width does not match encoding channels")
    wt = spec.weight(vcos)
    ctx = (f, np.asarray(vcos, dtype=np.float64), wt) if want_ctx else None
    return f * wt, ctx


def view_aware_encode_backward(ctx, upstream, spec: ViewEncodingSpec):
    """Returns (grad_f, grad_vcos)."""
    f, vcos, wt = ctx
    g = np.asarray(upstream, dtype=np.float64)
    grad_f = g * wt
    if not spec.enabled:
        return grad_f, np.zeros_like(vcos)
    t = spec.centers
    dwt_dv = wt * (t - vcos[..., None]) / (spec.alpha ** 2)
    grad_v = np.sum(g * f * dwt_dv, axis=-1)
    return grad_f, grad_v


def default_shader_spec(channels: int) -> MlpSpec:
    return MlpSpec((channels, 32, 32, 3), ("relu", "relu", "sigmoid"))


@dataclass
class ShaderWeights:
    spec: MlpSpec
    store: ParamStore
    prefix: str = "shader"

    @classmethod
    def create(cls, channels: int, rng: np.random.Generator,
               store: ParamStore | None = None):
        store = store or ParamStore()
        spec = default_shader_spec(channels)
        mlp_init(spec, store, "shader", rng)
        return cls(spec, store)

    def param_names(self):
        return mlp_param_names(self.spec, self.prefix)


def shade(f_l: np.ndarray, shader: ShaderWeights, want_ctx=False):
    """Encoded features -> rgb in (0,1)^3."""
    if not np.all(np.isfinite(f_l)):
        raise ValidationError("shader input must be finite")
    rgb, ctx = mlp_forward(shader.spec, shader.store, shader.prefix, f_l,
                           want_ctx=want_ctx)
    return rgb, ctx


def shade_backward(shader: ShaderWeights, ctx, upstream):
    return mlp_backward(shader.spec, shader.store, shader.prefix, ctx, upstream)


def new_texture(resolution: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-TEXTURE_INIT_SPAN, TEXTURE_INIT_SPAN,
                       size=(resolution, resolution, channels))


@dataclass
class AppearanceModel:
    """Everything needed to render baked appearance: frozen mesh + atlas,
    the implicit texture, the view encoding, and the shader."""

    mesh: TriangleMesh
    atlas: UvAtlas
    texture: np.ndarray
    encoding: ViewEncodingSpec
    shader: ShaderWeights
    background: tuple = (1.0, 1.0, 1.0)


def render_view(mesh: TriangleMesh, atlas: UvAtlas, texture: np.ndarray,
                encoding: ViewEncodingSpec, shader: ShaderWeights, camera,
                resolution=None, background=(1.0, 1.0, 1.0),
                gbuffer: GBuffer | None = None, mode: str = "shaded"):
    """Rasterize then shade each covered pixel; uncovered pixels take the
    background color. mode="normals" visualizes world normals instead."""
    gb = gbuffer if gbuffer is not None else rasterize(mesh, atlas, camera,
                                                       resolution)
    h, w = gb.face_id.shape
    image = np.ones((h, w, 3)) * np.asarray(background, dtype=np.float64)
    ys, xs = np.nonzero(gb.covered)
    if ys.size == 0:
        return image
    if mode == "normals":
        image[ys, xs] = 0.5 * (gb.normal[ys, xs] + 1.0)
        return image
    feats, _ = bilinear_sample(texture, gb.uv[ys, xs])
    f_l, _ = view_aware_encode(feats, gb.vcos[ys, xs], encoding)
    rgb, _ = shade(f_l, shader)
    image[ys, xs] = rgb
    return image


def render_model(model: AppearanceModel, camera, resolution=None, **kw):
    return render_view(model.mesh, model.atlas, model.texture, model.encoding,
                       model.shader, camera, resolution,
                       background=model.background, **kw)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class AppearanceTrainConfig:
    channels: int = 12
    alpha: float = 0.3
    texture_res: int = 256
    steps: int = 3000
    batch_px: int = 4096
    lr_texture: float = 1e-2
    lr_shader: float = 1e-3
    seed: int = 0
    encoding_enabled: bool = True
    holdout_every: int = 10      # frame k is held out when k % holdout_every == 0
    eval_every: int = 500
    log_every: int = 50

    def __post_init__(self):
        if self.channels < 1:
            raise ValidationError("channels must be >= 1")


def split_frames(dataset: Dataset, holdout_every: int):
    train, held = [], []
    for k, fr in enumerate(dataset.frames):
        if holdout_every and k % holdout_every == 0:
            held.append(fr)
        else:
            train.append(fr)
    if not train:
        raise ValidationError("holdout schedule leaves no training frames")
    return train, held


def gather_training_pixels(frames, mesh, atlas):
    """Rasterize each frame once; keep covered pixels (restricted to the
    ground-truth mask when one is provided)."""
    uvs, vcs, targets = [], [], []
    for fr in frames:
        gb = rasterize(mesh, atlas, fr.camera)
        keep = gb.covered
        if fr.mask is not None:
            keep = keep & (fr.mask > 0.5)
        ys, xs = np.nonzero(keep)
        uvs.append(gb.uv[ys, xs])
        vcs.append(gb.vcos[ys, xs])
        targets.append(fr.image[ys, xs])
    if not uvs or sum(len(u) for u in uvs) == 0:
        raise ValidationError("no covered training pixels; mesh and views do not overlap")
    return (np.concatenate(uvs), np.concatenate(vcs), np.concatenate(targets))


def train_appearance(dataset: Dataset, mesh: TriangleMesh,
                     atlas: UvAtlas | None = None,
                     config: AppearanceTrainConfig | None = None,
                     progress=None):
    """Optimize texture and shader; geometry is bit-frozen.

    Returns (AppearanceModel, history). history records the training loss and
    periodic held-out PSNR.
    """
    from .metrics import psnr

    dataset.require_trainable()
    config = config or AppearanceTrainConfig()
    rng = np.random.default_rng(config.seed)
    if atlas is None:
        atlas = unwrap_uv(mesh, config.texture_res)
    encoding = ViewEncodingSpec(config.channels, config.alpha,
                                config.encoding_enabled)
    store = ParamStore()
    shader = ShaderWeights.create(config.channels, rng, store)
    store.add("texture", new_texture(config.texture_res, config.channels, rng))
    model = AppearanceModel(mesh, atlas, store["texture"], encoding, shader,
                            background=tuple(dataset.background))

    train_frames, held_frames = split_frames(dataset, config.holdout_every)
    uv, vcos, target = gather_training_pixels(train_frames, mesh, atlas)
    n_px = len(uv)

    adam = Adam(store, {"texture": config.lr_texture,
                        "shader": config.lr_shader})
    shader_names = shader.param_names()
    history = []

    def holdout_psnr():
        if not held_frames:
            return float("nan")
        vals = []
        for fr in held_frames:
            img = render_model(model, fr.camera)
            vals.append(psnr(img, fr.image))
        finite = [v for v in vals if math.isfinite(v)]
        return float(np.mean(finite)) if finite else float("inf")

    for step in range(config.steps):
        idx = rng.integers(0, n_px, size=min(config.batch_px, n_px))
        feats, bctx = bilinear_sample(store["texture"], uv[idx], want_ctx=True)
        f_l, ectx = view_aware_encode(feats, vcos[idx], encoding, want_ctx=True)
        pred, sctx = shade(f_l, shader, want_ctx=True)
        err = pred - target[idx]
        loss = float(np.mean(err ** 2))
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite appearance loss at step {step}")

        store.zero_grads()
        g_pred = 2.0 * err / err.size
        g_fl = shade_backward(shader, sctx, g_pred)
        g_f, _ = view_aware_encode_backward(ectx, g_fl, encoding)
        grad_tex, _ = bilinear_backward(bctx, g_f)
        store.accumulate("texture", grad_tex)
        touched_rows = np.unique(np.concatenate(
            [bctx.idx00, bctx.idx01, bctx.idx10, bctx.idx11]))
        adam.step(touched={"texture": touched_rows},
                  names=["texture"] + shader_names)

        if step % config.log_every == 0 or step == config.steps - 1:
            entry = {"step": step, "loss": loss}
            if config.eval_every and (step % config.eval_every == 0
                                      or step == config.steps - 1):
                entry["holdout_psnr"] = holdout_psnr()
            history.append(entry)
            if progress is not None:
                progress(entry)
    return model, history


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_appearance(model: AppearanceModel, path, extra=None):
    meta = {
        "kind": "appearance",
        "encoding": model.encoding.to_json(),
        "shader_spec": model.shader.spec.to_json(),
        "background": list(model.background),
        "atlas_resolution": model.atlas.resolution,
    }
    if extra:
        meta.update(extra)
    arrays = {"texture": model.texture,
              "mesh_vertices": model.mesh.vertices,
              "mesh_faces": model.mesh.faces,
              "mesh_normals": model.mesh.normals,
              "atlas_face_uvs": model.atlas.face_uvs}
    for name in model.shader.param_names():
        arrays[f"shader::{name}"] = model.shader.store[name]
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(),
                                   dtype=np.uint8)
    np.savez_compressed(path, **arrays)


def load_appearance(path) -> AppearanceModel:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("kind") != "appearance":
            raise ValidationError(f"{path} is not an appearance checkpoint")
        encoding = ViewEncodingSpec.from_json(meta["encoding"])
        spec = MlpSpec.from_json(meta["shader_spec"])
        store = ParamStore()
        for key in data.files:
            if key.startswith("shader::"):
                store.add(key[len("shader::"):], data[key])
        store.add("texture", data["texture"])
        mesh = TriangleMesh(data["mesh_vertices"], data["mesh_faces"],
                            data["mesh_normals"])
        atlas = UvAtlas(data["atlas_face_uvs"], meta["atlas_resolution"])
    shader = ShaderWeights(spec, store)
    return AppearanceModel(mesh, atlas, store["texture"], encoding, shader,
                           background=tuple(meta["background"]))
