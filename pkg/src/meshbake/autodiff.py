"""Differentiable-computation kernel: parameter stores, small MLPs, bilinear
texture sampling, direction/position encodings, and an Adam optimizer with
sparse updates.

Every operation comes as an explicit forward/backward pair; there is no tape.
Forward functions return a context object that the matching backward consumes.
Gradients accumulate (+=) into the ParamStore so several loss paths can share
parameters within one step.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError, ValidationError

ACTIVATIONS = ("relu", "sigmoid", "none")


class ParamStore:
    """Named dense arrays plus a parallel gradient array per parameter.

    Gradient zeroing is lazy per parameter: only rows actually written since
    the last zero_grads are cleared, which keeps steps cheap when large grid
    parameters receive sparse updates.
    """

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._dirty: dict[str, object] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._params:
            raise ValidationError(f"parameter {name!r} already exists")
        value = np.asarray(value)
        self._params[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name: str) -> np.ndarray:
        return self._params[name]

    def __setitem__(self, name: str, value: np.ndarray):
        if name not in self._params:
            self.add(name, value)
            return
        if value.shape != self._params[name].shape:
            raise ValidationError(f"shape change for {name!r}")
        self._params[name] = np.asarray(value)

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def names(self):
        return list(self._params)

    def accumulate(self, name: str, g: np.ndarray):
        if g.shape != self._grads[name].shape:
            raise ValidationError(
                f"gradient shape {g.shape} != parameter shape {self._grads[name].shape} for {name!r}"
            )
        self._grads[name] += g
        self._dirty[name] = "all"

    def accumulate_rows(self, name: str, rows: np.ndarray, values: np.ndarray):
        """Add to distinct rows of a row-major view of the gradient."""
        grad = self._grads[name]
        view = grad.reshape(-1, grad.shape[-1]) if grad.ndim > 1 else grad
        view[rows] += values
        mark = self._dirty.get(name)
        if mark != "all":
            self._dirty.setdefault(name, [])
            self._dirty[name].append(rows)

    def zero_grads(self):
        for name, mark in self._dirty.items():
            grad = self._grads[name]
            if mark == "all":
                grad[...] = 0
            else:
                view = grad.reshape(-1, grad.shape[-1]) if grad.ndim > 1 else grad
                for rows in mark:
                    view[rows] = 0
        self._dirty.clear()

    def save_npz(self, path, meta: dict | None = None):
        payload = {f"p::{k}": v for k, v in self._params.items()}
        payload["meta"] = np.frombuffer(
            json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8
        )
        np.savez_compressed(path, **payload)

    @classmethod
    def load_npz(cls, path) -> tuple["ParamStore", dict]:
        with np.load(path) as data:
            store = cls()
            meta = json.loads(bytes(data["meta"]).decode()) if "meta" in data else {}
            for key in data.files:
                if key.startswith("p::"):
                    store.add(key[3:], data[key])
        return store, meta


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input, hidden..., output) and per-layer activation tags."""

    widths: tuple
    activations: tuple

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValidationError("MlpSpec needs at least one layer")
        if any(w < 1 for w in self.widths):
            raise ValidationError("layer widths must be >= 1")
        if len(self.activations) != len(self.widths) - 1:
            raise ValidationError("one activation tag per layer required")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValidationError(f"unknown activation {act!r}")

    @property
    def n_layers(self):
        return len(self.widths) - 1

    @property
    def in_width(self):
        return self.widths[0]

    @property
    def out_width(self):
        return self.widths[-1]

    def to_json(self):
        return {"widths": list(self.widths), "activations": list(self.activations)}

    @classmethod
    def from_json(cls, obj):
        return cls(tuple(obj["widths"]), tuple(obj["activations"]))


def mlp_init(spec: MlpSpec, store: ParamStore, prefix: str, rng: np.random.Generator,
             dtype=np.float64):
    """Glorot-uniform weights, zero biases."""
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
        store.add(f"{prefix}.w{i}", w)
        store.add(f"{prefix}.b{i}", np.zeros(fan_out, dtype=dtype))


def mlp_param_names(spec: MlpSpec, prefix: str):
    names = []
    for i in range(spec.n_layers):
        names += [f"{prefix}.w{i}", f"{prefix}.b{i}"]
    return names


@dataclass
class MlpCtx:
    prefix: str
    inputs: list = field(default_factory=list)   # layer inputs, one per layer
    post: list = field(default_factory=list)     # post-activation outputs


def _activate(z, tag):
    if tag == "relu":
        return np.maximum(z, 0.0)
    if tag == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    return z


def mlp_forward(spec: MlpSpec, store: ParamStore, prefix: str, x: np.ndarray,
                want_ctx: bool = True):
    """Affine-then-activation composition over a (N, in) or (in,) batch.

    Returns (y, ctx); ctx is None when want_ctx is False.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[-1] != spec.in_width:
        raise ValidationError(
            f"input width {h.shape[-1]} != spec input width {spec.in_width}"
        )
    ctx = MlpCtx(prefix=prefix) if want_ctx else None
    for i, act in enumerate(spec.activations):
        w = store[f"{prefix}.w{i}"]
        b = store[f"{prefix}.b{i}"]
        if w.shape != (spec.widths[i + 1], spec.widths[i]):
            raise ValidationError(f"parameter {prefix}.w{i} has wrong shape")
        z = h @ w.T + b
        out = _activate(z, act)
        if ctx is not None:
            ctx.inputs.append(h)
            ctx.post.append(out)
        h = out
    y = h[0] if squeeze else h
    return y, ctx


def mlp_backward(spec: MlpSpec, store: ParamStore, prefix: str, ctx: MlpCtx,
                 upstream: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients; return dL/dx."""
    if ctx is None or ctx.prefix != prefix or len(ctx.inputs) != spec.n_layers:
        raise UsageError("mlp_backward requires the ctx from a matching forward")
    g = np.asarray(upstream, dtype=np.float64)
    squeeze = g.ndim == 1
    if squeeze:
        g = g[None, :]
    for i in reversed(range(spec.n_layers)):
        act = spec.activations[i]
        out = ctx.post[i]
        if act == "relu":
            gz = g * (out > 0)
        elif act == "sigmoid":
            gz = g * out * (1.0 - out)
        else:
            gz = g
        x_in = ctx.inputs[i]
        store.accumulate(f"{prefix}.w{i}", gz.T @ x_in)
        store.accumulate(f"{prefix}.b{i}", gz.sum(axis=0))
        g = gz @ store[f"{prefix}.w{i}"]
    return g[0] if squeeze else g


# ---------------------------------------------------------------------------
# Bilinear texture sampling (clamp-to-edge addressing)
# ---------------------------------------------------------------------------

@dataclass
class BilinearCtx:
    shape: tuple
    idx00: np.ndarray
    idx01: np.ndarray
    idx10: np.ndarray
    idx11: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    gate_x: np.ndarray   # False where clamped to the border (d/du = 0 there)
    gate_y: np.ndarray
    texture: np.ndarray


def _bilinear_coords(uv, res):
    uv = np.asarray(uv, dtype=np.float64)
    if not np.all(np.isfinite(uv)):
        raise ValidationError("non-finite uv coordinates")
    raw_x = uv[..., 0] * res - 0.5
    raw_y = uv[..., 1] * res - 0.5
    gate_x = (raw_x > 0.0) & (raw_x < res - 1.0)
    gate_y = (raw_y > 0.0) & (raw_y < res - 1.0)
    x = np.clip(raw_x, 0.0, res - 1.0)
    y = np.clip(raw_y, 0.0, res - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x0 = np.minimum(x0, res - 2) if res > 1 else x0
    y0 = np.minimum(y0, res - 2) if res > 1 else y0
    x1 = np.minimum(x0 + 1, res - 1)
    y1 = np.minimum(y0 + 1, res - 1)
    return x0, y0, x1, y1, x - x0, y - y0, gate_x, gate_y


def bilinear_sample(texture: np.ndarray, uv: np.ndarray, want_ctx: bool = True):
    """Sample an (R, R, K) texture at uv in [0,1]^2; v indexes rows, u columns.

    Returns (values, ctx) where values has shape uv.shape[:-1] + (K,).
    """
    texture = np.asarray(texture)
    if texture.ndim != 3 or texture.shape[0] != texture.shape[1]:
        raise ValidationError("texture must be a square (R, R, K) array")
    res = texture.shape[0]
    single = np.asarray(uv).ndim == 1
    uv_arr = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    x0, y0, x1, y1, fx, fy, gate_x, gate_y = _bilinear_coords(uv_arr, res)
    flat = texture.reshape(res * res, -1)
    i00 = y0 * res + x0
    i01 = y0 * res + x1
    i10 = y1 * res + x0
    i11 = y1 * res + x1
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    vals = (flat[i00] * w00[:, None] + flat[i01] * w01[:, None]
            + flat[i10] * w10[:, None] + flat[i11] * w11[:, None])
    ctx = None
    if want_ctx:
        ctx = BilinearCtx(texture.shape, i00, i01, i10, i11, fx, fy,
                          gate_x, gate_y, flat)
    return (vals[0] if single else vals), ctx


def bilinear_backward(ctx: BilinearCtx, upstream: np.ndarray,
                      grad_texture: np.ndarray | None = None):
    """Distribute upstream gradients to the 4 footprint texels.

    Returns (grad_texture, grad_uv). grad_texture may be passed in to
    accumulate across calls; grad_uv is the gradient w.r.t. the uv inputs.
    """
    if ctx is None:
        raise UsageError("bilinear_backward requires the ctx from a forward")
    res, _, k = ctx.shape
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if grad_texture is None:
        grad_texture = np.zeros(ctx.shape, dtype=np.float64)
    gflat = grad_texture.reshape(res * res, k)
    fx, fy = ctx.fx, ctx.fy
    np.add.at(gflat, ctx.idx00, g * ((1 - fx) * (1 - fy))[:, None])
    np.add.at(gflat, ctx.idx01, g * (fx * (1 - fy))[:, None])
    np.add.at(gflat, ctx.idx10, g * ((1 - fx) * fy)[:, None])
    np.add.at(gflat, ctx.idx11, g * (fx * fy)[:, None])

    t00, t01 = ctx.texture[ctx.idx00], ctx.texture[ctx.idx01]
    t10, t11 = ctx.texture[ctx.idx10], ctx.texture[ctx.idx11]
    dvdx = (t01 - t00) * (1 - fy)[:, None] + (t11 - t10) * fy[:, None]
    dvdy = (t10 - t00) * (1 - fx)[:, None] + (t11 - t01) * fx[:, None]
    grad_uv = np.stack(
        [(g * dvdx).sum(axis=1) * res * ctx.gate_x,
         (g * dvdy).sum(axis=1) * res * ctx.gate_y], axis=-1)
    return grad_texture, grad_uv


# ---------------------------------------------------------------------------
# Input encodings (fixed, parameter-free)
# ---------------------------------------------------------------------------

def frequency_encode(x: np.ndarray, n_freqs: int) -> np.ndarray:
    """[x, sin(2^k x), cos(2^k x) for k < n_freqs] along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for k in range(n_freqs):
        s = (2.0 ** k) * np.pi * x
        parts += [np.sin(s), np.cos(s)]
    return np.concatenate(parts, axis=-1)


def frequency_encode_width(dim: int, n_freqs: int) -> int:
    return dim * (1 + 2 * n_freqs)


_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
          -1.0925484305920792, 0.5462742152960396)
_SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
          0.3731763325901154, -0.4570457994644658, 1.445305721320277,
          -0.5900435899266435)


def sh_encode(dirs: np.ndarray) -> np.ndarray:
    """Real spherical harmonics up to degree 3 (16 coefficients) of unit dirs."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out = np.stack([
        np.full_like(x, _SH_C0),
        -_SH_C1 * y, _SH_C1 * z, -_SH_C1 * x,
        _SH_C2[0] * xy, _SH_C2[1] * yz, _SH_C2[2] * (2 * zz - xx - yy),
        _SH_C2[3] * xz, _SH_C2[4] * (xx - yy),
        _SH_C3[0] * y * (3 * xx - yy), _SH_C3[1] * xy * z,
        _SH_C3[2] * y * (4 * zz - xx - yy),
        _SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
        _SH_C3[4] * x * (4 * zz - xx - yy),
        _SH_C3[5] * z * (xx - yy), _SH_C3[6] * x * (xx - 3 * yy),
    ], axis=-1)
    return out


SH_WIDTH = 16


# ---------------------------------------------------------------------------
# Adam with optional sparse (touched-index) updates
# ---------------------------------------------------------------------------

class Adam:
    """Adam over a ParamStore. Rows touched this step may be passed per
    parameter to confine the update to gathered entries (moments of untouched
    entries are left as-is; bias correction uses the global step)."""

    def __init__(self, store: ParamStore, lr: dict | float, betas=(0.9, 0.99),
                 eps=1e-15):
        self.store = store
        self.lr = lr
        self.lr_scale = 1.0
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self._m = {n: np.zeros_like(store[n]) for n in store.names()}
        self._v = {n: np.zeros_like(store[n]) for n in store.names()}

    def _lr_for(self, name):
        if isinstance(self.lr, dict):
            best = None
            for prefix, value in self.lr.items():
                if name == prefix or name.startswith(prefix):
                    if best is None or len(prefix) > len(best[0]):
                        best = (prefix, value)
            if best is None:
                raise ValidationError(f"no learning rate configured for {name!r}")
            return best[1] * self.lr_scale
        return self.lr * self.lr_scale

    def step(self, touched: dict | None = None, names=None):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name in (names if names is not None else self.store.names()):
            g = self.store.grad(name)
            p = self.store[name]
            m, v = self._m[name], self._v[name]
            lr = self._lr_for(name)
            idx = touched.get(name) if touched else None
            if idx is None:
                m *= self.b1
                m += (1 - self.b1) * g
                v *= self.b2
                v += (1 - self.b2) * (g * g)
                p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            else:
                gi = g.reshape(-1, g.shape[-1])[idx] if g.ndim > 1 else g[idx]
                mi = m.reshape(-1, m.shape[-1]) if m.ndim > 1 else m
                vi = v.reshape(-1, v.shape[-1]) if v.ndim > 1 else v
                pi = p.reshape(-1, p.shape[-1]) if p.ndim > 1 else p
                mnew = self.b1 * mi[idx] + (1 - self.b1) * gi
                vnew = self.b2 * vi[idx] + (1 - self.b2) * gi * gi
                mi[idx] = mnew
                vi[idx] = vnew
                pi[idx] -= lr * (mnew / c1) / (np.sqrt(vnew / c2) + self.eps)
