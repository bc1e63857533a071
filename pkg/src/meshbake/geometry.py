"""Stage-1 geometry: a signed-distance field on progressive grids trained
with photometric, eikonal, mask, and depth/normal losses, plus isosurface
extraction.

Conventions used throughout:
  * sdf < 0 inside the object, > 0 outside; the decoder predicts a residual
    on top of a fixed sphere prior so the field starts as a well-behaved SDF.
  * Spatial gradients of the field are central finite differences with a
    step tied to the finest active grid level, so the gradient sharpens as
    the bandwidth beta grows. Every loss that needs d(sdf)/d(position)
    backpropagates through those six tap queries.
  * Ray compositing converts consecutive sdf samples to opacities through a
    logistic CDF with learned sharpness s and standard front-to-back
    transmittance.
"""

from dataclasses import dataclass

import numpy as np
from skimage import measure as _sk_measure

from .autodiff import (Adam, MlpSpec, ParamStore, frequency_encode,
                       frequency_encode_width, mlp_backward, mlp_forward,
                       mlp_init, mlp_param_names, sh_encode, SH_WIDTH)
from .dataset import Dataset
from .errors import DivergenceError, EmptyMeshError, ValidationError
from .grids import (GridEncodeCtx, MaskGrid, ProgressiveGridSchedule,
                    desk_schedule, flush_grid_gradients, grid_encode,
                    grid_encode_backward, init_grids, update_mask_grid)
from .meshes import TriangleMesh, check_manifold, drop_degenerate_faces

GEO_FEAT_DIM = 15
POS_FREQS = 6
DIR_FREQS = 4
# Softer clamp than machine epsilon: an unbounded -log penalty for barely
# covering a background pixel drags the converged surface inward.
BCE_EPS = 1e-3
ALPHA_MAX = 1.0 - 1e-7


@dataclass
class GeometryLossWeights:
    rgb: float = 1.0
    eikonal: float = 0.1
    mask: float = 0.1
    depth: float = 0.3
    normal: float = 0.04

    def __post_init__(self):
        for name in ("rgb", "eikonal", "mask", "depth", "normal"):
            if getattr(self, name) < 0:
                raise ValidationError(f"loss weight {name} must be >= 0")


@dataclass
class SdfField:
    schedule: ProgressiveGridSchedule
    bounds: tuple
    store: ParamStore
    decoder_spec: MlpSpec
    head_specs: dict
    prior_radius: float

    @property
    def center(self) -> np.ndarray:
        lo, hi = self.bounds
        return 0.5 * (np.asarray(lo) + np.asarray(hi))

    @property
    def half_extent(self) -> float:
        lo, hi = self.bounds
        return float(0.5 * (np.asarray(hi) - np.asarray(lo)).max())

    def sharpness(self) -> float:
        raw = float(np.clip(self.store["s_raw"][0], -1.0, 1.4))
        return float(np.exp(10.0 * raw))

    def fd_eps(self, beta: float) -> float:
        """Finite-difference step: half a voxel of the finest active level."""
        n_active = max(self.schedule.active_levels(beta), 1)
        res = self.schedule.resolutions[n_active - 1]
        lo, hi = self.bounds
        spacing = float((np.asarray(hi) - np.asarray(lo)).min()) / (res - 1)
        return 0.5 * spacing


def head_spec_for(head_index: int) -> MlpSpec:
    pos_w = frequency_encode_width(3, POS_FREQS)
    if head_index == 1:
        return MlpSpec((pos_w + SH_WIDTH + GEO_FEAT_DIM, 64, 3),
                       ("relu", "sigmoid"))
    return MlpSpec((pos_w + frequency_encode_width(3, DIR_FREQS) + GEO_FEAT_DIM,
                    64, 64, 3), ("relu", "relu", "sigmoid"))


def create_field(schedule: ProgressiveGridSchedule, bounds,
                 rng: np.random.Generator, grid_dtype=np.float32) -> SdfField:
    store = ParamStore()
    init_grids(schedule, store, rng, dtype=grid_dtype)
    decoder_spec = MlpSpec((schedule.feature_width, 64, 1 + GEO_FEAT_DIM),
                           ("relu", "none"))
    mlp_init(decoder_spec, store, "decoder", rng)
    head_specs = {1: head_spec_for(1), 2: head_spec_for(2)}
    mlp_init(head_specs[1], store, "head1", rng)
    mlp_init(head_specs[2], store, "head2", rng)
    store.add("s_raw", np.array([0.3]))
    lo, hi = (np.asarray(v, dtype=np.float64) for v in bounds)
    # Start as a sphere slightly inside the bounds: carving a too-large
    # surface inward is something the mask grid follows without stalling,
    # whereas growing outward past the occupancy margin is not.
    prior_radius = 0.9 * 0.5 * float((hi - lo).min())
    return SdfField(schedule, (lo, hi), store, decoder_spec, head_specs,
                    prior_radius)


@dataclass
class FieldQueryCtx:
    grid_ctx: GridEncodeCtx
    mlp_ctx: object


def field_query(field: SdfField, positions, beta, want_ctx=True):
    """(sdf, geometry feature, ctx) for a (N, 3) batch."""
    p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    feats, gctx = grid_encode(p, beta, field.schedule, field.store,
                              field.bounds, want_ctx=want_ctx)
    out, mctx = mlp_forward(field.decoder_spec, field.store, "decoder", feats,
                            want_ctx=want_ctx)
    prior = np.linalg.norm(p - field.center, axis=-1) - field.prior_radius
    sdf = out[:, 0] + prior
    ctx = FieldQueryCtx(gctx, mctx) if want_ctx else None
    return sdf, out[:, 1:], ctx


def field_query_backward(field: SdfField, ctx: FieldQueryCtx, g_sdf,
                         g_geo=None, pending: dict | None = None) -> dict:
    n = g_sdf.shape[0]
    upstream = np.zeros((n, 1 + GEO_FEAT_DIM), dtype=np.float64)
    upstream[:, 0] = g_sdf
    if g_geo is not None:
        upstream[:, 1:] = g_geo
    g_feats = mlp_backward(field.decoder_spec, field.store, "decoder",
                           ctx.mlp_ctx, upstream)
    return grid_encode_backward(ctx.grid_ctx, g_feats, field.store,
                                pending=pending)


def sdf_query(field: SdfField, positions, beta=None):
    """Public query: (sdf, geometry feature); accepts (3,) or (N, 3)."""
    beta = field.schedule.levels if beta is None else beta
    single = np.asarray(positions).ndim == 1
    sdf, geo, _ = field_query(field, positions, beta, want_ctx=False)
    return (float(sdf[0]), geo[0]) if single else (sdf, geo)


def sdf_only(field: SdfField, positions, beta=None, chunk=262144) -> np.ndarray:
    beta = field.schedule.levels if beta is None else beta
    p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    out = np.empty(p.shape[0])
    for s in range(0, p.shape[0], chunk):
        out[s:s + chunk] = field_query(field, p[s:s + chunk], beta,
                                       want_ctx=False)[0]
    return out


def numerical_gradient(field: SdfField, positions, beta=None, eps=None):
    """Central-difference spatial gradient of the sdf, (N, 3)."""
    beta = field.schedule.levels if beta is None else beta
    eps = field.fd_eps(beta) if eps is None else eps
    p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    offsets = _tap_offsets(eps)
    taps = (p[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
    sdf = sdf_only(field, taps, beta).reshape(-1, 6)
    return np.stack([(sdf[:, 2 * a] - sdf[:, 2 * a + 1]) / (2 * eps)
                     for a in range(3)], axis=-1)


def _tap_offsets(eps):
    out = np.zeros((6, 3))
    for axis in range(3):
        out[2 * axis, axis] = eps
        out[2 * axis + 1, axis] = -eps
    return out


def _head_inputs(field: SdfField, positions, dirs, geo_feats, head_index):
    pos_n = (positions - field.center) / field.half_extent
    parts = [frequency_encode(pos_n, POS_FREQS)]
    if head_index == 1:
        parts.append(sh_encode(dirs))
    else:
        parts.append(frequency_encode(dirs, DIR_FREQS))
    parts.append(geo_feats)
    return np.concatenate(parts, axis=-1)


def appearance_head(field: SdfField, positions, dirs, head_index, beta=None):
    """rgb in [0,1] from one of the two stage-1 texture heads."""
    if head_index not in (1, 2):
        raise ValidationError("head_index must be 1 or 2")
    beta = field.schedule.levels if beta is None else beta
    single = np.asarray(positions).ndim == 1
    p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    _, geo, _ = field_query(field, p, beta, want_ctx=False)
    x = _head_inputs(field, p, d, geo, head_index)
    rgb, _ = mlp_forward(field.head_specs[head_index], field.store,
                         f"head{head_index}", x, want_ctx=False)
    return rgb[0] if single else rgb


# ---------------------------------------------------------------------------
# Ray rendering
# ---------------------------------------------------------------------------

def ray_box_intersect(origins, dirs, bounds):
    lo, hi = (np.asarray(v, dtype=np.float64) for v in bounds)
    inv = 1.0 / np.where(np.abs(dirs) > 1e-15, dirs, 1e-15)
    t1 = (lo - origins) * inv
    t2 = (hi - origins) * inv
    t_near = np.maximum(np.minimum(t1, t2).max(axis=-1), 1e-4)
    t_far = np.maximum(t1, t2).min(axis=-1)
    valid = t_far > t_near
    return t_near, t_far, valid


def _concentrated_ts(origins, dirs, t_near, t_far, n_samples, mask_grid,
                     jitter, probes_per_sample=4):
    """Distribute ray samples over the mask-occupied parts of each segment.

    A fine occupancy profile per ray defines a CDF; stratified samples are
    placed by inverting it, so sample density concentrates where surface may
    exist while empty rays fall back to uniform coverage.
    """
    n = len(t_near)
    f = probes_per_sample * n_samples
    mids = (np.arange(f) + 0.5) / f
    span = (t_far - t_near)[:, None]
    t_probe = t_near[:, None] + mids * span
    probe_pts = origins[:, None, :] + t_probe[..., None] * dirs[:, None, :]
    occ = mask_grid.query(probe_pts.reshape(-1, 3)).reshape(n, f)
    w = occ.astype(np.float64) + 1e-3
    cdf = np.cumsum(w, axis=1)
    cdf /= cdf[:, -1:]
    u = (np.arange(n_samples) + jitter) / n_samples
    shift = 2.0 * np.arange(n)[:, None]
    flat_bins = np.searchsorted(np.ravel(cdf + shift), np.ravel(u + shift))
    bins = np.minimum(flat_bins.reshape(n, n_samples) - np.arange(n)[:, None] * f,
                      f - 1)
    # position inside the chosen bin, proportional to the CDF remainder
    cdf_lo = np.take_along_axis(np.concatenate([np.zeros((n, 1)), cdf], axis=1),
                                bins, axis=1)
    cdf_hi = np.take_along_axis(cdf, bins, axis=1)
    inner = (u - cdf_lo) / np.maximum(cdf_hi - cdf_lo, 1e-12)
    frac = (bins + np.clip(inner, 0.0, 1.0)) / f
    return np.sort(t_near[:, None] + frac * span, axis=1)


@dataclass
class RenderCtx:
    beta: float
    eps: float
    head_index: int
    background: np.ndarray
    ray_idx: np.ndarray       # (E,) ray of each evaluated sample
    samp_idx: np.ndarray      # (E,) sample slot of each evaluated sample
    near_ids: np.ndarray      # (T,) indices into the evaluated set with taps
    n_rays: int
    n_samples: int
    sdf_eval: np.ndarray      # (E,)
    phi: np.ndarray           # (N, n) logistic CDF values, 1.0 where skipped
    alpha: np.ndarray         # (N, n-1)
    alpha_gate: np.ndarray    # (N, n-1) pass-through mask for the clip
    trans: np.ndarray         # (N, n-1)
    weights: np.ndarray       # (N, n-1)
    tmid: np.ndarray          # (N, n-1)
    colors: np.ndarray        # (E, 3)
    nhat: np.ndarray          # (T, 3)
    grad_norm: np.ndarray     # (T,)
    center_ctx: FieldQueryCtx
    taps_ctx: FieldQueryCtx
    head_ctx: object
    sharpness: float


def render_rays(field: SdfField, origins, dirs, beta, n_samples=32,
                mask_grid: MaskGrid | None = None, head_index=2,
                background=(1.0, 1.0, 1.0), rng: np.random.Generator | None = None,
                with_gradients=True, want_ctx=False, tap_band=None,
                tap_rate=1.0, concentrate_samples=True):
    """Composite color/depth/normal/weight along rays through the field.

    Samples inside mask-grid-empty voxels are never queried; their opacity
    contribution is exactly zero. Spatial-gradient taps (for eikonal and
    rendered normals) run on samples within `tap_band` sample spacings of
    the surface; None taps every evaluated sample. Returns (outputs, ctx).
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = origins.shape[0]
    if n_samples < 8:
        raise ValidationError("n_samples must be >= 8")
    bg = np.asarray(background, dtype=np.float64)

    t_near, t_far, hits_box = ray_box_intersect(origins, dirs, field.bounds)
    t_near = np.where(hits_box, t_near, 0.0)
    t_far = np.where(hits_box, t_far, 1.0)
    if rng is not None:
        jitter = rng.random((n, n_samples))
    else:
        jitter = np.full((n, n_samples), 0.5)
    if mask_grid is None or not concentrate_samples:
        frac = (np.arange(n_samples) + jitter) / n_samples
        ts = t_near[:, None] + frac * (t_far - t_near)[:, None]
    else:
        ts = _concentrated_ts(origins, dirs, t_near, t_far, n_samples,
                              mask_grid, jitter)
    pts = origins[:, None, :] + ts[..., None] * dirs[:, None, :]

    eval_mask = np.broadcast_to(hits_box[:, None], (n, n_samples)).copy()
    if mask_grid is not None:
        occ = mask_grid.query(pts.reshape(-1, 3)).reshape(n, n_samples)
        eval_mask &= occ

    ray_idx, samp_idx = np.nonzero(eval_mask)
    e = ray_idx.size
    eps = field.fd_eps(beta)
    phi = np.ones((n, n_samples))
    sdf_eval = np.zeros(0)
    colors = np.zeros((0, 3))
    nhat = np.zeros((0, 3))
    grad_norm = np.zeros(0)
    near_ids = np.zeros(0, dtype=np.int64)
    cctx = tctx = hctx = None
    s = field.sharpness()

    if e > 0:
        centers = pts[ray_idx, samp_idx]
        sdf_eval, geo_eval, cctx = field_query(field, centers, beta,
                                               want_ctx=want_ctx)
        u = np.clip(s * sdf_eval, -500, 500)
        phi[ray_idx, samp_idx] = 1.0 / (1.0 + np.exp(-u))
        if with_gradients:
            if tap_band is None:
                near_ids = np.arange(e)
            else:
                spacing = ((t_far - t_near) / n_samples)[ray_idx]
                band = np.maximum(tap_band * spacing, 4.0 * eps)
                near_ids = np.nonzero(np.abs(sdf_eval) < band)[0]
            if tap_rate < 1.0 and rng is not None and near_ids.size:
                near_ids = near_ids[rng.random(near_ids.size) < tap_rate]
            if near_ids.size:
                taps = (centers[near_ids, None, :]
                        + _tap_offsets(eps)[None]).reshape(-1, 3)
                tap_sdf, _, tctx = field_query(field, taps, beta,
                                               want_ctx=want_ctx)
                tap_sdf = tap_sdf.reshape(-1, 6)
                grad_vec = np.stack(
                    [(tap_sdf[:, 2 * a] - tap_sdf[:, 2 * a + 1]) / (2 * eps)
                     for a in range(3)], axis=-1)
                grad_norm = np.linalg.norm(grad_vec, axis=-1)
                nhat = grad_vec / (grad_norm[:, None] + 1e-12)
        x = _head_inputs(field, centers, dirs[ray_idx], geo_eval, head_index)
        colors, hctx = mlp_forward(field.head_specs[head_index], field.store,
                                   f"head{head_index}", x, want_ctx=want_ctx)

    # Opacity of section j comes from samples (j, j+1); a section only
    # contributes when its start sample was actually evaluated so that a
    # color exists for it.
    raw = (phi[:, :-1] - phi[:, 1:]) / (phi[:, :-1] + 1e-12)
    start_eval = eval_mask[:, :-1]
    alpha = np.clip(raw, 0.0, ALPHA_MAX) * start_eval
    alpha_gate = (raw > 0.0) & (raw < ALPHA_MAX) & start_eval
    trans = np.concatenate(
        [np.ones((n, 1)), np.cumprod(1.0 - alpha[:, :-1], axis=1)], axis=1)
    weights = trans * alpha
    acc = weights.sum(axis=1)

    m = n_samples - 1
    colors_full = np.zeros((n, m, 3))
    nhat_full = np.zeros((n, m, 3))
    sec = samp_idx < m
    if e:
        colors_full[ray_idx[sec], samp_idx[sec]] = colors[sec]
        near_sec = near_ids[samp_idx[near_ids] < m]
        nhat_full[ray_idx[near_sec], samp_idx[near_sec]] = \
            nhat[samp_idx[near_ids] < m]
    rgb = np.einsum("nm,nmc->nc", weights, colors_full) + (1.0 - acc)[:, None] * bg
    tmid = 0.5 * (ts[:, :-1] + ts[:, 1:])
    depth = (weights * tmid).sum(axis=1)
    nsum = np.einsum("nm,nmc->nc", weights, nhat_full)
    nlen = np.linalg.norm(nsum, axis=-1, keepdims=True)
    normal = np.where(nlen > 1e-9, nsum / np.maximum(nlen, 1e-30), 0.0)

    outputs = {"rgb": rgb, "depth": depth, "normal": normal, "acc": acc,
               "nsum": nsum, "grad_norm": grad_norm}
    ctx = None
    if want_ctx:
        ctx = RenderCtx(beta, eps, head_index, bg, ray_idx, samp_idx, near_ids,
                        n, n_samples, sdf_eval, phi, alpha, alpha_gate, trans,
                        weights, tmid, colors, nhat, grad_norm,
                        cctx, tctx, hctx, s)
    return outputs, ctx


def render_ray(field: SdfField, origin, direction, beta, n_samples=64,
               mask_grid=None, **kw):
    """Single-ray convenience wrapper: (rgb, depth, normal, accumulated weight)."""
    out, _ = render_rays(field, np.asarray(origin)[None], np.asarray(direction)[None],
                         beta, n_samples=n_samples, mask_grid=mask_grid, **kw)
    return out["rgb"][0], float(out["depth"][0]), out["normal"][0], float(out["acc"][0])


def render_rays_backward(field: SdfField, ctx: RenderCtx, seeds: dict) -> dict:
    """Accumulate parameter gradients from per-output upstream seeds.

    seeds may contain: rgb (N,3), acc (N,), depth (N,), nsum (N,3),
    grad_norm (T,). Returns touched grid rows for sparse optimizer updates.
    """
    n, ns = ctx.n_rays, ctx.n_samples
    m = ns - 1
    e = ctx.ray_idx.size
    t = ctx.near_ids.size
    g_w = np.zeros((n, m))
    g_colors = np.zeros((e, 3))
    g_nhat = np.zeros((t, 3))
    sec = ctx.samp_idx < m
    w_flat = np.zeros(e)
    w_flat[sec] = ctx.weights[ctx.ray_idx[sec], ctx.samp_idx[sec]]

    g_rgb = seeds.get("rgb")
    if g_rgb is not None and e:
        colors_full = np.zeros((n, m, 3))
        colors_full[ctx.ray_idx[sec], ctx.samp_idx[sec]] = ctx.colors[sec]
        g_w += np.einsum("nc,nmc->nm", g_rgb, colors_full - ctx.background)
        g_colors[sec] += w_flat[sec, None] * g_rgb[ctx.ray_idx[sec]]
    if seeds.get("acc") is not None:
        g_w += seeds["acc"][:, None]
    if seeds.get("depth") is not None:
        g_w += seeds["depth"][:, None] * ctx.tmid
    g_nsum = seeds.get("nsum")
    near_sec = ctx.samp_idx[ctx.near_ids] < m if t else np.zeros(0, dtype=bool)
    if g_nsum is not None and t:
        nhat_full = np.zeros((n, m, 3))
        rows = ctx.ray_idx[ctx.near_ids[near_sec]]
        cols = ctx.samp_idx[ctx.near_ids[near_sec]]
        nhat_full[rows, cols] = ctx.nhat[near_sec]
        g_w += np.einsum("nc,nmc->nm", g_nsum, nhat_full)
        g_nhat[near_sec] += w_flat[ctx.near_ids[near_sec], None] * g_nsum[rows]

    # weights -> alphas through the transmittance product
    gww = g_w * ctx.weights
    suffix = np.flip(np.cumsum(np.flip(gww, axis=1), axis=1), axis=1) - gww
    g_alpha = ctx.trans * g_w - suffix / (1.0 - ctx.alpha)
    g_alpha = np.where(ctx.alpha_gate, g_alpha, 0.0)

    # alphas -> logistic CDF values of the two section samples
    phi_cur = ctx.phi[:, :-1] + 1e-12
    g_phi = np.zeros((n, ns))
    g_phi[:, :-1] += g_alpha * ctx.phi[:, 1:] / (phi_cur * phi_cur)
    g_phi[:, 1:] += -g_alpha / phi_cur

    if e == 0:
        return {}

    phi_eval = ctx.phi[ctx.ray_idx, ctx.samp_idx]
    g_u = g_phi[ctx.ray_idx, ctx.samp_idx] * phi_eval * (1.0 - phi_eval)
    g_sdf_center = g_u * ctx.sharpness
    g_s = float(np.sum(g_u * ctx.sdf_eval))
    # s = exp(10 * s_raw)
    field.store.accumulate("s_raw", np.array([g_s * 10.0 * ctx.sharpness]))

    spec = field.head_specs[ctx.head_index]
    g_x = mlp_backward(spec, field.store, f"head{ctx.head_index}",
                       ctx.head_ctx, g_colors)
    g_geo_center = g_x[:, -GEO_FEAT_DIM:]
    pending: dict = {}
    field_query_backward(field, ctx.center_ctx, g_sdf_center, g_geo_center,
                         pending=pending)

    if t:
        # gradient-vector seeds: eikonal + rendered-normal paths
        g_gvec = np.zeros((t, 3))
        g_gn = seeds.get("grad_norm")
        if g_gn is not None:
            g_gvec += g_gn[:, None] * ctx.nhat
        if g_nsum is not None:
            grad_norm_col = (ctx.grad_norm + 1e-12)[:, None]
            g_gvec += (g_nhat - ctx.nhat * np.sum(ctx.nhat * g_nhat, axis=-1,
                                                  keepdims=True)) / grad_norm_col
        g_sdf_taps = np.zeros((t, 6))
        for axis in range(3):
            g_sdf_taps[:, 2 * axis] = g_gvec[:, axis] / (2.0 * ctx.eps)
            g_sdf_taps[:, 2 * axis + 1] = -g_gvec[:, axis] / (2.0 * ctx.eps)
        field_query_backward(field, ctx.taps_ctx, g_sdf_taps.reshape(-1),
                             pending=pending)
    return flush_grid_gradients(field.store, pending)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def loss_terms(outputs: dict, targets: dict, weights: GeometryLossWeights) -> dict:
    """Named loss terms plus their exact weighted sum.

    targets: rgb (N,3); mask (N,) with mask_valid (N,); depth (N,) where > 0
    means a valid prior; normal (N,3) unit priors for depth-valid rays.
    """
    rgb, acc = outputs["rgb"], outputs["acc"]
    terms = {}
    terms["rgb"] = float(np.mean((rgb - targets["rgb"]) ** 2))
    gn = outputs["grad_norm"]
    terms["eikonal"] = float(np.mean((gn - 1.0) ** 2)) if gn.size else 0.0

    mask_valid = targets.get("mask_valid")
    if mask_valid is not None and mask_valid.any():
        mk = targets["mask"][mask_valid]
        ak = acc[mask_valid]
        bce = -(mk * np.log(ak + BCE_EPS) + (1 - mk) * np.log(1 - ak + BCE_EPS))
        terms["mask"] = float(np.mean(bce))
    else:
        terms["mask"] = 0.0

    depth_valid = targets.get("depth_valid")
    if depth_valid is not None and depth_valid.any():
        dv = depth_valid
        terms["depth"] = float(np.mean(np.abs(outputs["depth"][dv] - targets["depth"][dv])))
        prior_n = targets["normal"][dv]
        nsum = outputs["nsum"][dv]
        nlen = np.linalg.norm(nsum, axis=-1)
        cos = np.where(nlen > 1e-9,
                       np.sum(nsum * prior_n, axis=-1) / np.maximum(nlen, 1e-30),
                       0.0)
        terms["normal"] = float(np.mean(1.0 - cos))
    else:
        terms["depth"] = 0.0
        terms["normal"] = 0.0

    terms["total"] = (weights.rgb * terms["rgb"]
                      + weights.eikonal * terms["eikonal"]
                      + weights.mask * terms["mask"]
                      + weights.depth * terms["depth"]
                      + weights.normal * terms["normal"])
    return terms


def loss_seeds(outputs: dict, targets: dict, weights: GeometryLossWeights) -> dict:
    """Upstream gradients of the weighted total for render_rays_backward."""
    rgb, acc = outputs["rgb"], outputs["acc"]
    n = rgb.shape[0]
    seeds = {}
    seeds["rgb"] = weights.rgb * 2.0 * (rgb - targets["rgb"]) / rgb.size

    gn = outputs["grad_norm"]
    if gn.size:
        seeds["grad_norm"] = weights.eikonal * 2.0 * (gn - 1.0) / gn.size

    mask_valid = targets.get("mask_valid")
    if mask_valid is not None and mask_valid.any():
        g_acc = np.zeros(n)
        mk = targets["mask"][mask_valid]
        ak = acc[mask_valid]
        g_acc[mask_valid] = (-mk / (ak + BCE_EPS)
                             + (1 - mk) / (1 - ak + BCE_EPS)) / mask_valid.sum()
        seeds["acc"] = weights.mask * g_acc

    depth_valid = targets.get("depth_valid")
    if depth_valid is not None and depth_valid.any():
        nv = depth_valid.sum()
        g_depth = np.zeros(n)
        g_depth[depth_valid] = np.sign(outputs["depth"][depth_valid]
                                       - targets["depth"][depth_valid]) / nv
        seeds["depth"] = weights.depth * g_depth

        nsum = outputs["nsum"][depth_valid]
        prior_n = targets["normal"][depth_valid]
        nlen = np.linalg.norm(nsum, axis=-1, keepdims=True)
        safe = np.maximum(nlen, 1e-30)
        r_hat = nsum / safe
        g_nsum = np.zeros((n, 3))
        grad = -(prior_n - r_hat * np.sum(r_hat * prior_n, axis=-1, keepdims=True)) / safe
        grad = np.where(nlen > 1e-9, grad, 0.0)
        g_nsum[depth_valid] = grad / nv
        seeds["nsum"] = weights.normal * g_nsum
    return seeds


def geometry_losses(field: SdfField, batch: dict, weights: GeometryLossWeights,
                    beta, **render_kw):
    """Render a ray batch and return (loss terms, render outputs, render ctx)."""
    outputs, ctx = render_rays(field, batch["origins"], batch["dirs"], beta,
                               want_ctx=True, **render_kw)
    terms = loss_terms(outputs, batch, weights)
    return terms, outputs, ctx


# ---------------------------------------------------------------------------
# Depth-prior normals
# ---------------------------------------------------------------------------

def normals_from_depth(camera, depth: np.ndarray):
    """World-space normals from screen-space gradients of back-projected
    depth, oriented toward the camera. Returns (normals HxWx3, valid HxW)."""
    origins, dirs = camera.ray_grid()
    pts = origins + depth[..., None] * dirs
    valid = depth > 0
    gx = np.zeros_like(pts)
    gy = np.zeros_like(pts)
    gx[:, 1:-1] = pts[:, 2:] - pts[:, :-2]
    gy[1:-1, :] = pts[2:, :] - pts[:-2, :]
    vx = np.zeros_like(valid)
    vy = np.zeros_like(valid)
    vx[:, 1:-1] = valid[:, 2:] & valid[:, :-2]
    vy[1:-1, :] = valid[2:, :] & valid[:-2, :]
    n = np.cross(gx, gy)
    lens = np.linalg.norm(n, axis=-1, keepdims=True)
    ok = valid & vx & vy & (lens[..., 0] > 1e-12)
    n = np.where(ok[..., None], n / np.maximum(lens, 1e-30), 0.0)
    flip = np.sum(n * dirs, axis=-1) > 0
    n = np.where(flip[..., None], -n, n)
    return n, ok


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class GeometryTrainConfig:
    steps: int = 2000
    batch_rays: int = 256
    n_samples: int = 24
    lr_grid: float = 1e-2
    lr_mlp: float = 1e-3
    lr_sharpness: float = 8e-3
    mask_update_every: int = 256
    mask_warmup: int = 128    # first mask refresh
    mask_resolution: int = 64
    tap_band: float = 2.0     # gradient taps within this many sample spacings
    tap_rate: float = 0.5     # stochastic tap subsampling during training
    lr_floor: float = 0.06    # cosine-decay floor as a fraction of the base lr
    seed: int = 0
    use_depth_priors: bool = True
    freeze_beta: float | None = None
    log_every: int = 25


def build_ray_bank(dataset: Dataset, use_depth_priors=True):
    """Flatten all frames into ray arrays, keeping rays that hit the bounds."""
    origins, dirs, rgbs = [], [], []
    masks, mask_valid = [], []
    depths, normals = [], []
    for fr in dataset.frames:
        o, d = fr.camera.ray_grid()
        o = o.reshape(-1, 3)
        d = d.reshape(-1, 3)
        origins.append(o)
        dirs.append(d)
        rgbs.append(fr.image.reshape(-1, 3))
        if fr.mask is not None:
            masks.append(fr.mask.reshape(-1))
            mask_valid.append(np.ones(len(o), dtype=bool))
        else:
            masks.append(np.zeros(len(o)))
            mask_valid.append(np.zeros(len(o), dtype=bool))
        if use_depth_priors and fr.depth_prior is not None:
            pn, ok = normals_from_depth(fr.camera, fr.depth_prior)
            dep = np.where(ok, fr.depth_prior, 0.0)
            depths.append(dep.reshape(-1))
            normals.append(pn.reshape(-1, 3))
        else:
            depths.append(np.zeros(len(o)))
            normals.append(np.zeros((len(o), 3)))
    bank = {
        "origins": np.concatenate(origins),
        "dirs": np.concatenate(dirs),
        "rgb": np.concatenate(rgbs),
        "mask": np.concatenate(masks),
        "mask_valid": np.concatenate(mask_valid),
        "depth": np.concatenate(depths),
        "normal": np.concatenate(normals),
    }
    _, _, hits = ray_box_intersect(bank["origins"], bank["dirs"], dataset.scene_bounds)
    for key in bank:
        bank[key] = bank[key][hits]
    return bank


def _batch_from_bank(bank, idx):
    return {
        "origins": bank["origins"][idx],
        "dirs": bank["dirs"][idx],
        "rgb": bank["rgb"][idx],
        "mask": bank["mask"][idx],
        "mask_valid": bank["mask_valid"][idx],
        "depth": bank["depth"][idx],
        "depth_valid": bank["depth"][idx] > 0,
        "normal": bank["normal"][idx],
    }


def train_geometry(dataset: Dataset, schedule: ProgressiveGridSchedule | None = None,
                   weights: GeometryLossWeights | None = None,
                   config: GeometryTrainConfig | None = None,
                   field: SdfField | None = None, start_step: int = 0,
                   progress=None):
    """Optimize an SdfField on a multi-view dataset.

    Returns (field, history) where history is a list of per-log-step dicts.
    Raises DivergenceError on a non-finite loss.
    """
    dataset.require_trainable()
    schedule = schedule or desk_schedule()
    weights = weights or GeometryLossWeights()
    config = config or GeometryTrainConfig()
    rng = np.random.default_rng(config.seed)
    if field is None:
        field = create_field(schedule, dataset.scene_bounds, rng)
    bank = build_ray_bank(dataset, use_depth_priors=config.use_depth_priors)
    n_rays = len(bank["origins"])

    lr_map = {"grid": config.lr_grid, "decoder": config.lr_mlp,
              "head1": config.lr_mlp, "head2": config.lr_mlp,
              "s_raw": config.lr_sharpness}
    adam = Adam(field.store, lr_map)
    mask_grid = MaskGrid.dense(dataset.scene_bounds, config.mask_resolution)
    decoder_names = mlp_param_names(field.decoder_spec, "decoder")

    history = []
    for step in range(start_step, config.steps):
        beta = (config.freeze_beta if config.freeze_beta is not None
                else schedule.beta_at(step, config.steps))
        due = (step == config.mask_warmup
               or (step > 0 and step % config.mask_update_every == 0))
        if due:
            mask_grid = update_mask_grid(
                lambda p: sdf_only(field, p, beta), mask_grid)
        head_index = 1 if step < config.steps // 2 else 2

        idx = rng.integers(0, n_rays, size=config.batch_rays)
        batch = _batch_from_bank(bank, idx)
        terms, outputs, ctx = geometry_losses(
            field, batch, weights, beta, n_samples=config.n_samples,
            mask_grid=mask_grid, head_index=head_index, rng=rng,
            tap_band=config.tap_band, tap_rate=config.tap_rate,
            background=np.asarray(dataset.background))
        if not np.isfinite(terms["total"]):
            bad = {k: v for k, v in terms.items() if not np.isfinite(v)}
            raise DivergenceError(f"non-finite loss at step {step}: {bad}")

        field.store.zero_grads()
        seeds = loss_seeds(outputs, batch, weights)
        touched = render_rays_backward(field, ctx, seeds)
        names = list(touched) + decoder_names + \
            mlp_param_names(field.head_specs[head_index], f"head{head_index}") + \
            ["s_raw"]
        cos = 0.5 * (1.0 + np.cos(np.pi * step / max(config.steps - 1, 1)))
        adam.lr_scale = config.lr_floor + (1.0 - config.lr_floor) * cos
        adam.step(touched=touched, names=names)

        if step % config.log_every == 0 or step == config.steps - 1:
            entry = {"step": step, "beta": beta, "s": field.sharpness(), **terms}
            history.append(entry)
            if progress is not None:
                progress(entry)
    return field, history


# ---------------------------------------------------------------------------
# Mesh extraction
# ---------------------------------------------------------------------------

def extract_mesh(field_or_sdf, resolution=128, beta=None, bounds=None) -> TriangleMesh:
    """Marching cubes on the zero level set over the scene bounds.

    Accepts an SdfField or any callable mapping (N,3) points to sdf values
    (with `bounds` supplied). Vertex normals are normalized central-difference
    gradients; zero-area faces are removed; non-manifold edges only warn.
    """
    if resolution < 16:
        raise ValidationError("extraction resolution must be >= 16")
    if isinstance(field_or_sdf, SdfField):
        fld = field_or_sdf
        beta = fld.schedule.levels if beta is None else beta
        bounds = fld.bounds
        sdf_fn = lambda p: sdf_only(fld, p, beta)
        grad_eps = fld.fd_eps(beta)
    else:
        if bounds is None:
            raise ValidationError("bounds required for a bare sdf callable")
        sdf_fn = field_or_sdf
        grad_eps = None

    lo, hi = (np.asarray(v, dtype=np.float64) for v in bounds)
    axes = [np.linspace(lo[k], hi[k], resolution) for k in range(3)]
    spacing = [(hi[k] - lo[k]) / (resolution - 1) for k in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    volume = np.empty(len(pts))
    chunk = 262144
    for s in range(0, len(pts), chunk):
        volume[s:s + chunk] = sdf_fn(pts[s:s + chunk])
    volume = volume.reshape(resolution, resolution, resolution)
    if volume.min() > 0 or volume.max() < 0:
        raise EmptyMeshError("no zero crossing inside the scene bounds")

    verts, faces, _, _ = _sk_measure.marching_cubes(volume, level=0.0,
                                                    spacing=tuple(spacing))
    verts = verts + lo
    if grad_eps is None:
        grad_eps = 0.5 * min(spacing)

    # Orient faces so geometric normals follow the outward sdf gradient.
    centroids = verts[faces].mean(axis=1)
    grad_c = _numeric_grad(sdf_fn, centroids, grad_eps)
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    geo_n = np.cross(b - a, c - a)
    flip = np.sum(geo_n * grad_c, axis=-1) < 0
    faces[flip] = faces[flip][:, ::-1]

    grad_v = _numeric_grad(sdf_fn, verts, grad_eps)
    lens = np.linalg.norm(grad_v, axis=-1, keepdims=True)
    fallback = np.array([0.0, 0.0, 1.0])
    normals = np.where(lens > 1e-12, grad_v / np.maximum(lens, 1e-30), fallback)
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)

    verts, faces, normals = drop_degenerate_faces(verts, faces, normals)
    if len(faces) == 0:
        raise EmptyMeshError("all extracted faces were degenerate")
    mesh = TriangleMesh(verts, faces, normals)
    check_manifold(mesh, label="extracted mesh")
    return mesh


def _numeric_grad(sdf_fn, pts, eps):
    taps = (pts[:, None, :] + _tap_offsets(eps)[None]).reshape(-1, 3)
    vals = np.empty(len(taps))
    chunk = 262144
    for s in range(0, len(taps), chunk):
        vals[s:s + chunk] = sdf_fn(taps[s:s + chunk])
    vals = vals.reshape(-1, 6)
    return np.stack([(vals[:, 2 * a] - vals[:, 2 * a + 1]) / (2 * eps)
                     for a in range(3)], axis=-1)


# ---------------------------------------------------------------------------
# Checkpoints and test-support fitting
# ---------------------------------------------------------------------------

def save_geometry(field: SdfField, path, step=None, extra=None):
    lo, hi = field.bounds
    meta = {
        "kind": "geometry",
        "schedule": field.schedule.to_json(),
        "bounds": {"lo": lo.tolist(), "hi": hi.tolist()},
        "prior_radius": field.prior_radius,
        "step": step,
    }
    if extra:
        meta.update(extra)
    field.store.save_npz(path, meta)


def load_geometry(path):
    store, meta = ParamStore.load_npz(path)
    if meta.get("kind") != "geometry":
        raise ValidationError(f"{path} is not a geometry checkpoint")
    schedule = ProgressiveGridSchedule.from_json(meta["schedule"])
    bounds = (np.asarray(meta["bounds"]["lo"]), np.asarray(meta["bounds"]["hi"]))
    decoder_spec = MlpSpec((schedule.feature_width, 64, 1 + GEO_FEAT_DIM),
                           ("relu", "none"))
    field = SdfField(schedule, bounds, store, decoder_spec,
                     {1: head_spec_for(1), 2: head_spec_for(2)},
                     meta["prior_radius"])
    return field, meta


def fit_field_to_sdf(field: SdfField, sdf_fn, steps=400, batch=8192,
                     rng=None, beta=None, lr_grid=1e-2, lr_mlp=1e-3):
    """Regress the field onto an analytic sdf (dense random samples)."""
    rng = rng or np.random.default_rng(0)
    beta = field.schedule.levels if beta is None else beta
    lo, hi = field.bounds
    adam = Adam(field.store, {"grid": lr_grid, "decoder": lr_mlp,
                              "head1": lr_mlp, "head2": lr_mlp, "s_raw": lr_mlp})
    decoder_names = mlp_param_names(field.decoder_spec, "decoder")
    for _ in range(steps):
        pts = rng.uniform(lo, hi, size=(batch, 3))
        target = sdf_fn(pts)
        pred, _, ctx = field_query(field, pts, beta)
        g = 2.0 * (pred - target) / batch
        field.store.zero_grads()
        touched = field_query_backward(field, ctx, g)
        adam.step(touched=touched, names=list(touched) + decoder_names)
    return field
