"""UV atlasing and software rasterization.

The rasterizer produces a differentiable G-buffer: per covered pixel the face
id, perspective-correct barycentrics, uv, interpolated world normal, depth
(distance from the camera center), view direction, and the view cosine
between the negated view direction and the surface normal. The backward pass
propagates pixel-space uv gradients to vertex positions through the
perspective-correct interpolation chain (silhouette coverage changes are not
modeled; stage-2 geometry is frozen, so those gradients are diagnostic).

Depth ties resolve to the lower face id, which together with sort-based
z-resolution makes the G-buffer bit-deterministic.
"""

from dataclasses import dataclass

import numpy as np

from .dataset import Camera
from .errors import CapacityError, ValidationError
from .meshes import TriangleMesh

ATLAS_PAD = 1       # texels between a chart and its cell border
ATLAS_DIAG_GAP = 2  # texel inset of each triangle from the cell diagonal


@dataclass
class UvAtlas:
    """Per-face uv triples in [0,1]^2 over a square atlas; chart k belongs to
    face k. Charts of distinct faces keep >= 2 texels of separation."""

    face_uvs: np.ndarray    # (F, 3, 2)
    resolution: int

    def __post_init__(self):
        self.face_uvs = np.asarray(self.face_uvs, dtype=np.float64)
        if self.face_uvs.ndim != 3 or self.face_uvs.shape[1:] != (3, 2):
            raise ValidationError("face_uvs must have shape (F, 3, 2)")
        if self.face_uvs.size and (self.face_uvs.min() < 0 or self.face_uvs.max() > 1):
            raise ValidationError("uv coordinates must lie in [0,1]^2")

    @property
    def n_faces(self):
        return len(self.face_uvs)

    def utilization(self) -> float:
        """Fraction of the atlas area covered by charts."""
        a = self.face_uvs[:, 0]
        b = self.face_uvs[:, 1]
        c = self.face_uvs[:, 2]
        cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) \
            - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        return float(np.abs(cross).sum() * 0.5)


MIN_CELL_PX = 2 * ATLAS_PAD + ATLAS_DIAG_GAP + 3  # smallest usable cell


def atlas_capacity(resolution: int) -> int:
    """Largest face count the pairwise packing fits at this resolution."""
    return 2 * (resolution // MIN_CELL_PX) ** 2


def unwrap_uv(mesh: TriangleMesh, resolution: int = 256) -> UvAtlas:
    """Pack faces pairwise into square cells as gutter-separated right
    triangles. No seam optimization; every face gets an isolated chart.
    """
    f = mesh.n_faces
    if f == 0:
        raise ValidationError("cannot unwrap an empty mesh")
    n_cells = (f + 1) // 2
    cells_per_side = int(np.ceil(np.sqrt(n_cells)))
    cell_px = resolution // cells_per_side
    inner = cell_px - 2 * ATLAS_PAD
    leg = inner - 1 - ATLAS_DIAG_GAP
    if leg < 2:
        raise CapacityError(
            f"{f} faces do not fit a {resolution}x{resolution} atlas "
            f"(cell {cell_px}px, triangle leg {leg}px)")

    face_uvs = np.empty((f, 3, 2))
    idx = np.arange(f)
    cell = idx // 2
    second = idx % 2 == 1
    cx = (cell % cells_per_side) * cell_px + ATLAS_PAD
    cy = (cell // cells_per_side) * cell_px + ATLAS_PAD
    hi = inner - 1
    # First triangle hugs the lower-left corner, second the upper-right,
    # both inset from the shared diagonal.
    tex = np.empty((f, 3, 2))
    tex[~second, 0] = np.stack([cx[~second], cy[~second]], axis=-1)
    tex[~second, 1] = np.stack([cx[~second] + leg, cy[~second]], axis=-1)
    tex[~second, 2] = np.stack([cx[~second], cy[~second] + leg], axis=-1)
    tex[second, 0] = np.stack([cx[second] + hi, cy[second] + hi], axis=-1)
    tex[second, 1] = np.stack([cx[second] + hi - leg, cy[second] + hi], axis=-1)
    tex[second, 2] = np.stack([cx[second] + hi, cy[second] + hi - leg], axis=-1)
    face_uvs = (tex + 0.5) / resolution
    return UvAtlas(face_uvs, resolution)


@dataclass
class GBuffer:
    face_id: np.ndarray     # (H, W) int32, -1 where empty
    bary: np.ndarray        # (H, W, 3) perspective-correct barycentrics
    uv: np.ndarray          # (H, W, 2)
    normal: np.ndarray      # (H, W, 3) unit interpolated normals
    depth: np.ndarray       # (H, W) distance from the camera center
    view_dir: np.ndarray    # (H, W, 3) unit camera-to-fragment direction
    vcos: np.ndarray        # (H, W)

    @property
    def covered(self) -> np.ndarray:
        return self.face_id >= 0


def _project_vertices(mesh: TriangleMesh, camera: Camera):
    screen, w = camera.project(mesh.vertices)
    return screen, w


def rasterize(mesh: TriangleMesh, atlas: UvAtlas, camera: Camera,
              resolution=None) -> GBuffer:
    """Perspective-correct rasterization with back-face culling and a nearest
    depth test (ties keep the lower face id)."""
    if atlas is not None and atlas.n_faces != mesh.n_faces:
        raise ValidationError("atlas and mesh face counts differ")
    if resolution is None:
        width, height = camera.width, camera.height
    else:
        width = height = int(resolution)
        camera = Camera(camera.focal * width / camera.width, width, height,
                        camera.c2w)

    face_id = np.full((height, width), -1, dtype=np.int32)
    bary = np.zeros((height, width, 3))
    uv = np.zeros((height, width, 2))
    normal = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    view_dir = np.zeros((height, width, 3))
    vcos = np.zeros((height, width))
    out = GBuffer(face_id, bary, uv, normal, depth, view_dir, vcos)
    if mesh.n_faces == 0:
        return out

    screen, w = _project_vertices(mesh, camera)
    tri = mesh.faces
    s0, s1, s2 = screen[tri[:, 0]], screen[tri[:, 1]], screen[tri[:, 2]]
    w0, w1, w2 = w[tri[:, 0]], w[tri[:, 1]], w[tri[:, 2]]

    in_front = (w0 > 1e-9) & (w1 > 1e-9) & (w2 > 1e-9)
    # Back-face cull: outward geometric normal pointing away from the camera.
    fn = mesh.face_normals()
    centroid = mesh.vertices[tri].mean(axis=1)
    to_face = centroid - camera.origin
    front = np.einsum("fc,fc->f", fn, to_face) < 0
    # Screen-space area: with y down, camera-facing triangles wind negative.
    area2 = (s1[:, 0] - s0[:, 0]) * (s2[:, 1] - s0[:, 1]) \
        - (s1[:, 1] - s0[:, 1]) * (s2[:, 0] - s0[:, 0])
    keep = in_front & front & (np.abs(area2) > 1e-12)
    face_indices = np.nonzero(keep)[0]
    if face_indices.size == 0:
        return out

    cf, cp, cl = _coverage_candidates(s0, s1, s2, face_indices, width, height)
    if cf.size == 0:
        return out
    cw = np.stack([w0[cf], w1[cf], w2[cf]], axis=-1)
    inv_w = cl / cw
    denom = inv_w.sum(axis=-1)
    b = inv_w / denom[:, None]
    frag_pos = np.einsum("nk,nkc->nc", b, mesh.vertices[tri[cf]])
    frag_depth = np.linalg.norm(frag_pos - camera.origin, axis=-1)

    # Nearest-depth resolve per pixel; ties keep the lower face id.
    order = np.lexsort((cf, frag_depth, cp))
    first = np.ones(order.size, dtype=bool)
    first[1:] = cp[order][1:] != cp[order][:-1]
    sel = order[first]

    n_interp = np.einsum("nk,nkc->nc", b[sel], mesh.normals[tri[cf[sel]]])
    n_len = np.linalg.norm(n_interp, axis=-1, keepdims=True)
    n_interp = n_interp / np.maximum(n_len, 1e-30)
    vd = frag_pos[sel] - camera.origin
    vd /= np.linalg.norm(vd, axis=-1, keepdims=True)
    frag_vcos = np.einsum("nc,nc->n", -vd, n_interp)
    # Grazing slivers whose interpolated normal turns away are culled like
    # back-faces, keeping v_cos strictly positive on covered pixels.
    facing = frag_vcos > 0.0
    sel = sel[facing]
    n_interp, vd, frag_vcos = n_interp[facing], vd[facing], frag_vcos[facing]

    pix = cp[sel]
    ys, xs = pix // width, pix % width
    fsel = cf[sel]
    face_id[ys, xs] = fsel.astype(np.int32)
    bary[ys, xs] = b[sel]
    if atlas is not None:
        uv[ys, xs] = np.einsum("nk,nkc->nc", b[sel], atlas.face_uvs[fsel])
    normal[ys, xs] = n_interp
    depth[ys, xs] = frag_depth[sel]
    view_dir[ys, xs] = vd
    vcos[ys, xs] = frag_vcos
    return out


_CANDIDATE_BUDGET = 1 << 21


def _coverage_candidates(s0, s1, s2, face_indices, width, height):
    """Covered (face, flat pixel, affine barycentrics) tuples.

    Faces are processed in bbox-area-sorted chunks padded to a shared bbox
    size, so the work stays vectorized without blowing up memory when a few
    faces cover large screen regions.
    """
    fs0, fs1, fs2 = s0[face_indices], s1[face_indices], s2[face_indices]
    xs_all = np.stack([fs0[:, 0], fs1[:, 0], fs2[:, 0]])
    ys_all = np.stack([fs0[:, 1], fs1[:, 1], fs2[:, 1]])
    x0 = np.clip(np.floor(xs_all.min(axis=0) - 0.5), 0, width).astype(np.int64)
    x1 = np.clip(np.ceil(xs_all.max(axis=0) + 0.5), 0, width).astype(np.int64)
    y0 = np.clip(np.floor(ys_all.min(axis=0) - 0.5), 0, height).astype(np.int64)
    y1 = np.clip(np.ceil(ys_all.max(axis=0) + 0.5), 0, height).astype(np.int64)
    bw = x1 - x0
    bh = y1 - y0
    nonempty = (bw > 0) & (bh > 0)

    order = np.argsort(bw * bh, kind="stable")
    order = order[nonempty[order]]
    cand_face, cand_pix, cand_lam = [], [], []
    start = 0
    while start < order.size:
        pad_w = int(bw[order[start]])
        pad_h = int(bh[order[start]])
        stop = start + 1
        while stop < order.size:
            nw = max(pad_w, int(bw[order[stop]]))
            nh = max(pad_h, int(bh[order[stop]]))
            if (stop - start + 1) * nw * nh > _CANDIDATE_BUDGET:
                break
            pad_w, pad_h = nw, nh
            stop += 1
        sel = order[start:stop]
        start = stop

        px = x0[sel, None, None] + np.arange(pad_w)[None, None, :]
        py = y0[sel, None, None] + np.arange(pad_h)[None, :, None]
        in_box = (px < x1[sel, None, None]) & (py < y1[sel, None, None]) \
            & (px < width) & (py < height)
        cx = px + 0.5
        cy = py + 0.5
        lam = _screen_barycentrics_batch(fs0[sel], fs1[sel], fs2[sel], cx, cy)
        inside = in_box & np.all(lam >= 0.0, axis=-1) & np.all(lam <= 1.0, axis=-1)
        if not inside.any():
            continue
        fsel, iy, ix = np.nonzero(inside)
        cand_face.append(face_indices[sel][fsel])
        cand_pix.append(py[fsel, iy, np.zeros_like(ix)] * width
                        + px[fsel, np.zeros_like(iy), ix])
        cand_lam.append(lam[fsel, iy, ix])

    if not cand_face:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), np.zeros((0, 3))
    return (np.concatenate(cand_face), np.concatenate(cand_pix),
            np.concatenate(cand_lam))


def _screen_barycentrics_batch(s0, s1, s2, px, py):
    """Affine barycentrics of pixel centers (..., H, W) vs (F, 2) triangles."""
    e1 = s1 - s0
    e2 = s2 - s0
    det = (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])[:, None, None]
    qx = px - s0[:, 0, None, None]
    qy = py - s0[:, 1, None, None]
    l1 = (qx * e2[:, 1, None, None] - qy * e2[:, 0, None, None]) / det
    l2 = (e1[:, 0, None, None] * qy - e1[:, 1, None, None] * qx) / det
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


def _screen_barycentrics(s0, s1, s2, px, py):
    """Affine barycentrics of pixel centers w.r.t. a screen triangle."""
    e1 = s1 - s0
    e2 = s2 - s0
    det = e1[0] * e2[1] - e1[1] * e2[0]
    qx = px - s0[0]
    qy = py - s0[1]
    l1 = (qx * e2[1] - qy * e2[0]) / det
    l2 = (e1[0] * qy - e1[1] * qx) / det
    return np.stack([1.0 - l1 - l2, l1, l2], axis=-1)


def raster_backward(gbuffer: GBuffer, mesh: TriangleMesh, camera: Camera,
                    dl_duv: np.ndarray, atlas: UvAtlas) -> np.ndarray:
    """Per-vertex position gradients from per-pixel uv gradients.

    Follows the interior interpolation chain only: pixel-space uv ->
    perspective-correct barycentrics -> screen positions and view depths ->
    camera-space -> world vertex positions. Pixels with no face contribute
    nothing. Returns (V, 3).
    """
    if dl_duv.shape != gbuffer.uv.shape:
        raise ValidationError("dl_duv must match the G-buffer uv shape")
    if not np.all(np.isfinite(dl_duv)):
        raise ValidationError("dl_duv must be finite")
    grad_v = np.zeros_like(mesh.vertices)
    ys, xs = np.nonzero(gbuffer.covered)
    if ys.size == 0:
        return grad_v
    g_uv = dl_duv[ys, xs]                      # (P, 2)
    fids = gbuffer.face_id[ys, xs].astype(np.int64)
    tri = mesh.faces[fids]                     # (P, 3)
    uv_k = atlas.face_uvs[fids]                # (P, 3, 2)

    screen, w = camera.project(mesh.vertices)
    s_k = screen[tri]                          # (P, 3, 2)
    w_k = w[tri]                               # (P, 3)
    b = gbuffer.bary[ys, xs]                   # (P, 3) perspective-correct
    # Affine (screen) barycentrics recovered from the perspective ones.
    lam = b * w_k
    lam /= lam.sum(axis=-1, keepdims=True)
    s_total = (lam / w_k).sum(axis=-1)         # = 1 / interpolated w

    # uv = sum_m b_m uv_m
    g_b = np.einsum("pc,pmc->pm", g_uv, uv_k)  # (P, 3)

    # b_m = (lam_m / w_m) / S with S = sum_j lam_j / w_j
    #   d b_m / d lam_n = (delta_mn - b_m) / (w_n S)
    #   d b_m / d w_n   = b_m (b_n - delta_mn) / w_n
    gb_dot_b = np.einsum("pm,pm->p", g_b, b)
    g_lam = (g_b - gb_dot_b[:, None]) / (w_k * s_total[:, None])
    g_w = b * (gb_dot_b[:, None] - g_b) / w_k

    # Affine barycentrics vs screen vertex positions, by implicit
    # differentiation of  sum_m lam_m s_m = p,  sum_m lam_m = 1  with
    # (lam0, lam1) free and lam2 eliminated:
    #   A d(lam01) = -lam_k d(s_k),  A = [s0 - s2, s1 - s2]
    a_mat = np.stack([s_k[:, 0] - s_k[:, 2], s_k[:, 1] - s_k[:, 2]], axis=-1)
    det = a_mat[:, 0, 0] * a_mat[:, 1, 1] - a_mat[:, 0, 1] * a_mat[:, 1, 0]
    inv_a = np.empty_like(a_mat)
    inv_a[:, 0, 0] = a_mat[:, 1, 1]
    inv_a[:, 0, 1] = -a_mat[:, 0, 1]
    inv_a[:, 1, 0] = -a_mat[:, 1, 0]
    inv_a[:, 1, 1] = a_mat[:, 0, 0]
    inv_a /= det[:, None, None]
    g_lam01 = np.stack([g_lam[:, 0] - g_lam[:, 2],
                        g_lam[:, 1] - g_lam[:, 2]], axis=-1)  # (P, 2)
    # g_s_k = -lam_k * A^{-T} g_lam01
    at_g = np.einsum("pji,pj->pi", inv_a, g_lam01)            # (P, 2)
    g_s = -lam[:, :, None] * at_g[:, None, :]                 # (P, 3, 2)

    # Screen position and view depth vs camera-space position:
    #   sx = cx + f x / w, sy = cy - f y / w, w = -z
    r = camera.c2w[:3, :3]
    cam = (mesh.vertices @ camera.w2c[:3, :3].T + camera.w2c[:3, 3])[tri]
    x_c, y_c = cam[..., 0], cam[..., 1]
    f = camera.focal
    g_cam = np.zeros_like(cam)
    g_cam[..., 0] = g_s[..., 0] * f / w_k
    g_cam[..., 1] = -g_s[..., 1] * f / w_k
    g_cam[..., 2] = (g_s[..., 0] * f * x_c / w_k ** 2
                     - g_s[..., 1] * f * y_c / w_k ** 2) - g_w
    # cam = R^T (world - t)  =>  d(cam)/d(world) = R^T, so g_world = R g_cam.
    g_world = np.einsum("pmc,dc->pmd", g_cam, r)

    np.add.at(grad_v, tri.reshape(-1), g_world.reshape(-1, 3))
    return grad_v
