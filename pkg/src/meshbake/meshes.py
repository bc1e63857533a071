"""Triangle meshes: the shared geometry container, OBJ/MTL interchange, and
analytic reference meshes for oracle scenes."""

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

NORMAL_TOL = 1e-4


@dataclass
class TriangleMesh:
    vertices: np.ndarray          # (V, 3) world units
    faces: np.ndarray             # (F, 3) vertex indices
    normals: np.ndarray           # (V, 3) unit per-vertex normals

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if self.normals.shape != self.vertices.shape:
            raise ValidationError("need one unit normal per vertex")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValidationError("face indices out of range")
        if len(self.normals):
            norms = np.linalg.norm(self.normals, axis=1)
            if np.abs(norms - 1.0).max() > NORMAL_TOL:
                raise ValidationError("vertex normals must be unit length")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def face_normals(self) -> np.ndarray:
        v = self.vertices
        a, b, c = v[self.faces[:, 0]], v[self.faces[:, 1]], v[self.faces[:, 2]]
        n = np.cross(b - a, c - a)
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(lens, 1e-30)


def drop_degenerate_faces(vertices, faces, normals, area_eps=1e-14):
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    faces = faces[areas > area_eps]
    used = np.zeros(len(vertices), dtype=bool)
    used[faces.reshape(-1)] = True
    remap = np.cumsum(used) - 1
    return vertices[used], remap[faces], normals[used]


def vertex_normals_from_faces(vertices, faces):
    """Area-weighted face-normal average per vertex, unit length."""
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    fn = np.cross(b - a, c - a)  # length ~ 2x area
    normals = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(normals, faces[:, k], fn)
    lens = np.linalg.norm(normals, axis=1, keepdims=True)
    out = np.where(lens > 1e-20, normals / np.maximum(lens, 1e-30),
                   [0.0, 0.0, 1.0])
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def simplify_mesh(mesh: TriangleMesh, target_faces: int) -> TriangleMesh:
    """Vertex-clustering decimation to roughly `target_faces`.

    Vertices merge to the mean of their cluster on a uniform grid whose pitch
    is solved from the face budget; collapsed and duplicate faces drop out.
    Normals are recomputed from the simplified faces.
    """
    if mesh.n_faces <= target_faces:
        return mesh
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    span = float((hi - lo).max()) or 1.0
    # face count scales ~ grid^2 for a surface mesh
    grid = max(2, int(np.sqrt(target_faces / 2.0)))
    for _ in range(10):
        cell = span / grid
        keys = np.floor((mesh.vertices - lo) / cell).astype(np.int64)
        _, cluster_id = np.unique(keys, axis=0, return_inverse=True)
        n_clusters = int(cluster_id.max()) + 1
        counts = np.bincount(cluster_id, minlength=n_clusters).astype(float)
        new_verts = np.stack(
            [np.bincount(cluster_id, weights=mesh.vertices[:, k],
                         minlength=n_clusters) / counts for k in range(3)],
            axis=1)
        faces = cluster_id[mesh.faces]
        faces = faces[(faces[:, 0] != faces[:, 1])
                      & (faces[:, 1] != faces[:, 2])
                      & (faces[:, 0] != faces[:, 2])]
        # drop duplicate faces irrespective of winding, keep first occurrence
        key = np.sort(faces, axis=1)
        _, first = np.unique(key, axis=0, return_index=True)
        faces = faces[np.sort(first)]
        if len(faces) <= target_faces or grid <= 2:
            normals = vertex_normals_from_faces(new_verts, faces)
            verts, faces, normals = drop_degenerate_faces(new_verts, faces,
                                                          normals)
            return TriangleMesh(verts, faces, normals)
        grid = max(2, int(grid * np.sqrt(target_faces / len(faces)) * 0.97))
    raise ValidationError("mesh simplification failed to reach the face budget")


def check_manifold(mesh: TriangleMesh, label="mesh"):
    """Warn (never raise) when an edge is shared by more than two faces."""
    if mesh.n_faces == 0:
        return True
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    bad = int((counts > 2).sum())
    if bad:
        warnings.warn(f"{label}: {bad} non-manifold edges", stacklevel=2)
    return bad == 0


# ---------------------------------------------------------------------------
# OBJ interchange (v/vn/vt/f with per-face-vertex uv indices)
# ---------------------------------------------------------------------------

def write_obj(path, mesh: TriangleMesh, face_uvs: np.ndarray | None = None,
              mtl_name: str | None = None, material: str = "baked"):
    """face_uvs, when given, is (F, 3, 2): one uv per face corner.

    Floats are written with shortest round-trip precision so a re-import
    reproduces the mesh exactly.
    """
    lines = []
    if mtl_name:
        lines.append(f"mtllib {mtl_name}")
        lines.append(f"usemtl {material}")
    for v in mesh.vertices:
        lines.append(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    for n in mesh.normals:
        lines.append(f"vn {float(n[0])!r} {float(n[1])!r} {float(n[2])!r}")
    if face_uvs is not None:
        if face_uvs.shape != (mesh.n_faces, 3, 2):
            raise ValidationError("face_uvs must have shape (F, 3, 2)")
        for tri in face_uvs:
            for uv in tri:
                lines.append(f"vt {float(uv[0])!r} {float(uv[1])!r}")
        for i, f in enumerate(mesh.faces):
            t = 3 * i
            lines.append(
                f"f {f[0]+1}/{t+1}/{f[0]+1} {f[1]+1}/{t+2}/{f[1]+1} {f[2]+1}/{t+3}/{f[2]+1}")
    else:
        for f in mesh.faces:
            lines.append(f"f {f[0]+1}//{f[0]+1} {f[1]+1}//{f[1]+1} {f[2]+1}//{f[2]+1}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_mtl(path, texture_file: str, material: str = "baked"):
    Path(path).write_text(
        f"newmtl {material}\nKa 1.0 1.0 1.0\nKd 1.0 1.0 1.0\n"
        f"map_Kd {texture_file}\n")


def read_obj(path):
    """Returns (TriangleMesh, face_uvs or None)."""
    positions, normals_raw, uvs_raw = [], [], []
    faces, face_uv_idx, face_n_idx = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        tag = parts[0]
        if tag == "v":
            positions.append([float(x) for x in parts[1:4]])
        elif tag == "vn":
            normals_raw.append([float(x) for x in parts[1:4]])
        elif tag == "vt":
            uvs_raw.append([float(x) for x in parts[1:3]])
        elif tag == "f":
            if len(parts) != 4:
                raise ValidationError("only triangle faces are supported")
            vi, ti, ni = [], [], []
            for token in parts[1:]:
                fields = token.split("/")
                vi.append(int(fields[0]) - 1)
                ti.append(int(fields[1]) - 1 if len(fields) > 1 and fields[1] else -1)
                ni.append(int(fields[2]) - 1 if len(fields) > 2 and fields[2] else -1)
            faces.append(vi)
            face_uv_idx.append(ti)
            face_n_idx.append(ni)
    positions = np.asarray(positions, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if normals_raw:
        vert_normals = np.zeros_like(positions)
        nr = np.asarray(normals_raw, dtype=np.float64)
        for f, ni in zip(faces, face_n_idx):
            for v, n in zip(f, ni):
                if n >= 0:
                    vert_normals[v] = nr[n]
    else:
        vert_normals = np.tile([0.0, 0.0, 1.0], (len(positions), 1))
    lens = np.linalg.norm(vert_normals, axis=1, keepdims=True)
    vert_normals = np.where(lens > 1e-12, vert_normals / np.maximum(lens, 1e-30),
                            [0.0, 0.0, 1.0])
    mesh = TriangleMesh(positions, faces, vert_normals)
    face_uvs = None
    if uvs_raw and all(t[0] >= 0 for t in face_uv_idx):
        uv = np.asarray(uvs_raw, dtype=np.float64)
        face_uvs = uv[np.asarray(face_uv_idx, dtype=np.int64)]
    return mesh, face_uvs


# ---------------------------------------------------------------------------
# Analytic meshes
# ---------------------------------------------------------------------------

def icosphere(subdivisions=4, radius=1.0) -> TriangleMesh:
    """Subdivided icosahedron; normals are exact sphere normals."""
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdivisions):
        edge_mid = {}
        verts_list = list(verts)

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in edge_mid:
                m = verts_list[a] + verts_list[b]
                m = m / np.linalg.norm(m)
                edge_mid[key] = len(verts_list)
                verts_list.append(m)
            return edge_mid[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.asarray(verts_list)
        faces = np.asarray(new_faces, dtype=np.int64)
    normals = verts.copy()
    return TriangleMesh(verts * radius, faces, normals)


def bowl_mesh(r_outer=1.0, thickness_frac=0.25, n_theta=48, n_phi=96) -> TriangleMesh:
    """Hemispherical shell (z <= 0, opening up): outer and inner hemisphere
    plus the rim annulus, with exact analytic normals."""
    r_inner = r_outer * (1.0 - thickness_frac)
    verts, norms, faces = [], [], []

    def add_hemisphere(radius, outward):
        start = len(verts)
        thetas = np.linspace(math.pi / 2.0, math.pi, n_theta + 1)  # z <= 0
        phis = np.linspace(0.0, 2.0 * math.pi, n_phi, endpoint=False)
        for th in thetas:
            for ph in phis:
                p = np.array([math.sin(th) * math.cos(ph),
                              math.sin(th) * math.sin(ph), math.cos(th)])
                verts.append(p * radius)
                norms.append(p * (1.0 if outward else -1.0))
        for i in range(n_theta):
            for j in range(n_phi):
                a = start + i * n_phi + j
                b = start + i * n_phi + (j + 1) % n_phi
                c = a + n_phi
                d = b + n_phi
                if outward:
                    faces.extend([[a, c, b], [b, c, d]])
                else:
                    faces.extend([[a, b, c], [b, d, c]])
        return start

    add_hemisphere(r_outer, outward=True)
    add_hemisphere(r_inner, outward=False)
    # Rim annulus at z = 0.
    start = len(verts)
    phis = np.linspace(0.0, 2.0 * math.pi, n_phi, endpoint=False)
    for radius in (r_outer, r_inner):
        for ph in phis:
            verts.append(np.array([radius * math.cos(ph), radius * math.sin(ph), 0.0]))
            norms.append(np.array([0.0, 0.0, 1.0]))
    for j in range(n_phi):
        a = start + j
        b = start + (j + 1) % n_phi
        c = a + n_phi
        d = b + n_phi
        faces += [[a, b, c], [b, d, c]]

    return TriangleMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64),
                        np.asarray(norms))


def box_mesh(half_extents) -> TriangleMesh:
    he = np.asarray(half_extents, dtype=np.float64)
    verts, norms, faces = [], [], []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            n = np.zeros(3)
            n[axis] = sign
            u = np.zeros(3)
            u[(axis + 1) % 3] = 1.0
            v = np.cross(n, u)
            start = len(verts)
            # (u, v, n) is right-handed for either sign, so one winding
            # rule yields outward geometric normals everywhere.
            for du, dv in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
                p = n * he + du * u * he + dv * v * he
                verts.append(p)
                norms.append(n)
            faces += [[start, start + 1, start + 2], [start, start + 2, start + 3]]
    return TriangleMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64),
                        np.asarray(norms))


def primitive_mesh(spec, resolution=4) -> TriangleMesh:
    """Exact reference mesh for a synthetic SceneSpec primitive."""
    from .dataset import BOWL_THICKNESS

    if spec.primitive == "sphere":
        return icosphere(subdivisions=resolution, radius=spec.radius)
    if spec.primitive == "box":
        return box_mesh(np.array([0.8, 0.6, 0.5]) * spec.radius)
    return bowl_mesh(r_outer=spec.radius, thickness_frac=BOWL_THICKNESS)
