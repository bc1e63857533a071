"""Progressive multi-resolution feature grids and the occupancy mask grid.

Grid levels are dense vertex lattices; a query trilinearly interpolates each
level and concatenates the per-level features, with levels above the current
bandwidth beta contributing exact zeros. The mask grid is a coarse binary
occupancy cache over the scene bounds used to skip free space during ray
sampling.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamStore
from .errors import ValidationError

MASK_MARGIN = 1.0  # occupancy margin, in voxel diagonals


@dataclass(frozen=True)
class ProgressiveGridSchedule:
    """Level resolutions (strictly increasing), channels per level, and the
    bandwidth ramp: beta rises linearly from beta_start to the level count
    over the first warmup_frac of training."""

    resolutions: tuple
    channels: int = 4
    beta_start: float = 4.0
    warmup_frac: float = 0.6

    def __post_init__(self):
        if len(self.resolutions) < 1:
            raise ValidationError("need at least one grid level")
        res = list(self.resolutions)
        if any(r < 2 for r in res) or any(b <= a for a, b in zip(res, res[1:])):
            raise ValidationError("level resolutions must be >= 2 and strictly increasing")
        if self.channels < 1:
            raise ValidationError("channels must be >= 1")
        if not 0 < self.warmup_frac <= 1:
            raise ValidationError("warmup_frac must lie in (0, 1]")

    @property
    def levels(self):
        return len(self.resolutions)

    @property
    def feature_width(self):
        return self.levels * self.channels

    def beta_at(self, step: int, total_steps: int) -> float:
        """Non-decreasing; reaches the full level count by warmup_frac."""
        if total_steps <= 0:
            return float(self.levels)
        warm = max(1.0, self.warmup_frac * total_steps)
        frac = min(1.0, step / warm)
        return self.beta_start + (self.levels - self.beta_start) * frac

    def active_levels(self, beta: float) -> int:
        """Number of levels whose 1-based index i satisfies i <= beta."""
        return int(np.clip(np.floor(beta), 0, self.levels))

    def to_json(self):
        return {"resolutions": list(self.resolutions), "channels": self.channels,
                "beta_start": self.beta_start, "warmup_frac": self.warmup_frac}

    @classmethod
    def from_json(cls, obj):
        return cls(tuple(obj["resolutions"]), obj["channels"],
                   obj["beta_start"], obj["warmup_frac"])


def desk_schedule(levels=8, base=16, top=256, channels=4) -> ProgressiveGridSchedule:
    ratio = (top / base) ** (1.0 / (levels - 1))
    res, seen = [], set()
    for i in range(levels):
        r = int(round(base * ratio ** i))
        while r in seen:
            r += 1
        seen.add(r)
        res.append(r)
    return ProgressiveGridSchedule(tuple(sorted(res)), channels)


def grid_param_names(schedule: ProgressiveGridSchedule):
    return [f"grid{i}" for i in range(schedule.levels)]


def init_grids(schedule: ProgressiveGridSchedule, store: ParamStore,
               rng: np.random.Generator, scale=1e-2, dtype=np.float32):
    for i, r in enumerate(schedule.resolutions):
        store.add(f"grid{i}",
                  rng.uniform(-scale, scale, size=(r ** 3, schedule.channels)).astype(dtype))


@dataclass
class GridEncodeCtx:
    n_active: int
    schedule: ProgressiveGridSchedule
    corner_idx: list         # per active level: (N, 8) flat lattice indices
    corner_wts: list         # per active level: (N, 8) trilinear weights


def _corner_data(q, res):
    """Flat lattice indices (N, 8) and trilinear weights (N, 8) for one level."""
    x = q * (res - 1)
    i0 = np.minimum(x.astype(np.int32), res - 2)
    f = x - i0
    ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    base = (ix * np.int32(res) + iy) * np.int32(res) + iz
    idx = np.empty((q.shape[0], 8), dtype=np.int32)
    wts = np.empty((q.shape[0], 8), dtype=np.float64)
    corner = 0
    for dx in (0, 1):
        wx = fx if dx else 1.0 - fx
        for dy in (0, 1):
            wy = fy if dy else 1.0 - fy
            for dz in (0, 1):
                wz = fz if dz else 1.0 - fz
                idx[:, corner] = base + np.int32((dx * res + dy) * res + dz)
                wts[:, corner] = wx * wy * wz
                corner += 1
    return idx, wts


def grid_encode(positions: np.ndarray, beta: float,
                schedule: ProgressiveGridSchedule, store: ParamStore,
                bounds, want_ctx: bool = True):
    """Concatenated per-level trilinear features, level i zeroed when i > beta.

    Positions outside the bounds are clamped. Returns (features, ctx).
    """
    lo, hi = (np.asarray(v, dtype=np.float64) for v in bounds)
    p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    q = np.clip((p - lo) / (hi - lo), 0.0, 1.0)
    n = q.shape[0]
    c = schedule.channels
    n_active = schedule.active_levels(beta)
    feats = np.zeros((n, schedule.feature_width), dtype=np.float64)
    all_idx, all_wts = [], []
    for lev in range(n_active):
        res = schedule.resolutions[lev]
        idx, wts = _corner_data(q, res)
        grid = store[f"grid{lev}"]
        vals = grid[idx].astype(np.float64)           # (N, 8, C)
        feats[:, lev * c:(lev + 1) * c] = np.einsum("nkc,nk->nc", vals, wts)
        if want_ctx:
            all_idx.append(idx)
            all_wts.append(wts)
    ctx = GridEncodeCtx(n_active, schedule, all_idx, all_wts) if want_ctx else None
    return feats, ctx


def grid_encode_backward(ctx: GridEncodeCtx, upstream: np.ndarray,
                         store: ParamStore, pending: dict | None = None) -> dict:
    """Scatter feature gradients back to grid vertices.

    With `pending` given, raw (indices, contributions) are queued there
    instead (one deduplication per level per step via
    flush_grid_gradients). Returns {param name: touched rows} when applied
    immediately, else {}.
    """
    sched = ctx.schedule
    c = sched.channels
    g = np.asarray(upstream, dtype=np.float64)
    touched = {}
    for lev in range(ctx.n_active):
        idx, wts = ctx.corner_idx[lev], ctx.corner_wts[lev]
        gl = g[:, lev * c:(lev + 1) * c]              # (N, C)
        contrib = wts[:, :, None] * gl[:, None, :]    # (N, 8, C)
        flat_idx = idx.reshape(-1)
        flat_val = contrib.reshape(-1, c)
        name = f"grid{lev}"
        if pending is not None:
            pending.setdefault(name, []).append((flat_idx, flat_val))
            continue
        touched[name] = _apply_grid_grad(store, name, flat_idx, flat_val, c)
    return touched


DENSE_LEVEL_ROWS = 1 << 18  # levels at or below this size use dense updates


def _apply_grid_grad(store, name, flat_idx, flat_val, channels):
    """Deduplicated scatter-add; returns touched rows, or None for levels
    small enough that a dense gradient/optimizer pass is cheaper."""
    rows = store.grad(name).shape[0]
    if rows <= DENSE_LEVEL_ROWS:
        dense = np.empty((rows, channels), dtype=np.float64)
        for ch in range(channels):
            dense[:, ch] = np.bincount(flat_idx, weights=flat_val[:, ch],
                                       minlength=rows)
        store.accumulate(name, dense.astype(store.grad(name).dtype))
        return None
    uniq, inv = np.unique(flat_idx, return_inverse=True)
    summed = np.empty((uniq.size, channels), dtype=np.float64)
    for ch in range(channels):
        summed[:, ch] = np.bincount(inv, weights=flat_val[:, ch],
                                    minlength=uniq.size)
    store.accumulate_rows(name, uniq, summed.astype(store.grad(name).dtype))
    return uniq


def flush_grid_gradients(store: ParamStore, pending: dict) -> dict:
    """Apply queued grid gradients with one dedup per level; returns the
    touched rows per parameter for sparse optimizer updates."""
    touched = {}
    for name, parts in pending.items():
        idx = parts[0][0] if len(parts) == 1 else np.concatenate([p[0] for p in parts])
        val = parts[0][1] if len(parts) == 1 else np.concatenate([p[1] for p in parts])
        touched[name] = _apply_grid_grad(store, name, idx, val, val.shape[-1])
    pending.clear()
    return touched


# ---------------------------------------------------------------------------
# Mask grid
# ---------------------------------------------------------------------------

@dataclass
class MaskGrid:
    occupancy: np.ndarray    # (M, M, M) bool
    bounds: tuple

    @classmethod
    def dense(cls, bounds, resolution=64):
        return cls(np.ones((resolution,) * 3, dtype=bool), bounds)

    @property
    def resolution(self):
        return self.occupancy.shape[0]

    @property
    def voxel_size(self) -> np.ndarray:
        lo, hi = self.bounds
        return (np.asarray(hi) - np.asarray(lo)) / self.resolution

    @property
    def voxel_diagonal(self) -> float:
        return float(np.linalg.norm(self.voxel_size))

    def query(self, positions: np.ndarray) -> np.ndarray:
        """True where a sample may touch surface; outside the bounds -> False."""
        lo, hi = (np.asarray(v, dtype=np.float64) for v in self.bounds)
        p = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        rel = (p - lo) / (hi - lo) * self.resolution
        idx = np.floor(rel).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < self.resolution), axis=-1)
        idx = np.clip(idx, 0, self.resolution - 1)
        out = self.occupancy[idx[:, 0], idx[:, 1], idx[:, 2]]
        return out & inside


def corner_lattice(bounds, resolution):
    lo, hi = (np.asarray(v, dtype=np.float64) for v in bounds)
    axes = [np.linspace(lo[k], hi[k], resolution + 1) for k in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


def update_mask_grid(sdf_fn, mask_grid: MaskGrid, chunk=262144) -> MaskGrid:
    """Mark a voxel occupied when the minimum of its 8 corner SDF samples is
    below one voxel diagonal; no voxel containing a corner sign change is
    ever skipped."""
    m = mask_grid.resolution
    pts = corner_lattice(mask_grid.bounds, m)
    sdf = np.empty(pts.shape[0], dtype=np.float64)
    for start in range(0, pts.shape[0], chunk):
        sdf[start:start + chunk] = sdf_fn(pts[start:start + chunk])
    corners = sdf.reshape(m + 1, m + 1, m + 1)
    mins = corners[:-1, :-1, :-1]
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                if dx == dy == dz == 0:
                    continue
                mins = np.minimum(mins, corners[dx:m + dx, dy:m + dy, dz:m + dz])
    occ = mins < MASK_MARGIN * mask_grid.voxel_diagonal
    return MaskGrid(occ, mask_grid.bounds)
