"""Sparse multi-level feature grid with trainable per-corner vectors.

Corners live on the integer lattice of each retained level (side length
``s_leaf * 2**level`` meters, level 0 finest). Each corner stores a geometry
vector (width ``h1``) and a semantic vector (width ``h2``), allocated jointly
and addressed by (level, Morton code). Queries interpolate the 8 corners of
the containing voxel; multi-level queries combine per-level results
coarse-to-fine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import morton
from .errors import EmptyMapError

# the 8 voxel-corner offsets, index c has bits (x, y, z) = (c&1, c>>1&1, c>>2&1)
CORNER_OFFSETS = np.array(
    [
        [0, 0, 0],
        [1, 0, 0],
        [0, 1, 0],
        [1, 1, 0],
        [0, 0, 1],
        [1, 0, 1],
        [0, 1, 1],
        [1, 1, 1],
    ],
    dtype=np.int64,
)

GEOMETRY = "geometry"
SEMANTIC = "semantic"


def scatter_rows(out: np.ndarray, rows: np.ndarray, values: np.ndarray):
    """out[rows] += values, accumulating repeated rows (bincount per column)."""
    n = out.shape[0]
    for j in range(out.shape[1]):
        out[:, j] += np.bincount(rows, weights=values[:, j], minlength=n)


@dataclass
class SparseGrads:
    """Row-sparse gradient block for one feature pool.

    rows are unique and sorted; values is row-aligned (k, h). Keeping
    gradients sparse keeps step cost proportional to the batch, not the map.
    """

    rows: np.ndarray
    values: np.ndarray

    @staticmethod
    def empty(width: int) -> "SparseGrads":
        return SparseGrads(np.empty(0, dtype=np.int64), np.empty((0, width)))

    @staticmethod
    def accumulate(rows: np.ndarray, values: np.ndarray) -> "SparseGrads":
        """Sum duplicate rows of an unsorted (rows, values) scatter list."""
        if rows.size == 0:
            return SparseGrads.empty(values.shape[1])
        order = np.argsort(rows, kind="stable")
        sorted_rows = rows[order]
        starts = np.nonzero(
            np.concatenate([[True], sorted_rows[1:] != sorted_rows[:-1]])
        )[0]
        out = np.add.reduceat(values[order], starts, axis=0)
        return SparseGrads(sorted_rows[starts], out)

    @staticmethod
    def combine(parts) -> "SparseGrads":
        """Weighted sum of (scale, SparseGrads) pairs."""
        parts = [(s, p) for s, p in parts if len(p.rows)]
        if not parts:
            raise ValueError("combine needs at least one non-empty part")
        rows = np.concatenate([p.rows for _, p in parts])
        vals = np.concatenate([s * p.values for s, p in parts])
        return SparseGrads.accumulate(rows, vals)

    @staticmethod
    def from_dense(dense: np.ndarray) -> "SparseGrads":
        rows = np.nonzero(np.any(dense != 0.0, axis=1))[0]
        return SparseGrads(rows, dense[rows].copy())

    def to_dense(self, shape) -> np.ndarray:
        d = np.zeros(shape)
        d[self.rows] = self.values
        return d

    def scaled(self, scale: float) -> "SparseGrads":
        return SparseGrads(self.rows, scale * self.values)


@dataclass(frozen=True)
class VoxelKey:
    """A corner/voxel address: level plus signed lattice coordinates."""

    level: int
    ix: int
    iy: int
    iz: int

    def code(self) -> int:
        return int(morton.encode(self.ix, self.iy, self.iz))


@dataclass
class LevelQuery:
    """Interpolation bookkeeping for a batch of points at one level.

    rows: (n, 8) pool rows of the voxel corners, -1 where unallocated.
    weights: (n, 8) trilinear weights (sum to 1 where present).
    t: (n, 3) fractional position inside the voxel.
    side: voxel side length in meters.
    present: (n,) True where all 8 corners are allocated.
    """

    level: int
    side: float
    rows: np.ndarray
    weights: np.ndarray
    t: np.ndarray
    present: np.ndarray


def trilinear_weights(t: np.ndarray) -> np.ndarray:
    """(n, 3) fractional coordinates -> (n, 8) corner weights."""
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    wx = np.stack([1.0 - tx, tx], axis=1)
    wy = np.stack([1.0 - ty, ty], axis=1)
    wz = np.stack([1.0 - tz, tz], axis=1)
    off = CORNER_OFFSETS
    return wx[:, off[:, 0]] * wy[:, off[:, 1]] * wz[:, off[:, 2]]


def trilinear_weight_gradients(t: np.ndarray, side: float) -> np.ndarray:
    """Spatial gradients of the 8 corner weights: (n, 8, 3), d w_c / d x."""
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    wx = np.stack([1.0 - tx, tx], axis=1)
    wy = np.stack([1.0 - ty, ty], axis=1)
    wz = np.stack([1.0 - tz, tz], axis=1)
    n = t.shape[0]
    sx = np.array([-1.0, 1.0])  # d/dt of (1-t, t)
    off = CORNER_OFFSETS
    grad = np.empty((n, 8, 3))
    grad[:, :, 0] = sx[off[:, 0]][None, :] * wy[:, off[:, 1]] * wz[:, off[:, 2]]
    grad[:, :, 1] = wx[:, off[:, 0]] * sx[off[:, 1]][None, :] * wz[:, off[:, 2]]
    grad[:, :, 2] = wx[:, off[:, 0]] * wy[:, off[:, 1]] * sx[off[:, 2]][None, :]
    return grad / side


def trilinear_weight_hessians(t: np.ndarray, side: float) -> np.ndarray:
    """Second spatial derivatives of corner weights: (n, 8, 3, 3).

    Diagonal entries vanish (weights are multilinear); off-diagonal entries
    are +-products of the remaining axis factor.
    """
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    wx = np.stack([1.0 - tx, tx], axis=1)
    wy = np.stack([1.0 - ty, ty], axis=1)
    wz = np.stack([1.0 - tz, tz], axis=1)
    n = t.shape[0]
    sx = np.array([-1.0, 1.0])
    off = CORNER_OFFSETS
    hess = np.zeros((n, 8, 3, 3))
    sxx = sx[off[:, 0]][None, :]
    sxy = sx[off[:, 1]][None, :]
    sxz = sx[off[:, 2]][None, :]
    hess[:, :, 0, 1] = hess[:, :, 1, 0] = sxx * sxy * wz[:, off[:, 2]]
    hess[:, :, 0, 2] = hess[:, :, 2, 0] = sxx * wy[:, off[:, 1]] * sxz
    hess[:, :, 1, 2] = hess[:, :, 2, 1] = wx[:, off[:, 0]] * sxy * sxz
    return hess / (side * side)


class _Level:
    """One octree level: code->row index plus growable feature pools.

    Lookups go through a sorted code array (vectorized searchsorted); the
    dict is the authoritative index and the sorted view is rebuilt lazily
    after allocations.
    """

    def __init__(self, h1: int, h2: int):
        self.index: dict[int, int] = {}
        self.geo = np.empty((0, h1), dtype=np.float64)
        self.sem = np.empty((0, h2), dtype=np.float64)
        self.coords = np.empty((0, 3), dtype=np.int64)
        self.min_c: np.ndarray | None = None
        self.max_c: np.ndarray | None = None
        self._sorted_codes = np.empty(0, dtype=np.uint64)
        self._sorted_rows = np.empty(0, dtype=np.int64)
        self._dirty = False

    @property
    def count(self) -> int:
        return len(self.index)

    def _grow(self, extra: int, rng: np.random.Generator, std: float):
        n = self.count
        geo_new = rng.normal(0.0, std, size=(extra, self.geo.shape[1]))
        sem_new = rng.normal(0.0, std, size=(extra, self.sem.shape[1]))
        self.geo = np.concatenate([self.geo[:n], geo_new], axis=0)
        self.sem = np.concatenate([self.sem[:n], sem_new], axis=0)

    def _refresh(self):
        if not self._dirty:
            return
        codes = np.fromiter(self.index.keys(), dtype=np.uint64, count=self.count)
        rows = np.fromiter(self.index.values(), dtype=np.int64, count=self.count)
        order = np.argsort(codes)
        self._sorted_codes = codes[order]
        self._sorted_rows = rows[order]
        self._dirty = False

    def lookup(self, codes: np.ndarray) -> np.ndarray:
        """Vectorized code -> row mapping, -1 where absent."""
        self._refresh()
        sc = self._sorted_codes
        if len(sc) == 0:
            return np.full(codes.shape, -1, dtype=np.int64)
        pos = np.searchsorted(sc, codes)
        pos = np.minimum(pos, len(sc) - 1)
        found = sc[pos] == codes
        return np.where(found, self._sorted_rows[pos], -1)


@dataclass
class GridConfig:
    s_leaf: float = 0.2  # finest corner-lattice spacing [m]
    levels: int = 3  # retained levels, level 0 finest
    h1: int = 8  # geometry feature width
    h2: int = 16  # semantic feature width
    init_std: float = 0.01
    seed: int = 0
    level_combine: str = "concat"  # "concat" (default) or "sum"


class OctreeFeatureGrid:
    """Jointly-allocated geometry/semantic corner features over L levels."""

    def __init__(self, config: GridConfig | None = None, **kwargs):
        cfg = config or GridConfig(**kwargs)
        if config is not None and kwargs:
            raise ValueError("pass either a GridConfig or keyword overrides")
        if cfg.level_combine not in ("concat", "sum"):
            raise ValueError(f"unknown level_combine {cfg.level_combine!r}")
        self.config = cfg
        self.s_leaf = float(cfg.s_leaf)
        self.levels = int(cfg.levels)
        self.h1 = int(cfg.h1)
        self.h2 = int(cfg.h2)
        self._rng = np.random.default_rng(cfg.seed)
        self._lv = [_Level(self.h1, self.h2) for _ in range(self.levels)]

    # ---------- basic geometry ----------

    def side(self, level: int) -> float:
        return self.s_leaf * (2.0**level)

    def num_corners(self, level: int) -> int:
        return self._lv[level].count

    @property
    def total_corners(self) -> int:
        return sum(lv.count for lv in self._lv)

    def concat_width(self, table: str) -> int:
        h = self.h1 if table == GEOMETRY else self.h2
        return h * self.levels if self.config.level_combine == "concat" else h

    def pool(self, level: int, table: str) -> np.ndarray:
        """Direct (mutable) view of the level's feature pool."""
        lv = self._lv[level]
        return lv.geo if table == GEOMETRY else lv.sem

    def set_pool(self, level: int, table: str, values: np.ndarray):
        lv = self._lv[level]
        tgt = lv.geo if table == GEOMETRY else lv.sem
        if values.shape != tgt.shape:
            raise ValueError("pool shape mismatch")
        if table == GEOMETRY:
            lv.geo = values.astype(np.float64)
        else:
            lv.sem = values.astype(np.float64)

    def level_codes(self, level: int) -> np.ndarray:
        """Allocated corner codes at a level, in insertion (row) order."""
        lv = self._lv[level]
        return np.fromiter(lv.index.keys(), dtype=np.uint64, count=lv.count)

    def level_coords(self, level: int) -> np.ndarray:
        return self._lv[level].coords[: self._lv[level].count]

    def bounds(self, level: int):
        """(min, max) integer corner coordinates, or None when empty."""
        lv = self._lv[level]
        if lv.min_c is None:
            return None
        return lv.min_c.copy(), lv.max_c.copy()

    def row_of(self, key: VoxelKey) -> int:
        """Pool row for a corner key, -1 if unallocated."""
        return self._lv[key.level].index.get(key.code(), -1)

    # ---------- allocation ----------

    def allocate_for_points(self, points: np.ndarray) -> int:
        """Ensure the containing voxel's corners exist at every level.

        Returns the number of newly created corners (0 when idempotent).
        New features are drawn from N(0, init_std) in allocation order, so a
        fixed seed plus identical call sequence reproduces the grid exactly.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if points.size == 0:
            return 0
        if not np.all(np.isfinite(points)):
            raise ValueError("points must be finite")
        created = 0
        for level in range(self.levels):
            lv = self._lv[level]
            side = self.side(level)
            vox = np.floor(points / side).astype(np.int64)
            corners = (vox[:, None, :] + CORNER_OFFSETS[None, :, :]).reshape(-1, 3)
            codes = morton.encode_points(corners)
            codes, first = np.unique(codes, return_index=True)
            corners = corners[first]
            fresh_mask = lv.lookup(codes) < 0
            fresh = corners[fresh_mask]
            if len(fresh):
                lv._grow(len(fresh), self._rng, self.config.init_std)
                base = lv.count
                lv.coords = np.concatenate([lv.coords, fresh], axis=0)
                for i, c in enumerate(codes[fresh_mask]):
                    lv.index[int(c)] = base + i
                lv._dirty = True
                created += len(fresh)
            lo = corners.min(axis=0)
            hi = corners.max(axis=0)
            if lv.min_c is None:
                lv.min_c, lv.max_c = lo, hi
            else:
                lv.min_c = np.minimum(lv.min_c, lo)
                lv.max_c = np.maximum(lv.max_c, hi)
        return created

    def insert_corner(self, key: VoxelKey, geo: np.ndarray, sem: np.ndarray) -> int:
        """Insert one corner with explicit feature values (snapshot load path)."""
        lv = self._lv[key.level]
        code = key.code()
        if code in lv.index:
            row = lv.index[code]
        else:
            row = lv.count
            lv.geo = np.concatenate([lv.geo, np.zeros((1, self.h1))], axis=0)
            lv.sem = np.concatenate([lv.sem, np.zeros((1, self.h2))], axis=0)
            coord = np.array([[key.ix, key.iy, key.iz]], dtype=np.int64)
            lv.coords = np.concatenate([lv.coords, coord], axis=0)
            lv.index[code] = row
            lv._dirty = True
            if lv.min_c is None:
                lv.min_c = coord[0].copy()
                lv.max_c = coord[0].copy()
            else:
                lv.min_c = np.minimum(lv.min_c, coord[0])
                lv.max_c = np.maximum(lv.max_c, coord[0])
        lv.geo[row] = geo
        lv.sem[row] = sem
        return row

    # ---------- queries ----------

    def locate(self, xs: np.ndarray, level: int) -> LevelQuery:
        """Resolve containing voxels and interpolation weights for a batch."""
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        lv = self._lv[level]
        side = self.side(level)
        scaled = xs / side
        vox = np.floor(scaled).astype(np.int64)
        t = scaled - vox
        corners = vox[:, None, :] + CORNER_OFFSETS[None, :, :]
        codes = morton.encode_points(corners.reshape(-1, 3))
        rows = lv.lookup(codes).reshape(-1, 8)
        present = np.all(rows >= 0, axis=1)
        weights = trilinear_weights(t)
        return LevelQuery(level, side, rows, weights, t, present)

    def gather(self, query: LevelQuery, table: str) -> np.ndarray:
        """Interpolated features for a located batch; zeros where absent."""
        pool = self.pool(query.level, table)
        safe_rows = np.where(query.rows >= 0, query.rows, 0)
        feats = pool[safe_rows]  # (n, 8, h)
        out = np.einsum("nc,nch->nh", query.weights, feats)
        out[~query.present] = 0.0
        return out

    def query_level_feature(self, x, level: int, table: str):
        """Trilinear feature at one point and level; None when absent."""
        q = self.locate(np.asarray(x, dtype=np.float64)[None, :], level)
        if not q.present[0]:
            return None
        return self.gather(q, table)[0]

    def query_many(self, xs: np.ndarray, table: str):
        """Multi-level combined features for a batch.

        Returns (features (n, concat_width), present (n,), queries). Present
        requires the finest level; absent coarser levels contribute zeros.
        Concat order is coarsest first (level L-1 .. level 0).
        """
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        n = xs.shape[0]
        h = self.h1 if table == GEOMETRY else self.h2
        queries = [self.locate(xs, level) for level in range(self.levels)]
        parts = [self.gather(queries[level], table) for level in range(self.levels)]
        order = list(range(self.levels - 1, -1, -1))
        if self.config.level_combine == "concat":
            out = np.concatenate([parts[level] for level in order], axis=1)
        else:
            out = np.zeros((n, h))
            for level in order:
                out += parts[level]
        return out, queries[0].present.copy(), queries

    def query_concat(self, x, table: str):
        """Single-point combined feature; None outside the mapped region."""
        out, present, _ = self.query_many(np.asarray(x, dtype=np.float64)[None, :], table)
        if not present[0]:
            return None
        return out[0]

    def level_slice(self, level: int, table: str) -> slice:
        """Columns of the combined vector contributed by a level."""
        h = self.h1 if table == GEOMETRY else self.h2
        if self.config.level_combine == "sum":
            return slice(0, h)
        pos = self.levels - 1 - level  # coarsest block first
        return slice(pos * h, (pos + 1) * h)

    def scatter_feature_grads(self, queries, table: str, d_concat: np.ndarray):
        """Accumulate d(loss)/d(corner features) from d(loss)/d(combined).

        Returns a per-level list of SparseGrads. Absent levels and absent
        points contribute nothing.
        """
        grads = []
        for level in range(self.levels):
            q = queries[level]
            width = self.h1 if table == GEOMETRY else self.h2
            sl = self.level_slice(level, table)
            du = d_concat[:, sl]  # (n, h)
            ok = q.present
            if not np.any(ok):
                grads.append(SparseGrads.empty(width))
                continue
            rows = q.rows[ok].reshape(-1)  # (m*8,)
            contrib = (q.weights[ok][:, :, None] * du[ok][:, None, :]).reshape(
                -1, du.shape[1]
            )
            grads.append(SparseGrads.accumulate(rows, contrib))
        return grads

    # ---------- map extent ----------

    def map_cube_counts(self, s_cube: float) -> tuple[int, int, int]:
        """Cube-lattice extent per axis from finest-level metric bounds."""
        b = self.bounds(0)
        if b is None:
            raise EmptyMapError("map_cube_counts on an empty grid")
        lo, hi = b
        extent = (hi - lo).astype(np.float64) * self.s_leaf
        counts = np.ceil(extent / s_cube - 1e-12).astype(np.int64)
        counts = np.maximum(counts, 1)
        return int(counts[0]), int(counts[1]), int(counts[2])

    def complete_leaf_voxels(self) -> set:
        """Codes of level-0 voxels whose 8 corners are all allocated.

        A point query is present exactly when its containing leaf voxel is in
        this set; the mesher uses it to cull empty blocks cheaply.
        """
        lv = self._lv[0]
        coords = lv.coords[: lv.count]
        if len(coords) == 0:
            return set()
        corners = coords[:, None, :] + CORNER_OFFSETS[None, :, :]
        codes = morton.encode_points(corners.reshape(-1, 3))
        rows = lv.lookup(codes).reshape(-1, 8)
        complete = np.all(rows >= 0, axis=1)
        base_codes = morton.encode_points(coords[complete])
        return set(int(c) for c in base_codes)
