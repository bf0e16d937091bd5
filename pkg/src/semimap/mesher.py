"""Labeled triangle-mesh extraction from trained fields.

Marching cubes runs over the map's cube lattice (extent from the grid
bounds, spacing s_cube) in fixed-size blocks so memory stays bounded.
Blocks share corner samples along seams and vertices are keyed by global
lattice edge, so chunking introduces no cracks. Cubes touching a corner
whose finest-level features are unallocated produce no surface: sparse
allocation shows up as holes, never as walls.

Vertex labels come from the semantic field: the full combined vector for
semantic mode, the split slices for panoptic mode (class head on the first
fraction, instance head on the rest, instances only for thing classes).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import fields
from ._mc_tables import EDGE_TABLE, TRI_TABLE
from .errors import ConfigError
from .octree import GEOMETRY, SEMANTIC, OctreeFeatureGrid
from .palette import ClassPalette

# edge id -> (corner offset of the edge origin, axis)
_EDGE_ORIGIN = np.array(
    [
        [0, 0, 0],  # e0  +x
        [1, 0, 0],  # e1  +y
        [0, 1, 0],  # e2  +x
        [0, 0, 0],  # e3  +y
        [0, 0, 1],  # e4  +x
        [1, 0, 1],  # e5  +y
        [0, 1, 1],  # e6  +x
        [0, 0, 1],  # e7  +y
        [0, 0, 0],  # e8  +z
        [1, 0, 0],  # e9  +z
        [1, 1, 0],  # e10 +z
        [0, 1, 0],  # e11 +z
    ],
    dtype=np.int64,
)
_EDGE_AXIS = np.array([0, 1, 0, 1, 0, 1, 0, 1, 2, 2, 2, 2], dtype=np.int64)

# marching-cubes corner offsets in table order v0..v7
_MC_CORNERS = np.array(
    [
        [0, 0, 0],
        [1, 0, 0],
        [1, 1, 0],
        [0, 1, 0],
        [0, 0, 1],
        [1, 0, 1],
        [1, 1, 1],
        [0, 1, 1],
    ],
    dtype=np.int64,
)
_EDGE_ENDS = np.array(
    [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4), (0, 4), (1, 5), (2, 6), (3, 7)],
    dtype=np.int64,
)

_OUTSIDE = 1e6  # value assigned to unallocated corners (positive = outside)


@dataclass
class SemanticMesh:
    vertices: np.ndarray  # (n, 3) float64
    triangles: np.ndarray  # (m, 3) int64
    class_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.uint16))
    instance_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.uint16))
    colors: np.ndarray = field(default_factory=lambda: np.empty((0, 3), dtype=np.uint8))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @staticmethod
    def empty() -> "SemanticMesh":
        return SemanticMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))


def gnf_sampler(grid: OctreeFeatureGrid, gnf):
    """SDF sampler over the trained geometry field.

    Returns a callable points -> (values, valid); unallocated queries are
    invalid and treated as outside by the extractor.
    """
    complete = grid.complete_leaf_voxels()
    side = grid.side(0)

    def sample(points: np.ndarray):
        points = np.atleast_2d(points)
        vox = np.floor(points / side).astype(np.int64)
        from . import morton

        codes = morton.encode_points(vox)
        maybe = np.fromiter(
            (int(c) in complete for c in codes), dtype=bool, count=len(codes)
        )
        values = np.full(len(points), _OUTSIDE)
        if np.any(maybe):
            fq = fields.field_forward(grid, gnf, points[maybe], GEOMETRY)
            vals = np.full(int(maybe.sum()), _OUTSIDE)
            vals[fq.present] = fq.values[:, 0]
            values[maybe] = vals
        return values, values < _OUTSIDE / 2

    return sample


def analytic_sampler(sdf_fn):
    """Adapter for analytic SDF oracles (the decoder-bypass hook)."""

    def sample(points: np.ndarray):
        v = np.asarray(sdf_fn(np.atleast_2d(points)), dtype=np.float64)
        return v, np.ones(len(v), dtype=bool)

    return sample


@dataclass
class _BlockResult:
    origin: np.ndarray  # lattice origin (3,) of the block's corner grid
    values: np.ndarray  # (bx+1, by+1, bz+1) corner samples


def _block_corners(origin, shape, lattice_min, s_cube):
    ii = np.arange(shape[0]) + origin[0]
    jj = np.arange(shape[1]) + origin[1]
    kk = np.arange(shape[2]) + origin[2]
    grid_idx = np.stack(np.meshgrid(ii, jj, kk, indexing="ij"), axis=-1).reshape(-1, 3)
    return (lattice_min[None, :] + grid_idx) * s_cube, grid_idx


def extract_mesh(
    sampler,
    lattice_min: np.ndarray,
    counts: tuple,
    s_cube: float,
    iso: float = 0.0,
    block: int = 64,
    threads: int = 1,
) -> SemanticMesh:
    """Marching cubes over a cube lattice.

    sampler(points) -> (values, valid). lattice_min is the integer lattice
    coordinate of corner (0,0,0) (multiples of s_cube); counts the cube
    counts per axis. Cubes with any invalid corner emit nothing. Returns an
    unlabeled mesh (class/instance/color filled by label_mesh).
    """
    lattice_min = np.asarray(lattice_min, dtype=np.int64).reshape(3)
    mx, my, mz = (int(c) for c in counts)
    if mx <= 0 or my <= 0 or mz <= 0:
        return SemanticMesh.empty()

    blocks = []
    for bx in range(0, mx, block):
        for by in range(0, my, block):
            for bz in range(0, mz, block):
                blocks.append(
                    (
                        np.array([bx, by, bz], dtype=np.int64),
                        np.array(
                            [min(block, mx - bx), min(block, my - by), min(block, mz - bz)],
                            dtype=np.int64,
                        ),
                    )
                )

    def sample_block(args):
        origin, shape = args
        pts, _ = _block_corners(origin, shape + 1, lattice_min, s_cube)
        vals, valid = sampler(pts)
        vals = np.where(valid, vals, _OUTSIDE)
        return _BlockResult(origin, vals.reshape(tuple(shape + 1)))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(sample_block, blocks))
    else:
        results = [sample_block(b) for b in blocks]

    # serial triangulation in block order; vertices welded by global edge key
    vert_index: dict = {}
    vertices: list = []
    triangles: list = []
    for res in results:
        _polygonise_block(res, lattice_min, s_cube, iso, vert_index, vertices, triangles)

    if not triangles:
        return SemanticMesh.empty()
    verts = np.asarray(vertices)
    tris = np.asarray(triangles, dtype=np.int64)
    tris = _drop_degenerate(verts, tris)
    return SemanticMesh(verts, tris)


def _polygonise_block(res: _BlockResult, lattice_min, s_cube, iso, vert_index, vertices, triangles):
    vals = res.values
    nx, ny, nz = vals.shape[0] - 1, vals.shape[1] - 1, vals.shape[2] - 1
    inside = vals < iso
    # case index per cube from the 8 table-ordered corners
    case = np.zeros((nx, ny, nz), dtype=np.int32)
    for bit, (cx, cy, cz) in enumerate(_MC_CORNERS):
        case |= inside[cx : cx + nx, cy : cy + ny, cz : cz + nz].astype(np.int32) << bit
    # cubes with any unreliable corner emit nothing
    unreliable = vals >= _OUTSIDE / 2
    if unreliable.any():
        bad = np.zeros((nx, ny, nz), dtype=bool)
        for cx, cy, cz in _MC_CORNERS:
            bad |= unreliable[cx : cx + nx, cy : cy + ny, cz : cz + nz]
        case[bad] = 0
    active = np.argwhere((case != 0) & (case != 255))
    if len(active) == 0:
        return
    for ax, ay, az in active:
        c = int(case[ax, ay, az])
        edge_bits = int(EDGE_TABLE[c])
        if edge_bits == 0:
            continue
        cube = res.origin + (ax, ay, az)
        edge_vertex = {}
        for e in range(12):
            if not edge_bits & (1 << e):
                continue
            o = cube + _EDGE_ORIGIN[e]
            axis = int(_EDGE_AXIS[e])
            key = (int(o[0]), int(o[1]), int(o[2]), axis)
            vid = vert_index.get(key)
            if vid is None:
                a, b = _EDGE_ENDS[e]
                ca = cube - res.origin + _MC_CORNERS[a]
                cb = cube - res.origin + _MC_CORNERS[b]
                va = vals[ca[0], ca[1], ca[2]]
                vb = vals[cb[0], cb[1], cb[2]]
                t = (iso - va) / (vb - va)
                pa = (lattice_min + cube + _MC_CORNERS[a]) * s_cube
                pb = (lattice_min + cube + _MC_CORNERS[b]) * s_cube
                vid = len(vertices)
                vertices.append(pa + t * (pb - pa))
                vert_index[key] = vid
            edge_vertex[e] = vid
        row = TRI_TABLE[c]
        for k in range(0, 16, 3):
            if row[k] < 0:
                break
            triangles.append(
                (edge_vertex[int(row[k])], edge_vertex[int(row[k + 1])], edge_vertex[int(row[k + 2])])
            )


def _drop_degenerate(verts: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Remove triangles with repeated vertices or area below 1e-12."""
    distinct = (
        (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    )
    tris = tris[distinct]
    if len(tris) == 0:
        return tris
    a = verts[tris[:, 1]] - verts[tris[:, 0]]
    b = verts[tris[:, 2]] - verts[tris[:, 0]]
    area2 = np.linalg.norm(np.cross(a, b), axis=1)
    return tris[area2 > 2e-12]


def extract_map_mesh(
    grid: OctreeFeatureGrid,
    gnf,
    s_cube: float,
    iso: float = 0.0,
    block: int = 64,
    threads: int = 1,
    sampler=None,
) -> SemanticMesh:
    """Extract over the grid's own extent (cube counts from the map bounds).

    `sampler` overrides the GNF-backed sampler (analytic oracles in tests).
    """
    counts = grid.map_cube_counts(s_cube)
    lo, _ = grid.bounds(0)
    lattice_min = np.floor(lo * grid.s_leaf / s_cube).astype(np.int64)
    if sampler is None:
        sampler = gnf_sampler(grid, gnf)
    return extract_mesh(sampler, lattice_min, counts, s_cube, iso, block, threads)


def label_mesh(
    mesh: SemanticMesh,
    grid: OctreeFeatureGrid,
    decoders,
    palette: ClassPalette,
    mode: str = "semantic",
    chunk: int = 65536,
) -> SemanticMesh:
    """Assign per-vertex class (and instance in panoptic mode) via the fields.

    Vertices outside the mapped region get class 0 ("unlabeled"). Argmax
    ties break toward the lowest index.
    """
    n = mesh.n_vertices
    class_ids = np.zeros(n, dtype=np.uint16)
    instance_ids = np.zeros(n, dtype=np.uint16)
    panoptic = mode == "panoptic"
    for start in range(0, n, chunk):
        pts = mesh.vertices[start : start + chunk]
        if panoptic:
            fq = fields.field_forward(grid, decoders.pnf_sem, pts, SEMANTIC, cols=decoders.sem_cols)
        else:
            fq = fields.field_forward(grid, decoders.snf, pts, SEMANTIC)
        if fq.present.any():
            cls = np.argmax(fq.values, axis=1).astype(np.uint16)
            idx = np.nonzero(fq.present)[0] + start
            class_ids[idx] = cls
            if panoptic and palette.thing_ids:
                # presence is table-independent, so fqi covers every pts[fq.present]
                fqi = fields.field_forward(
                    grid, decoders.pnf_inst, pts[fq.present], SEMANTIC, cols=decoders.inst_cols
                )
                inst = np.argmax(fqi.values, axis=1).astype(np.uint16)
                thing = np.isin(
                    cls, np.fromiter(palette.thing_ids, dtype=np.int64, count=len(palette.thing_ids))
                )
                instance_ids[idx[thing]] = inst[thing]
    colors = palette.colors[np.minimum(class_ids, palette.num_classes - 1)]
    return SemanticMesh(mesh.vertices, mesh.triangles, class_ids, instance_ids, colors)


def filter_dynamic_mesh(mesh: SemanticMesh, palette: ClassPalette, dynamic_ids=None) -> SemanticMesh:
    """Drop triangles whose three vertices all carry dynamic classes."""
    ids = palette.dynamic_ids if dynamic_ids is None else frozenset(dynamic_ids)
    unknown = [i for i in ids if not 0 <= i < palette.num_classes]
    if unknown:
        raise ConfigError(f"dynamic class ids {sorted(unknown)} not in palette")
    if not ids or mesh.n_triangles == 0:
        return mesh
    dyn = np.isin(mesh.class_ids, np.fromiter(ids, dtype=np.int64, count=len(ids)))
    drop = dyn[mesh.triangles].all(axis=1)
    return _compact(mesh, mesh.triangles[~drop])


def _compact(mesh: SemanticMesh, tris: np.ndarray) -> SemanticMesh:
    """Re-index a triangle subset, dropping now-unreferenced vertices."""
    if len(tris) == 0:
        return SemanticMesh.empty()
    used = np.unique(tris.reshape(-1))
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return SemanticMesh(
        mesh.vertices[used],
        remap[tris],
        mesh.class_ids[used] if len(mesh.class_ids) else mesh.class_ids,
        mesh.instance_ids[used] if len(mesh.instance_ids) else mesh.instance_ids,
        mesh.colors[used] if len(mesh.colors) else mesh.colors,
    )


def concat_meshes(meshes) -> SemanticMesh:
    meshes = [m for m in meshes if m.n_triangles]
    if not meshes:
        return SemanticMesh.empty()
    offsets = np.cumsum([0] + [m.n_vertices for m in meshes[:-1]])
    return SemanticMesh(
        np.concatenate([m.vertices for m in meshes]),
        np.concatenate([m.triangles + off for m, off in zip(meshes, offsets)]),
        np.concatenate([m.class_ids for m in meshes]),
        np.concatenate([m.instance_ids for m in meshes]),
        np.concatenate([m.colors for m in meshes]),
    )
