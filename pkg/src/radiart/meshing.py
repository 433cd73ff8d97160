"""Isosurface extraction from the density field.

Classic 256-case marching cubes with linear interpolation along crossed cell
edges. Vertices are welded by global edge identity (axis + lattice position),
so closed isosurfaces come out watertight; emission order is cell-major and
therefore deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._mc_tables import EDGE_CROSSINGS, TRIANGLE_EDGES
from .errors import ValidationError
from .field import FieldArch, FieldParams, field_eval_batch
from . import autodiff as ad

# cell-local corner offsets (x, y, z), classic numbering: 0-3 bottom ring,
# 4-7 top ring
_CORNERS = np.array([
    (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
])

# local edge -> (axis, corner offset of the edge's lower end)
_EDGES = [
    (0, (0, 0, 0)), (1, (1, 0, 0)), (0, (0, 1, 0)), (1, (0, 0, 0)),
    (0, (0, 0, 1)), (1, (1, 0, 1)), (0, (0, 1, 1)), (1, (0, 0, 1)),
    (2, (0, 0, 0)), (2, (1, 0, 0)), (2, (1, 1, 0)), (2, (0, 1, 0)),
]


@dataclass
class DensityGrid:
    bbox_min: np.ndarray  # (3,)
    bbox_max: np.ndarray  # (3,)
    values: np.ndarray    # (nx, ny, nz) densities at lattice points

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValidationError("grid needs at least 2 lattice points per axis")
        if np.any(self.bbox_max <= self.bbox_min):
            raise ValidationError("bbox_max must exceed bbox_min")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValidationError("grid values must be finite and non-negative")

    def spacing(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / (np.array(self.values.shape) - 1)


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (V, 3)
    triangles: np.ndarray  # (T, 3) int indices

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles):
            if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
                raise ValidationError("triangle indices out of range")
            if np.any((self.triangles[:, 0] == self.triangles[:, 1])
                      | (self.triangles[:, 1] == self.triangles[:, 2])
                      | (self.triangles[:, 0] == self.triangles[:, 2])):
                raise ValidationError("degenerate triangle with repeated vertices")


def bake_density_grid(params: FieldParams, arch: FieldArch, bbox_min, bbox_max,
                      resolution) -> DensityGrid:
    """Sample the field's density on a regular lattice (view-independent)."""
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
    if np.any(res < 2):
        raise ValidationError("resolution must be >= 2 per axis")
    params.validate(arch)
    axes = [np.linspace(lo, hi, n) for lo, hi, n in
            zip(np.asarray(bbox_min, dtype=np.float64),
                np.asarray(bbox_max, dtype=np.float64), res)]
    xs, ys, zs = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=-1)
    plist = [ad.constant(t) for t in params.tensors]
    dummy_dir = np.zeros_like(pts)
    dummy_dir[:, 2] = 1.0
    values = np.empty(len(pts))
    chunk = 65536
    for lo in range(0, len(pts), chunk):
        sigma, _ = field_eval_batch(plist, arch,
                                    ad.constant(pts[lo:lo + chunk]),
                                    ad.constant(dummy_dir[lo:lo + chunk]))
        values[lo:lo + chunk] = sigma.data
    return DensityGrid(bbox_min=np.asarray(bbox_min, dtype=np.float64),
                       bbox_max=np.asarray(bbox_max, dtype=np.float64),
                       values=values.reshape(tuple(res)))


def _edge_crossing_vertices(values, below, iso, axis, origin, spacing):
    """Vertex position and id grid for all crossed lattice edges along axis."""
    sl_lo = [slice(None)] * 3
    sl_hi = [slice(None)] * 3
    sl_lo[axis] = slice(0, -1)
    sl_hi[axis] = slice(1, None)
    v0 = values[tuple(sl_lo)]
    v1 = values[tuple(sl_hi)]
    crossed = below[tuple(sl_lo)] != below[tuple(sl_hi)]
    ids = np.full(crossed.shape, -1, dtype=np.int64)
    n = int(crossed.sum())
    ids[crossed] = np.arange(n)

    ii, jj, kk = np.nonzero(crossed)
    base = np.stack([ii, jj, kk], axis=-1).astype(np.float64)
    t = (iso - v0[crossed]) / (v1[crossed] - v0[crossed])
    offset = np.zeros_like(base)
    offset[:, axis] = t
    verts = origin + (base + offset) * spacing
    return ids, verts


def marching_cubes(grid: DensityGrid, iso: float) -> TriangleMesh:
    """Triangulate the iso-level surface; sigma > iso counts as inside."""
    if not np.isfinite(iso):
        raise ValidationError("iso level must be finite")
    values = grid.values
    below = values < iso
    nx, ny, nz = values.shape
    spacing = grid.spacing()

    # corner configuration per cell, bit i set when corner i is below iso
    cube_idx = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.uint16)
    for bit, (dx, dy, dz) in enumerate(_CORNERS):
        view = below[dx:dx + nx - 1, dy:dy + ny - 1, dz:dz + nz - 1]
        cube_idx |= view.astype(np.uint16) << bit

    edge_table = np.asarray(EDGE_CROSSINGS, dtype=np.uint16)
    active = np.nonzero(edge_table[cube_idx] != 0)
    if len(active[0]) == 0:
        return TriangleMesh(vertices=np.zeros((0, 3)),
                            triangles=np.zeros((0, 3), dtype=np.int64))

    # one welded vertex per crossed lattice edge
    ids_by_axis = []
    verts_by_axis = []
    offsets = [0]
    for axis in range(3):
        ids, verts = _edge_crossing_vertices(values, below, iso, axis,
                                             grid.bbox_min, spacing)
        ids_by_axis.append(ids)
        verts_by_axis.append(verts)
        offsets.append(offsets[-1] + len(verts))
    vertices = np.concatenate(verts_by_axis)

    ci, cj, ck = active
    codes = cube_idx[active]
    tri_table = np.asarray(TRIANGLE_EDGES, dtype=np.int64)
    rows = tri_table[codes]  # (A, 16)

    # map each cell-local edge to its welded vertex id
    local_vertex = np.empty((len(ci), 12), dtype=np.int64)
    for e, (axis, (dx, dy, dz)) in enumerate(_EDGES):
        local_vertex[:, e] = ids_by_axis[axis][ci + dx, cj + dy, ck + dz] \
            + offsets[axis]

    tris = []
    for t0 in range(0, 15, 3):
        present = rows[:, t0] >= 0
        if not np.any(present):
            continue
        e3 = rows[present][:, t0:t0 + 3]
        cell_rows = local_vertex[present]
        tris.append(np.take_along_axis(cell_rows, e3, axis=1))
    triangles = np.concatenate(tris) if tris else np.zeros((0, 3), dtype=np.int64)

    # drop slivers where the iso level passes exactly through a lattice point
    ok = (triangles[:, 0] != triangles[:, 1]) \
        & (triangles[:, 1] != triangles[:, 2]) \
        & (triangles[:, 0] != triangles[:, 2])
    return TriangleMesh(vertices=vertices, triangles=triangles[ok])


# ---------------------------------------------------------------------------
# OBJ output (v/f records only)
# ---------------------------------------------------------------------------

def export_obj(mesh: TriangleMesh, path: str | Path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_obj(path: str | Path) -> TriangleMesh:
    verts = []
    faces = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(v) for v in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(v.split("/")[0]) - 1 for v in parts[1:4]])
    return TriangleMesh(vertices=np.array(verts, dtype=np.float64).reshape(-1, 3),
                        triangles=np.array(faces, dtype=np.int64).reshape(-1, 3))


# ---------------------------------------------------------------------------
# mesh diagnostics used by the geometry checks
# ---------------------------------------------------------------------------

def euler_characteristic(mesh: TriangleMesh) -> int:
    if len(mesh.triangles) == 0:
        return 0
    used = np.unique(mesh.triangles)
    v = len(used)
    edges = np.concatenate([mesh.triangles[:, [0, 1]],
                            mesh.triangles[:, [1, 2]],
                            mesh.triangles[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    e = len(np.unique(edges, axis=0))
    f = len(mesh.triangles)
    return v - e + f


def is_watertight(mesh: TriangleMesh) -> bool:
    """Every undirected edge borders exactly two triangles."""
    if len(mesh.triangles) == 0:
        return False
    edges = np.concatenate([mesh.triangles[:, [0, 1]],
                            mesh.triangles[:, [1, 2]],
                            mesh.triangles[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def mean_nearest_vertex_distance(a: TriangleMesh, b: TriangleMesh) -> float:
    """Symmetric mean nearest-neighbor distance between vertex sets."""
    from scipy.spatial import cKDTree

    if len(a.vertices) == 0 or len(b.vertices) == 0:
        raise ValidationError("cannot compare empty meshes")
    d_ab = cKDTree(b.vertices).query(a.vertices)[0]
    d_ba = cKDTree(a.vertices).query(b.vertices)[0]
    return float(0.5 * (d_ab.mean() + d_ba.mean()))
