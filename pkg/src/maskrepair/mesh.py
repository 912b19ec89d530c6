"""Iso-surface extraction and mesh export.

Classic marching cubes over a scalar grid: each 2x2x2 voxel cell is matched
against the 15-case lookup tables and surface vertices are placed on cell
edges by linear interpolation of the corner values.  Vertex positions are in
millimeters (voxel index times spacing).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._mc_tables import EDGE_TABLE, TRI_TABLE
from .volume import VolumeGrid

# Per cube-local edge: the global axis it runs along (0=d, 1=h, 2=w) and the
# (d, h, w) offset of its low-end corner within the cell.
_EDGE_AXIS = np.array([2, 1, 2, 1, 2, 1, 2, 1, 0, 0, 0, 0], dtype=np.int64)
_EDGE_BASE = np.array([
    (0, 0, 0), (0, 0, 1), (0, 1, 0), (0, 0, 0),
    (1, 0, 0), (1, 0, 1), (1, 1, 0), (1, 0, 0),
    (0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0),
], dtype=np.int64)

_VERTS_PER_CASE = (TRI_TABLE >= 0).sum(axis=1)


@dataclass
class TriangleMesh:
    """Vertices in millimeters plus triangle index triples."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
                self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle indices out of range")

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def is_empty(self) -> bool:
        return self.n_triangles == 0


def _empty_mesh() -> TriangleMesh:
    return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def marching_cubes(field, t: float, spacing_mm=None) -> TriangleMesh:
    """Extract the ``field == t`` iso-surface as a triangle mesh.

    ``field`` may be a VolumeGrid (its spacing is used unless overridden) or
    a plain 3D array.  Fields entirely on one side of ``t`` give an empty
    mesh.  Exactly-degenerate (zero area) triangles are dropped and vertices
    landing on the same position are merged, so the output is clean for
    topology checks.
    """
    if isinstance(field, VolumeGrid):
        data = field.data.astype(np.float64, copy=False)
        spacing = field.spacing_mm if spacing_mm is None else spacing_mm
    else:
        data = np.asarray(field, dtype=np.float64)
        spacing = (1.0, 1.0, 1.0) if spacing_mm is None else spacing_mm
    if not np.isfinite(data).all():
        raise ValueError("field contains non-finite values")
    D, H, W = data.shape
    if min(D, H, W) < 2:
        return _empty_mesh()

    inside = data < t
    cube_index = np.zeros((D - 1, H - 1, W - 1), dtype=np.int32)
    # Corner order follows the classic numbering: v0..v3 on the low-d face
    # counter-clockwise, v4..v7 above them.
    corners = (
        inside[:-1, :-1, :-1], inside[:-1, :-1, 1:],
        inside[:-1, 1:, 1:], inside[:-1, 1:, :-1],
        inside[1:, :-1, :-1], inside[1:, :-1, 1:],
        inside[1:, 1:, 1:], inside[1:, 1:, :-1],
    )
    for bit, c in enumerate(corners):
        cube_index |= c.astype(np.int32) << bit

    flat_index = cube_index.ravel()
    active = np.flatnonzero(EDGE_TABLE[flat_index] != 0)
    if active.size == 0:
        return _empty_mesh()
    cases = flat_index[active]
    d_c, h_c, w_c = np.unravel_index(active, cube_index.shape)

    rows = TRI_TABLE[cases]
    counts = _VERTS_PER_CASE[cases]
    edge_local = rows[rows >= 0]
    cube_of = np.repeat(np.arange(active.size), counts)

    base = _EDGE_BASE[edge_local]
    axis = _EDGE_AXIS[edge_local]
    dd = d_c[cube_of] + base[:, 0]
    hh = h_c[cube_of] + base[:, 1]
    ww = w_c[cube_of] + base[:, 2]
    keys = ((axis * D + dd) * H + hh) * W + ww

    uniq_keys, tri_ids = np.unique(keys, return_inverse=True)

    axis_u = uniq_keys // (D * H * W)
    rem = uniq_keys % (D * H * W)
    d_u = rem // (H * W)
    h_u = (rem // W) % H
    w_u = rem % W
    va = data[d_u, h_u, w_u]
    step = np.zeros((uniq_keys.size, 3), dtype=np.int64)
    step[np.arange(uniq_keys.size), axis_u] = 1
    vb = data[d_u + step[:, 0], h_u + step[:, 1], w_u + step[:, 2]]
    alpha = (t - va) / (vb - va)

    pos = np.stack([d_u, h_u, w_u], axis=1).astype(np.float64)
    pos += alpha[:, None] * step
    pos *= np.asarray(spacing, dtype=np.float64)

    # When the iso-level passes exactly through a grid node, several edges
    # produce the same position; merge them so triangle adjacency stays clean.
    rounded = np.ascontiguousarray(pos)
    _, first, remap = np.unique(
        rounded.view([("d", "f8"), ("h", "f8"), ("w", "f8")]).ravel(),
        return_index=True, return_inverse=True)
    vertices = rounded[first]
    triangles = remap[tri_ids].reshape(-1, 3)

    degenerate = (
        (triangles[:, 0] == triangles[:, 1])
        | (triangles[:, 1] == triangles[:, 2])
        | (triangles[:, 0] == triangles[:, 2])
    )
    triangles = triangles[~degenerate]
    if triangles.size == 0:
        return _empty_mesh()

    used = np.unique(triangles)
    lookup = np.full(len(vertices), -1, dtype=np.int64)
    lookup[used] = np.arange(used.size)
    return TriangleMesh(vertices[used], lookup[triangles])


def write_off(mesh: TriangleMesh, path) -> Path:
    """ASCII OFF export."""
    path = Path(path)
    lines = ["OFF", f"{len(mesh.vertices)} {len(mesh.triangles)} 0"]
    for v in mesh.vertices:
        lines.append(f"{v[0]:.8g} {v[1]:.8g} {v[2]:.8g}")
    for tri in mesh.triangles:
        lines.append(f"3 {tri[0]} {tri[1]} {tri[2]}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def write_stl(mesh: TriangleMesh, path) -> Path:
    """Binary (little-endian) STL export."""
    path = Path(path)
    tri_pts = mesh.vertices[mesh.triangles]  # (T, 3, 3)
    if len(tri_pts):
        normals = np.cross(tri_pts[:, 1] - tri_pts[:, 0], tri_pts[:, 2] - tri_pts[:, 0])
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = np.where(norms > 0, normals / np.where(norms == 0, 1, norms), 0.0)
    else:
        normals = np.zeros((0, 3))
    buf = bytearray()
    buf += b"maskrepair binary stl".ljust(80, b"\0")
    buf += struct.pack("<I", len(tri_pts))
    for n, tri in zip(normals.astype(np.float32), tri_pts.astype(np.float32)):
        buf += struct.pack("<3f", *n)
        for p in tri:
            buf += struct.pack("<3f", *p)
        buf += struct.pack("<H", 0)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(buf))
    return path


def read_stl_triangle_count(path) -> int:
    blob = Path(path).read_bytes()
    return struct.unpack("<I", blob[80:84])[0]


def read_off_counts(path) -> tuple[int, int]:
    lines = Path(path).read_text().splitlines()
    v, f, _ = (int(x) for x in lines[1].split())
    return v, f
