"""Indexed triangle surface meshes and their file formats.

``TriMesh`` is the exchange type between the geometry, distance-field and
objective stages.  Vertices are float64 ``(n, 3)`` arrays, triangles are
``(m, 3)`` integer index triples wound counter-clockwise when seen from
outside.  Supported formats: ASCII Wavefront OBJ (``v``/``f`` records only)
and binary STL.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise MeshError("vertices must be an (n, 3) array")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError("triangles must be an (m, 3) array")
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise MeshError("triangle index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def copy(self) -> "TriMesh":
        return TriMesh(self.vertices.copy(), self.triangles.copy())

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box as (lower, upper) corners."""
        if not len(self.vertices):
            raise MeshError("empty mesh has no bounds")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def triangle_corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v = self.vertices
        t = self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def triangle_areas(self) -> np.ndarray:
        a, b, c = self.triangle_corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def edge_counts(self) -> dict[tuple[int, int], int]:
        """Count how many triangles reference each undirected edge."""
        counts: dict[tuple[int, int], int] = {}
        for tri in self.triangles:
            for i in range(3):
                a, b = int(tri[i]), int(tri[(i + 1) % 3])
                key = (a, b) if a < b else (b, a)
                counts[key] = counts.get(key, 0) + 1
        return counts

    def is_watertight(self) -> bool:
        """True when every undirected edge borders exactly two triangles."""
        if not len(self.triangles):
            return False
        return all(c == 2 for c in self.edge_counts().values())

    def is_consistently_oriented(self) -> bool:
        """True when every shared edge is traversed once in each direction."""
        seen: set[tuple[int, int]] = set()
        for tri in self.triangles:
            for i in range(3):
                e = (int(tri[i]), int(tri[(i + 1) % 3]))
                if e in seen:
                    return False
                seen.add(e)
        return True

    def translated(self, offset) -> "TriMesh":
        return TriMesh(self.vertices + np.asarray(offset, dtype=np.float64), self.triangles.copy())

    def scaled(self, factor: float, center=None) -> "TriMesh":
        c = np.zeros(3) if center is None else np.asarray(center, dtype=np.float64)
        return TriMesh(c + factor * (self.vertices - c), self.triangles.copy())


# --- Wavefront OBJ ---------------------------------------------------------


def write_obj(mesh: TriMesh, path) -> None:
    lines = []
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}")
    for t in mesh.triangles:
        lines.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriMesh:
    verts: list[list[float]] = []
    tris: list[list[int]] = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "v":
            if len(parts) < 4:
                raise MeshError(f"malformed vertex record: {line!r}")
            verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
        elif parts[0] == "f":
            if len(parts) != 4:
                raise MeshError("only triangular faces are supported")
            # tolerate v/vt/vn references; only the vertex index is used
            idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
            tris.append(idx)
        # all other record types are ignored
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(tris, dtype=np.int64).reshape(-1, 3))


# --- binary STL ------------------------------------------------------------


def write_stl(mesh: TriMesh, path) -> None:
    """Binary little-endian STL.  Vertex coordinates are stored as float32."""
    a, b, c = mesh.triangle_corners()
    normals = np.cross(b - a, c - a)
    lengths = np.linalg.norm(normals, axis=1)
    lengths[lengths == 0] = 1.0
    normals = normals / lengths[:, None]
    with open(path, "wb") as fh:
        fh.write(b"\0" * 80)
        fh.write(struct.pack("<I", mesh.n_triangles))
        for i in range(mesh.n_triangles):
            fh.write(np.asarray(normals[i], dtype="<f4").tobytes())
            fh.write(np.asarray(a[i], dtype="<f4").tobytes())
            fh.write(np.asarray(b[i], dtype="<f4").tobytes())
            fh.write(np.asarray(c[i], dtype="<f4").tobytes())
            fh.write(struct.pack("<H", 0))


def read_stl(path) -> TriMesh:
    """Read binary STL, merging exactly coincident corner coordinates."""
    data = Path(path).read_bytes()
    if len(data) < 84:
        raise MeshError("truncated STL file")
    (count,) = struct.unpack_from("<I", data, 80)
    expected = 84 + 50 * count
    if len(data) < expected:
        raise MeshError("truncated STL file")
    raw = np.frombuffer(data, dtype=np.uint8, count=50 * count, offset=84)
    rec = raw.reshape(count, 50)
    floats = rec[:, :48].copy().view("<f4").reshape(count, 4, 3)
    corners = floats[:, 1:4, :].reshape(-1, 3).astype(np.float64)
    uniq, inverse = np.unique(corners, axis=0, return_inverse=True)
    return TriMesh(uniq, inverse.reshape(-1, 3).astype(np.int64))
