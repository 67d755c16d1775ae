"""Triangle meshes with per-corner UVs, primitives, and OBJ I/O."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import MissingUVs, ValidationError


@dataclass
class TriMesh:
    """Vertices in mm, faces as vertex-index triples, UVs per face corner.

    ``uvs`` has shape ``(n_faces, 3, 2)`` with coordinates in ``[0, 1]``.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uvs: np.ndarray | None = None
    landmark_vertex_ids: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValidationError("face index out of range")
        if self.uvs is not None:
            self.uvs = np.asarray(self.uvs, dtype=np.float64)
            if self.uvs.shape != (len(self.faces), 3, 2):
                raise ValidationError(f"uvs must have shape ({len(self.faces)}, 3, 2)")
        if self.landmark_vertex_ids is not None:
            ids = np.asarray(self.landmark_vertex_ids, dtype=np.int64)
            if ids.size and (ids.min() < 0 or ids.max() >= len(self.vertices)):
                raise ValidationError("landmark vertex id out of range")
            self.landmark_vertex_ids = ids

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def corners(self) -> np.ndarray:
        """Face corner positions, ``(n_faces, 3, 3)``."""
        return self.vertices[self.faces]

    def face_normals(self, unit: bool = True) -> np.ndarray:
        c = self.corners()
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        if unit:
            norm = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.where(norm > 0, norm, 1.0)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(unit=False), axis=1)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def require_uvs(self) -> np.ndarray:
        if self.uvs is None:
            raise MissingUVs("mesh has no texture coordinates")
        return self.uvs

    def transformed(self, scale: float = 1.0, R: np.ndarray | None = None,
                    T: np.ndarray | None = None) -> "TriMesh":
        v = scale * self.vertices
        if R is not None:
            v = v @ np.asarray(R).T
        if T is not None:
            v = v + np.asarray(T)
        return TriMesh(v, self.faces.copy(), None if self.uvs is None else self.uvs.copy(),
                       self.landmark_vertex_ids, dict(self.meta))

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        return TriMesh(vertices, self.faces, self.uvs, self.landmark_vertex_ids, dict(self.meta))


# --------------------------------------------------------------------------
# primitives


def grid_plane(size_x: float, size_y: float, nx: int = 1, ny: int = 1,
               uv_rect: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)) -> TriMesh:
    """Rectangle in the z=0 plane centred at the origin, normal +z.

    ``uv_rect = (u0, v0, u1, v1)`` maps x to u and y to v linearly.
    """
    xs = np.linspace(-size_x / 2, size_x / 2, nx + 1)
    ys = np.linspace(-size_y / 2, size_y / 2, ny + 1)
    gx, gy = np.meshgrid(xs, ys)
    verts = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    u0, v0, u1, v1 = uv_rect
    uv = np.stack([u0 + (gx.ravel() + size_x / 2) / size_x * (u1 - u0),
                   v0 + (gy.ravel() + size_y / 2) / size_y * (v1 - v0)], axis=1)
    faces = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            b, c, d = a + 1, a + nx + 1, a + nx + 2
            faces += [(a, b, d), (a, d, c)]
    faces = np.asarray(faces, dtype=np.int64)
    return TriMesh(verts, faces, uv[faces])


def uv_sphere(radius: float, n_lat: int = 24, n_lon: int = 48, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Latitude/longitude sphere with outward normals and equirectangular UVs.

    ``u`` follows longitude with the seam at the back (-z) and ``u = 0.5``
    facing +z; ``v`` runs from the south pole (0) to the north pole (1) along +y.
    """
    center = np.asarray(center, dtype=np.float64)
    verts = [center + [0.0, -radius, 0.0]]
    for i in range(1, n_lat):
        lat = -np.pi / 2 + np.pi * i / n_lat
        for j in range(n_lon):
            lon = -np.pi + 2 * np.pi * j / n_lon
            verts.append(center + radius * np.array(
                [np.cos(lat) * np.sin(lon), np.sin(lat), np.cos(lat) * np.cos(lon)]))
    verts.append(center + [0.0, radius, 0.0])
    verts = np.asarray(verts)
    south, north = 0, len(verts) - 1

    def vid(i: int, j: int) -> int:
        return 1 + (i - 1) * n_lon + (j % n_lon)

    faces, uvs = [], []
    for j in range(n_lon):
        u0, u1 = j / n_lon, (j + 1) / n_lon
        um = (u0 + u1) / 2
        v1 = 1 / n_lat
        faces.append((south, vid(1, j + 1), vid(1, j)))
        uvs.append([(um, 0.0), (u1, v1), (u0, v1)])
        for i in range(1, n_lat - 1):
            va, vb = i / n_lat, (i + 1) / n_lat
            a, b = vid(i, j), vid(i, j + 1)
            c, d = vid(i + 1, j), vid(i + 1, j + 1)
            faces.append((a, b, d))
            uvs.append([(u0, va), (u1, va), (u1, vb)])
            faces.append((a, d, c))
            uvs.append([(u0, va), (u1, vb), (u0, vb)])
        vt = (n_lat - 1) / n_lat
        faces.append((vid(n_lat - 1, j), vid(n_lat - 1, j + 1), north))
        uvs.append([(u0, vt), (u1, vt), (um, 1.0)])
    return TriMesh(verts, np.asarray(faces), np.asarray(uvs))


# --------------------------------------------------------------------------
# OBJ


def write_obj(path: str | Path, mesh: TriMesh, precision: int = 6) -> None:
    """Write ``v``, ``vt`` and ``f v/vt`` records (1-based indices)."""
    lines = [f"v {x:.{precision}f} {y:.{precision}f} {z:.{precision}f}" for x, y, z in mesh.vertices]
    if mesh.uvs is not None:
        flat = np.round(mesh.uvs.reshape(-1, 2), 9)
        uniq, inv = np.unique(flat, axis=0, return_inverse=True)
        inv = inv.reshape(-1, 3)
        lines += [f"vt {u:.9f} {v:.9f}" for u, v in uniq]
        lines += [f"f {a + 1}/{ta + 1} {b + 1}/{tb + 1} {c + 1}/{tc + 1}"
                  for (a, b, c), (ta, tb, tc) in zip(mesh.faces, inv)]
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_obj(path: str | Path) -> TriMesh:
    """Read vertices, texture coordinates and faces; polygons are fan-triangulated."""
    verts, texs, faces, face_uv = [], [], [], []
    any_uv = True
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        tag = parts[0]
        try:
            if tag == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif tag == "vt":
                texs.append([float(x) for x in parts[1:3]])
            elif tag == "f":
                idx, tidx = [], []
                for tok in parts[1:]:
                    fields = tok.split("/")
                    idx.append(_obj_index(int(fields[0]), len(verts)))
                    if len(fields) > 1 and fields[1]:
                        tidx.append(_obj_index(int(fields[1]), len(texs)))
                if len(idx) < 3:
                    raise ValueError("face with fewer than 3 vertices")
                if len(tidx) != len(idx):
                    any_uv = False
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
                    if len(tidx) == len(idx):
                        face_uv.append((tidx[0], tidx[k], tidx[k + 1]))
        except (ValueError, IndexError) as exc:
            raise ValidationError(f"{path}:{lineno}: malformed OBJ record {raw!r}: {exc}") from exc
    if not verts or not faces:
        raise ValidationError(f"{path}: OBJ has no vertices or faces")
    uvs = None
    if any_uv and face_uv and len(face_uv) == len(faces):
        uvs = np.asarray(texs)[np.asarray(face_uv)]
    return TriMesh(np.asarray(verts), np.asarray(faces), uvs)


def _obj_index(i: int, count: int) -> int:
    j = i - 1 if i > 0 else count + i
    if not 0 <= j < count:
        raise IndexError(f"index {i} out of range")
    return j
