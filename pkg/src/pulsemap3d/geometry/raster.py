"""Software rasterizer and ray queries.

Coverage uses pixel centres with an inclusive edge test; depth is the camera
z of the perspective-correct surface point. Back-facing triangles are culled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import LandmarkOffSurface, ValidationError
from .camera import CameraParams
from .mesh import TriMesh

NEAR_MM = 1e-6


@dataclass
class RasterResult:
    depth: np.ndarray  # (H, W) camera z in mm, inf where empty
    face_id: np.ndarray  # (H, W) int, -1 where empty
    bary: np.ndarray  # (H, W, 3) perspective-correct barycentrics

    @property
    def hit(self) -> np.ndarray:
        return self.face_id >= 0

    def surface_points(self, mesh: TriMesh) -> np.ndarray:
        """World positions of the surface seen at each pixel (NaN where empty)."""
        out = np.full(self.bary.shape, np.nan)
        m = self.hit
        corners = mesh.corners()[self.face_id[m]]
        out[m] = np.einsum("nk,nkd->nd", self.bary[m], corners)
        return out

    def surface_uvs(self, mesh: TriMesh) -> np.ndarray:
        uvs = mesh.require_uvs()
        out = np.full(self.bary.shape[:2] + (2,), np.nan)
        m = self.hit
        out[m] = np.einsum("nk,nkd->nd", self.bary[m], uvs[self.face_id[m]])
        return out


def rasterize(mesh: TriMesh, cam: CameraParams) -> RasterResult:
    H, W = cam.height, cam.width
    depth = np.full((H, W), np.inf)
    face_id = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    if mesh.n_faces == 0:
        return RasterResult(depth, face_id, bary)

    pc = cam.to_camera(mesh.vertices)
    tri = pc[mesh.faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    front = np.einsum("ij,ij->i", normals, tri[:, 0]) < 0
    in_front = (tri[:, :, 2] > NEAR_MM).all(axis=1)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        us = cam.fx * pc[:, 0] / z + cam.cx
        vs = cam.fy * pc[:, 1] / z + cam.cy

    for f in np.flatnonzero(front & in_front):
        i0, i1, i2 = mesh.faces[f]
        x0, x1, x2 = us[i0], us[i1], us[i2]
        y0, y1, y2 = vs[i0], vs[i1], vs[i2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0:
            continue
        c0 = max(int(np.ceil(min(x0, x1, x2))), 0)
        c1 = min(int(np.floor(max(x0, x1, x2))), W - 1)
        r0 = max(int(np.ceil(min(y0, y1, y2))), 0)
        r1 = min(int(np.floor(max(y0, y1, y2))), H - 1)
        if c0 > c1 or r0 > r1:
            continue
        px, py = np.meshgrid(np.arange(c0, c1 + 1, dtype=np.float64),
                             np.arange(r0, r1 + 1, dtype=np.float64))
        l0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
        l1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
        l2 = 1.0 - l0 - l1
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        w0, w1, w2 = l0 / z[i0], l1 / z[i1], l2 / z[i2]
        inv_z = w0 + w1 + w2
        zz = 1.0 / inv_z
        sub_depth = depth[r0:r1 + 1, c0:c1 + 1]
        win = inside & (zz < sub_depth)
        if not win.any():
            continue
        sub_depth[win] = zz[win]
        face_id[r0:r1 + 1, c0:c1 + 1][win] = f
        sub_bary = bary[r0:r1 + 1, c0:c1 + 1]
        sub_bary[win] = np.stack([w0[win], w1[win], w2[win]], axis=1) / inv_z[win][:, None]
    return RasterResult(depth, face_id, bary)


def ray_triangle(orig: np.ndarray, dirs: np.ndarray, tri: np.ndarray
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Moller-Trumbore intersection of rays with triangles (broadcast pairwise).

    Returns ``(t, b1, b2)`` along ``orig + t * dirs`` with barycentrics of
    corners 1 and 2; ``t`` is ``inf`` where the ray misses.
    """
    e1 = tri[..., 1, :] - tri[..., 0, :]
    e2 = tri[..., 2, :] - tri[..., 0, :]
    p = np.cross(dirs, e2)
    det = np.einsum("...i,...i->...", e1, p)
    ok = np.abs(det) > 1e-14 * np.linalg.norm(e1, axis=-1) * np.linalg.norm(e2, axis=-1) \
        * np.linalg.norm(dirs, axis=-1)
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = orig - tri[..., 0, :]
    b1 = np.einsum("...i,...i->...", s, p) * inv
    q = np.cross(s, e1)
    b2 = np.einsum("...i,...i->...", dirs, q) * inv
    t = np.einsum("...i,...i->...", e2, q) * inv
    hit = ok & (b1 >= 0) & (b2 >= 0) & (b1 + b2 <= 1)
    return np.where(hit, t, np.inf), b1, b2


@dataclass
class LandmarkHits:
    points: np.ndarray  # (n, 3) world mm, NaN where missing
    face_id: np.ndarray  # (n,) -1 where missing
    found: np.ndarray  # (n,) bool

    @property
    def missing(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(~self.found)]


def backproject_landmarks(lmk_2d: np.ndarray, raster: RasterResult, mesh: TriMesh,
                          cam: CameraParams, strict: bool = False) -> LandmarkHits:
    """Lift 2D landmarks onto the rendered surface.

    The camera ray through each landmark is intersected with the faces seen in
    the surrounding 3x3 pixels; the nearest intersection wins. Landmarks whose
    pixel shows background are reported missing, or raise
    :class:`LandmarkOffSurface` when ``strict``.
    """
    pts = np.asarray(lmk_2d, dtype=np.float64).reshape(-1, 2)
    H, W = raster.face_id.shape
    n = len(pts)
    out = np.full((n, 3), np.nan)
    fids = np.full(n, -1, dtype=np.int64)
    origin = cam.center
    corners = mesh.corners()
    for i, (x, y) in enumerate(pts):
        if not (np.isfinite(x) and np.isfinite(y)):
            continue
        c, r = int(np.floor(x + 0.5)), int(np.floor(y + 0.5))
        if not (0 <= r < H and 0 <= c < W) or raster.face_id[r, c] < 0:
            continue
        cand = np.unique(raster.face_id[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2])
        cand = cand[cand >= 0]
        d = cam.pixel_rays(np.array(x), np.array(y))
        t, b1, b2 = ray_triangle(origin, d[None, :], corners[cand])
        j = int(np.argmin(t))
        if np.isfinite(t[j]):
            f = cand[j]
            b = np.array([1 - b1[j] - b2[j], b1[j], b2[j]])
        else:
            # ray grazes an edge between candidates: fall back to the pixel's
            # own face with clamped barycentrics
            f = raster.face_id[r, c]
            _, bb1, bb2 = ray_triangle(origin, d[None, :], corners[f][None])
            b = np.clip(np.array([1 - bb1[0] - bb2[0], bb1[0], bb2[0]]), 0, None)
            b /= b.sum()
        out[i] = b @ corners[f]
        fids[i] = f
    found = fids >= 0
    if strict and not found.all():
        raise LandmarkOffSurface(f"landmarks off surface: {np.flatnonzero(~found).tolist()}")
    return LandmarkHits(out, fids, found)


def check_map_shape(arr: np.ndarray, cam: CameraParams) -> None:
    if arr.shape[:2] != (cam.height, cam.width):
        raise ValidationError(f"map shape {arr.shape[:2]} != camera {(cam.height, cam.width)}")
