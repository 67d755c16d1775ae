"""UV texture space: texel lookup, visibility, multi-view baking and reprojection.

Texel ``(row r, col c)`` of an ``R x R`` texture has its centre at
``u = (c + 0.5) / R``, ``v = (r + 0.5) / R``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import SemanticMismatch, ValidationError
from ..pulsemaps import PHASE_MAPS, wrap_phase
from .camera import CameraParams
from .mesh import TriMesh
from .raster import RasterResult, check_map_shape, rasterize, ray_triangle

DEFAULT_RESOLUTION = 512
DEPTH_EPS_REL = 1e-3
TILE_PX = 8
WEIGHTINGS = ("cosine", "uniform")


# --------------------------------------------------------------------------
# texel lookup


@dataclass
class TexelLookup:
    """Surface point behind every texel covered by the UV layout."""

    resolution: int
    face_id: np.ndarray  # (R, R), -1 where no face covers the texel
    bary: np.ndarray  # (R, R, 3)
    points: np.ndarray  # (R, R, 3) world mm, NaN where uncovered

    @property
    def covered(self) -> np.ndarray:
        return self.face_id >= 0


def uv_lookup(mesh: TriMesh, resolution: int = DEFAULT_RESOLUTION) -> TexelLookup:
    """Rasterize the UV layout; where UV triangles overlap the first face wins."""
    uvs = mesh.require_uvs()
    R = int(resolution)
    if R < 1:
        raise ValidationError("texture resolution must be positive")
    face_id = np.full((R, R), -1, dtype=np.int64)
    bary = np.zeros((R, R, 3))
    tx = uvs[..., 0] * R - 0.5
    ty = uvs[..., 1] * R - 0.5
    for f in range(mesh.n_faces):
        x0, x1, x2 = tx[f]
        y0, y1, y2 = ty[f]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0:
            continue
        c0 = max(int(np.ceil(min(x0, x1, x2))), 0)
        c1 = min(int(np.floor(max(x0, x1, x2))), R - 1)
        r0 = max(int(np.ceil(min(y0, y1, y2))), 0)
        r1 = min(int(np.floor(max(y0, y1, y2))), R - 1)
        if c0 > c1 or r0 > r1:
            continue
        px, py = np.meshgrid(np.arange(c0, c1 + 1, dtype=np.float64),
                             np.arange(r0, r1 + 1, dtype=np.float64))
        l0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
        l1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
        l2 = 1.0 - l0 - l1
        sub = face_id[r0:r1 + 1, c0:c1 + 1]
        take = (l0 >= 0) & (l1 >= 0) & (l2 >= 0) & (sub < 0)
        if take.any():
            sub[take] = f
            bary[r0:r1 + 1, c0:c1 + 1][take] = np.stack([l0[take], l1[take], l2[take]], axis=1)
    points = np.full((R, R, 3), np.nan)
    m = face_id >= 0
    points[m] = np.einsum("nk,nkd->nd", bary[m], mesh.corners()[face_id[m]])
    return TexelLookup(R, face_id, bary, points)


# --------------------------------------------------------------------------
# texture container


@dataclass
class UvTextureMap:
    """Accumulated per-texel estimate.

    Scalar maps accumulate ``sum(w * value)``; phase maps accumulate weighted
    unit phasors so that the value is their circular mean and ``confidence``
    the mean phasor magnitude. ``phase_average="arithmetic"`` accumulates phase
    values linearly instead.
    """

    resolution: int
    semantic: str
    acc: np.ndarray
    weight_sum: np.ndarray
    n_views: np.ndarray
    is_phase: bool = False
    phase_average: str = "circular"
    meta: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, resolution: int, semantic: str, is_phase: bool | None = None,
              phase_average: str = "circular") -> "UvTextureMap":
        if is_phase is None:
            is_phase = semantic in PHASE_MAPS
        if phase_average not in ("circular", "arithmetic"):
            raise ValidationError(f"unknown phase_average {phase_average!r}")
        R = int(resolution)
        phasor = is_phase and phase_average == "circular"
        acc = np.zeros((R, R), dtype=np.complex128 if phasor else np.float64)
        return cls(R, semantic, acc, np.zeros((R, R)), np.zeros((R, R), dtype=np.int32),
                   is_phase, phase_average)

    @classmethod
    def from_arrays(cls, value: np.ndarray, weight_sum: np.ndarray, n_views: np.ndarray,
                    semantic: str, is_phase: bool | None = None,
                    confidence: np.ndarray | None = None,
                    phase_average: str = "circular") -> "UvTextureMap":
        """Rebuild a texture from its stored value / weight / count arrays."""
        value = np.asarray(value, dtype=np.float64)
        tex = cls.empty(value.shape[0], semantic, is_phase, phase_average)
        w = np.asarray(weight_sum, dtype=np.float64)
        n = np.asarray(n_views, dtype=np.int32)
        if value.shape != (tex.resolution, tex.resolution) or w.shape != value.shape \
                or n.shape != value.shape:
            raise ValidationError("texture arrays must be square and share one shape")
        ok = (n > 0) & np.isfinite(value)
        v = np.where(ok, value, 0.0)
        if np.iscomplexobj(tex.acc):
            conf = np.ones_like(v) if confidence is None else np.nan_to_num(confidence)
            tex.acc = np.where(ok, conf * w * np.exp(1j * v), 0)
        else:
            tex.acc = np.where(ok, w * v, 0.0)
        tex.weight_sum = np.where(ok, w, 0.0)
        tex.n_views = np.where(ok, n, 0).astype(np.int32)
        return tex

    @property
    def valid(self) -> np.ndarray:
        return (self.n_views > 0) & (self.weight_sum > 0)

    @property
    def value(self) -> np.ndarray:
        v = np.full(self.acc.shape, np.nan)
        m = self.valid
        if np.iscomplexobj(self.acc):
            v[m] = wrap_phase(np.angle(self.acc[m]))
        else:
            v[m] = self.acc[m] / self.weight_sum[m]
        return v

    @property
    def confidence(self) -> np.ndarray:
        """Mean phasor magnitude for circular phase maps, 1 elsewhere (NaN if empty)."""
        c = np.full(self.acc.shape, np.nan)
        m = self.valid
        if np.iscomplexobj(self.acc):
            c[m] = np.abs(self.acc[m]) / self.weight_sum[m]
        else:
            c[m] = 1.0
        return c

    def copy(self) -> "UvTextureMap":
        return UvTextureMap(self.resolution, self.semantic, self.acc.copy(),
                            self.weight_sum.copy(), self.n_views.copy(), self.is_phase,
                            self.phase_average, dict(self.meta))


# --------------------------------------------------------------------------
# visibility


class VisibilityIndex:
    """Screen-space tile grid over a mesh's faces for one camera.

    A point is visible when its own face is front-facing and no other face
    intersects the segment from the camera centre to within ``eps`` of it.
    """

    def __init__(self, mesh: TriMesh, cam: CameraParams, eps: float, tile: int = TILE_PX):
        self.mesh, self.cam, self.eps, self.tile = mesh, cam, float(eps), int(tile)
        self.corners = mesh.corners()
        self.normals = mesh.face_normals()
        self.origin = cam.center
        self.nx = -(-cam.width // self.tile)
        self.ny = -(-cam.height // self.tile)
        u, v, z = cam.project(mesh.vertices)
        fu, fv, fz = u[mesh.faces], v[mesh.faces], z[mesh.faces]
        behind = (fz <= 0).any(axis=1)
        margin = 1e-6
        c0 = np.floor((fu.min(1) - margin) / self.tile)
        c1 = np.floor((fu.max(1) + margin) / self.tile)
        r0 = np.floor((fv.min(1) - margin) / self.tile)
        r1 = np.floor((fv.max(1) + margin) / self.tile)
        c0 = np.where(behind, 0, np.clip(c0, 0, self.nx - 1))
        c1 = np.where(behind, self.nx - 1, np.clip(c1, -1, self.nx - 1))
        r0 = np.where(behind, 0, np.clip(r0, 0, self.ny - 1))
        r1 = np.where(behind, self.ny - 1, np.clip(r1, -1, self.ny - 1))
        wc = np.maximum(c1 - c0 + 1, 0).astype(np.int64)
        wr = np.maximum(r1 - r0 + 1, 0).astype(np.int64)
        counts = wc * wr
        faces = np.repeat(np.arange(mesh.n_faces), counts)
        start = np.repeat(np.cumsum(counts) - counts, counts)
        local = np.arange(counts.sum()) - start
        wcf = np.repeat(wc, counts)
        tr = np.repeat(r0.astype(np.int64), counts) + local // np.maximum(wcf, 1)
        tc = np.repeat(c0.astype(np.int64), counts) + local % np.maximum(wcf, 1)
        tile_id = tr * self.nx + tc
        order = np.lexsort((faces, tile_id))
        self.tile_faces = faces[order]
        self.tile_ptr = np.searchsorted(tile_id[order], np.arange(self.nx * self.ny + 1))

    def visible(self, points: np.ndarray, face_ids: np.ndarray, chunk: int = 4096) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        fid = np.asarray(face_ids, dtype=np.int64).ravel()
        out = np.zeros(len(pts), dtype=bool)
        for s in range(0, len(pts), chunk):
            out[s:s + chunk] = self._visible_chunk(pts[s:s + chunk], fid[s:s + chunk])
        return out

    def _visible_chunk(self, pts: np.ndarray, fid: np.ndarray) -> np.ndarray:
        cam = self.cam
        d = pts - self.origin
        dist = np.linalg.norm(d, axis=1)
        facing = np.einsum("ij,ij->i", self.normals[fid], d) < 0
        u, v, z = cam.project(pts)
        col = np.floor(u + 0.5)
        row = np.floor(v + 0.5)
        on = facing & (z > 0) & (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
        idx = np.flatnonzero(on)
        if idx.size == 0:
            return on
        tiles = (np.floor(v[idx] / self.tile).clip(0, self.ny - 1).astype(np.int64) * self.nx
                 + np.floor(u[idx] / self.tile).clip(0, self.nx - 1).astype(np.int64))
        lo, hi = self.tile_ptr[tiles], self.tile_ptr[tiles + 1]
        n = hi - lo
        which = np.repeat(np.arange(idx.size), n)
        offs = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
        cand = self.tile_faces[np.repeat(lo, n) + offs]
        p = idx[which]
        keep = cand != fid[p]
        which, cand, p = which[keep], cand[keep], p[keep]
        blocked = occluded(self.origin, d[p], dist[p], self.corners[cand], self.eps)
        hit = np.zeros(idx.size, dtype=bool)
        np.logical_or.at(hit, which[blocked], True)
        on[idx[hit]] = False
        return on


def occluded(origin: np.ndarray, d: np.ndarray, dist: np.ndarray, tri: np.ndarray,
             eps: float) -> np.ndarray:
    """True where the triangle crosses the ray ``origin + t*d`` more than ``eps``
    mm in front of the end point ``origin + d`` (``dist = |d|``)."""
    t, _, _ = ray_triangle(origin, d, tri)
    return (t > 0) & (t * dist < dist - eps)


def depth_eps(mesh: TriMesh) -> float:
    return DEPTH_EPS_REL * mesh.bbox_diagonal()


def texel_visibility(mesh: TriMesh, cam: CameraParams, lookup: TexelLookup,
                     eps: float | None = None) -> np.ndarray:
    """Visibility of every covered texel's surface point from ``cam``, ``(R, R)``."""
    eps = depth_eps(mesh) if eps is None else eps
    vis = np.zeros(lookup.face_id.shape, dtype=bool)
    m = lookup.covered
    vis[m] = VisibilityIndex(mesh, cam, eps).visible(lookup.points[m], lookup.face_id[m])
    return vis


# --------------------------------------------------------------------------
# baking and reprojection


@dataclass
class ViewSampling:
    """Texels visible from one camera with their source pixel and weight."""

    texels: np.ndarray  # flat texel indices
    row: np.ndarray
    col: np.ndarray
    cos: np.ndarray  # incidence cosine, > 0


def plan_view(mesh: TriMesh, cam: CameraParams, lookup: TexelLookup,
              eps: float | None = None, workers: int = 1) -> ViewSampling:
    """Visibility and nearest-pixel sampling for every texel seen by ``cam``."""
    eps = depth_eps(mesh) if eps is None else float(eps)
    texels = np.flatnonzero(lookup.covered.ravel())
    pts = lookup.points.reshape(-1, 3)[texels]
    fids = lookup.face_id.ravel()[texels]
    index = VisibilityIndex(mesh, cam, eps)
    chunk = 8192
    starts = list(range(0, len(texels), chunk))

    def run(s: int) -> np.ndarray:
        return index.visible(pts[s:s + chunk], fids[s:s + chunk])

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    vis = np.concatenate(parts) if parts else np.zeros(0, dtype=bool)
    sel = np.flatnonzero(vis)
    u, v, _ = cam.project(pts[sel])
    d = cam.center - pts[sel]
    cos = np.einsum("ij,ij->i", mesh.face_normals()[fids[sel]], d) / np.linalg.norm(d, axis=1)
    keep = cos > 0
    return ViewSampling(texels[sel][keep], np.floor(v + 0.5).astype(np.int64)[keep],
                        np.floor(u + 0.5).astype(np.int64)[keep], cos[keep])


def bake_view(map2d: np.ndarray, mesh: TriMesh, cam: CameraParams, tex: UvTextureMap,
              lookup: TexelLookup | None = None, weighting: str = "cosine",
              eps: float | None = None, valid: np.ndarray | None = None,
              plan: ViewSampling | None = None, workers: int = 1) -> UvTextureMap:
    """Accumulate one view's 2D map into a copy of ``tex``.

    Each visible texel samples the map at the nearest pixel of its projection
    and adds it with weight ``cos`` of the angle between the surface normal and
    the direction to the camera (or 1 with ``weighting="uniform"``). Pixels
    that are NaN, or false in ``valid``, contribute nothing.
    """
    mesh.require_uvs()
    if weighting not in WEIGHTINGS:
        raise ValidationError(f"weighting must be one of {WEIGHTINGS}")
    map2d = np.asarray(map2d, dtype=np.float64)
    check_map_shape(map2d, cam)
    if plan is None:
        if lookup is None:
            lookup = uv_lookup(mesh, tex.resolution)
        if lookup.resolution != tex.resolution:
            raise ValidationError("texel lookup and texture resolutions differ")
        plan = plan_view(mesh, cam, lookup, eps, workers)
    ok_px = np.isfinite(map2d) if valid is None else (np.asarray(valid, bool) & np.isfinite(map2d))
    good = ok_px[plan.row, plan.col]
    t = plan.texels[good]
    vals = map2d[plan.row[good], plan.col[good]]
    w = plan.cos[good] if weighting == "cosine" else np.ones(t.size)

    out = tex.copy()
    acc = out.acc.reshape(-1)
    if np.iscomplexobj(acc):
        acc[t] += w * np.exp(1j * vals)
    else:
        acc[t] += w * vals
    out.weight_sum.reshape(-1)[t] += w
    out.n_views.reshape(-1)[t] += 1
    return out


def bake_views(maps: list[np.ndarray], mesh: TriMesh, cams: list[CameraParams],
               semantic: str, resolution: int = DEFAULT_RESOLUTION, weighting: str = "cosine",
               phase_average: str = "circular", lookup: TexelLookup | None = None,
               workers: int = 1) -> UvTextureMap:
    """Bake a list of per-view maps in the given view order."""
    if len(maps) != len(cams):
        raise ValidationError("need one map per camera")
    tex = UvTextureMap.empty(resolution, semantic, phase_average=phase_average)
    lookup = uv_lookup(mesh, resolution) if lookup is None else lookup
    for m, cam in zip(maps, cams):
        plan = plan_view(mesh, cam, lookup, workers=workers)
        tex = bake_view(m, mesh, cam, tex, weighting=weighting, plan=plan)
    return tex


def sample_bilinear(values: np.ndarray, uv: np.ndarray, is_phase: bool = False) -> np.ndarray:
    """NaN-aware bilinear lookup; NaN texels are dropped and weights renormalised."""
    R = values.shape[0]
    x = uv[..., 0] * R - 0.5
    y = uv[..., 1] * R - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx, fy = x - x0, y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    num = np.zeros(x.shape, dtype=np.complex128 if is_phase else np.float64)
    den = np.zeros(x.shape)
    for dy, dx, w in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                      (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy, xx = y0 + dy, x0 + dx
        inb = (yy >= 0) & (yy < R) & (xx >= 0) & (xx < R)
        val = np.full(x.shape, np.nan)
        val[inb] = values[yy[inb], xx[inb]]
        ok = inb & np.isfinite(val) & (w > 0)
        wv = np.where(ok, w, 0.0)
        vv = np.where(ok, val, 0.0)
        num += wv * (np.exp(1j * vv) if is_phase else vv)
        den += wv
    out = np.full(x.shape, np.nan)
    m = den > 0
    if is_phase:
        out[m] = wrap_phase(np.angle(num[m]))
    else:
        out[m] = num[m].real / den[m] if np.iscomplexobj(num) else num[m] / den[m]
    return out


def reproject(tex: UvTextureMap, mesh: TriMesh, cam: CameraParams,
              raster: RasterResult | None = None) -> np.ndarray:
    """Render a texture into ``cam``; pixels off the mesh or on empty texels are NaN."""
    raster = rasterize(mesh, cam) if raster is None else raster
    out = np.full((cam.height, cam.width), np.nan)
    m = raster.hit
    if not m.any():
        return out
    uv = raster.surface_uvs(mesh)[m]
    out[m] = sample_bilinear(tex.value, uv, is_phase=tex.is_phase)
    return out


def check_compatible(textures: list[UvTextureMap]) -> None:
    if not textures:
        raise ValidationError("no textures")
    sem, res = textures[0].semantic, textures[0].resolution
    for t in textures[1:]:
        if t.semantic != sem:
            raise SemanticMismatch(f"semantic {t.semantic!r} != {sem!r}")
        if t.resolution != res:
            raise ValidationError(f"resolution {t.resolution} != {res}")


# --------------------------------------------------------------------------
# previews

PREVIEW_RANGES = {"snr": (0.0, 10.0)}


def preview_rgb(values: np.ndarray, semantic: str) -> np.ndarray:
    """8-bit BGR preview with fixed colour scales (SNR 0-10 dB, phase cyclic
    over -pi..pi, otherwise the finite min..max); NaN is black."""
    import cv2

    values = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(values)
    base = semantic[3:] if semantic.startswith("gt_") else semantic
    if base in PHASE_MAPS or base.startswith("phase"):
        lo, hi, cmap = -np.pi, np.pi, cv2.COLORMAP_TWILIGHT
    elif base in PREVIEW_RANGES:
        (lo, hi), cmap = PREVIEW_RANGES[base], cv2.COLORMAP_VIRIDIS
    else:
        lo = float(values[finite].min()) if finite.any() else 0.0
        hi = float(values[finite].max()) if finite.any() else 1.0
        cmap = cv2.COLORMAP_VIRIDIS
    span = hi - lo if hi > lo else 1.0
    scaled = np.clip((np.where(finite, values, lo) - lo) / span, 0, 1)
    img = cv2.applyColorMap(np.round(scaled * 255).astype(np.uint8), cmap)
    img[~finite] = 0
    return img
