"""A procedural head model in the generic model format.

The mean is a deformed sphere (ellipsoidal skull, nose, eye sockets, a narrowing
neck); shape modes are axis scalings plus smooth radial fields, expression
modes are localised radial bumps, and a three-joint skeleton (root, neck, jaw)
drives linear blend skinning. Landmarks follow the 68-point annotation layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry.mesh import uv_sphere
from .model import MorphableModel

HEAD_RADII_MM = (75.0, 100.0, 95.0)
CROWN_LAT_DEG = 40.0


def _smoothstep(x: np.ndarray, a: float, b: float) -> np.ndarray:
    t = np.clip((x - a) / (b - a), 0, 1)
    return t * t * (3 - 2 * t)


def _bump(lat, lon, lat0, lon0, s_lat, s_lon):
    dlon = np.angle(np.exp(1j * (lon - lon0)))
    return np.exp(-0.5 * (((lat - lat0) / s_lat) ** 2 + (dlon / s_lon) ** 2))


def landmark_angles() -> np.ndarray:
    """(lat, lon) in degrees of the 68 landmarks on the unit head sphere."""
    pts = []
    for t in np.linspace(0, 1, 17):  # jaw line, right to left
        pts.append((-18 - 27 * np.sin(np.pi * t), -68 + 136 * t))
    for side in (-1, 1):  # brows
        lons = np.linspace(-44, -12, 5) if side < 0 else np.linspace(12, 44, 5)
        for lon in lons:
            pts.append((22 + 4 * np.cos((abs(lon) - 28) / 16 * np.pi / 2), lon))
    for lat in (15, 9, 3, -3):  # nose bridge
        pts.append((lat, 0.0))
    for lon in np.linspace(-10, 10, 5):  # nostrils
        pts.append((-10 + 0.08 * abs(lon), lon))
    for c in (-28.0, 28.0):  # eyes
        for a in np.linspace(0, 2 * np.pi, 7)[:-1]:
            pts.append((10 + 3.5 * np.sin(a), c - 9 * np.cos(a) * np.sign(c or 1)))
    for a in np.linspace(0, 2 * np.pi, 13)[:-1]:  # outer lips
        pts.append((-26 + 6 * np.sin(a), -17 * np.cos(a)))
    for a in np.linspace(0, 2 * np.pi, 9)[:-1]:  # inner lips
        pts.append((-26 + 2.5 * np.sin(a), -10 * np.cos(a)))
    return np.asarray(pts)


@dataclass
class SyntheticHead:
    model: MorphableModel
    lat: np.ndarray  # per-vertex latitude on the parameter sphere (rad)
    lon: np.ndarray  # per-vertex longitude, 0 facing +z (rad)

    @property
    def face_region(self) -> np.ndarray:
        """Facial skin vertices (front of the head between chin and forehead)."""
        return (np.abs(self.lon) < np.deg2rad(70)) & (self.lat > np.deg2rad(-45)) \
            & (self.lat < np.deg2rad(45))

    @property
    def neck_region(self) -> np.ndarray:
        return self.lat < np.deg2rad(-58)

    @property
    def skin_region(self) -> np.ndarray:
        return self.face_region | self.neck_region

    @property
    def below_crown(self) -> np.ndarray:
        """Vertices below 40 degrees latitude. The crown is only ever seen at
        grazing angles by a horizontal camera arc."""
        return self.lat <= np.deg2rad(CROWN_LAT_DEG)


def synthetic_head(n_lat: int = 40, n_lon: int = 80, n_beta: int = 10, n_psi: int = 6,
                   seed: int = 7) -> SyntheticHead:
    base = uv_sphere(1.0, n_lat, n_lon)
    p = base.vertices
    lat = np.arcsin(np.clip(p[:, 1], -1, 1))
    lon = np.arctan2(p[:, 0], p[:, 2])
    a, b, c = HEAD_RADII_MM
    neck = _smoothstep(-lat, np.deg2rad(30), np.deg2rad(65))
    shrink = 1 - 0.38 * neck
    stretch = 1 + 0.35 * neck
    radial = (18 * _bump(lat, lon, np.deg2rad(-4), 0, np.deg2rad(12), np.deg2rad(9))
              - 7 * _bump(lat, lon, np.deg2rad(10), np.deg2rad(-28), np.deg2rad(6), np.deg2rad(9))
              - 7 * _bump(lat, lon, np.deg2rad(10), np.deg2rad(28), np.deg2rad(6), np.deg2rad(9))
              + 6 * _bump(lat, lon, np.deg2rad(-42), 0, np.deg2rad(8), np.deg2rad(18)))
    n = p / np.linalg.norm(p, axis=1, keepdims=True)
    mean = np.stack([a * p[:, 0] * shrink, b * p[:, 1] * stretch, c * p[:, 2] * shrink], axis=1)
    mean += radial[:, None] * n

    nv = len(mean)
    rng = np.random.default_rng(seed)
    modes = [np.stack([mean[:, 0] * 0.06, np.zeros(nv), np.zeros(nv)], 1),
             np.stack([np.zeros(nv), mean[:, 1] * 0.06, np.zeros(nv)], 1),
             np.stack([np.zeros(nv), np.zeros(nv), mean[:, 2] * 0.06], 1)]
    harmonics = [np.sin(lat), np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon),
                 1.5 * np.sin(lat) ** 2 - 0.5, np.sin(lat) * np.cos(lat) * np.cos(lon),
                 np.cos(lat) ** 2 * np.cos(2 * lon), np.sin(lat) * np.cos(lat) * np.sin(lon)]
    for h in harmonics:
        modes.append(3.0 * h[:, None] * n)
    while len(modes) < n_beta:
        k1, k2 = rng.integers(1, 4, size=2)
        modes.append(2.0 * (np.cos(k1 * lat) * np.cos(k2 * lon + rng.uniform(0, np.pi)))[:, None] * n)
    S = np.stack([m.ravel() for m in modes[:n_beta]], axis=1)

    centers = [(-26, 0, 8, 20), (-10, -35, 10, 12), (-10, 35, 10, 12),
               (22, -25, 6, 12), (22, 25, 6, 12), (-40, 0, 8, 25)]
    ex = []
    for k in range(n_psi):
        la, lo, sla, slo = centers[k % len(centers)]
        amp = 2.0 if k < len(centers) else 1.0
        ex.append((amp * _bump(lat, lon, np.deg2rad(la), np.deg2rad(lo), np.deg2rad(sla),
                               np.deg2rad(slo)))[:, None] * n)
    E = np.stack([m.ravel() for m in ex], axis=1) if ex else np.zeros((3 * nv, 0))

    joints = np.array([[0.0, 0.0, 0.0], [0.0, -70.0, -10.0], [0.0, -30.0, 25.0]])
    parents = np.array([-1, 0, 1])
    w_root = _smoothstep(-lat, np.deg2rad(55), np.deg2rad(75))
    front = _smoothstep(np.cos(lon), 0.2, 0.7)
    w_jaw = (1 - w_root) * front * _smoothstep(-lat, np.deg2rad(12), np.deg2rad(30))
    w_neck = 1 - w_root - w_jaw
    W = np.stack([w_root, w_neck, w_jaw], axis=1)

    ang = np.deg2rad(landmark_angles())
    cos_d = (np.sin(ang[:, 0])[:, None] * np.sin(lat)[None]
             + np.cos(ang[:, 0])[:, None] * np.cos(lat)[None] * np.cos(ang[:, 1][:, None] - lon[None]))
    order = np.argsort(-cos_d, axis=1)
    used: set[int] = set()
    lmk = []
    for row in order:
        for vid in row:
            if int(vid) not in used:
                used.add(int(vid))
                lmk.append(int(vid))
                break
    model = MorphableModel(mean, S, E, base.faces, joints, parents, W, np.asarray(lmk), base.uvs,
                           meta={"kind": "synthetic_head", "n_lat": n_lat, "n_lon": n_lon,
                                 "seed": seed})
    return SyntheticHead(model, lat, lon)
