"""Independent reference implementations used as test oracles.

These are deliberately slow and direct: explicit loops or dense sums, with
no code shared with the package beyond data containers.
"""

from __future__ import annotations

import numpy as np


def brute_snr_db(x: np.ndarray, fs: float, hr_hz: float, pad_factor: int = 4) -> float:
    """Pulse SNR from an explicit DFT sum evaluated bin by bin.

    Signal bins lie within 6 BPM of ``hr_hz`` or 12 BPM of its harmonic;
    both sums run over 30-200 BPM plus its first harmonic.
    """
    n = x.size
    nfft = pad_factor * 2 ** int(np.ceil(np.log2(n)))
    xc = x - x.mean()
    t = np.arange(n)
    num = den = 0.0
    for j in range(nfft // 2 + 1):
        f = j * fs / nfft
        if not (0.5 <= f <= 200 / 60 or 1.0 <= f <= 400 / 60):
            continue
        X = np.sum(xc * np.exp(-2j * np.pi * j * t / nfft))
        p = X.real ** 2 + X.imag ** 2
        if abs(f - hr_hz) * 60 <= 6 + 1e-7 or abs(f - 2 * hr_hz) * 60 <= 12 + 1e-7:
            num += p
        else:
            den += p
    return 10 * np.log10(num / den)


def _segment_hits(origin, d, tri):
    """Moller-Trumbore for one ray against many triangles; ray parameter t."""
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    out = np.full(len(tri), np.inf)
    for i in range(len(tri)):
        p = np.cross(d, e2[i])
        det = e1[i] @ p
        if abs(det) < 1e-14 * np.linalg.norm(e1[i]) * np.linalg.norm(e2[i]) * np.linalg.norm(d):
            continue
        s = origin - tri[i, 0]
        b1 = (s @ p) / det
        q = np.cross(s, e1[i])
        b2 = (d @ q) / det
        if b1 < 0 or b2 < 0 or b1 + b2 > 1:
            continue
        out[i] = (e2[i] @ q) / det
    return out


def brute_visibility(vertices, faces, K, world_to_cam, width, height,
                     points, face_ids, eps) -> np.ndarray:
    """Per-point visibility by casting a ray against every triangle.

    A point is visible when it projects into the image, its own face faces
    the camera, and no other face crosses the camera-to-point segment more
    than ``eps`` before the point.
    """
    R, t = world_to_cam[:3, :3], world_to_cam[:3, 3]
    origin = -R.T @ t
    tri = vertices[faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    out = np.zeros(len(points), dtype=bool)
    others = np.ones(len(faces), dtype=bool)
    for i, (p, f) in enumerate(zip(points, face_ids)):
        pc = R @ p + t
        if pc[2] <= 0:
            continue
        u = K[0, 0] * pc[0] / pc[2] + K[0, 2]
        v = K[1, 1] * pc[1] / pc[2] + K[1, 2]
        col, row = np.floor(u + 0.5), np.floor(v + 0.5)
        if not (0 <= col < width and 0 <= row < height):
            continue
        d = p - origin
        if normals[f] @ d >= 0:
            continue
        dist = np.linalg.norm(d)
        others[:] = True
        others[f] = False
        hits = _segment_hits(origin, d, tri[others])
        out[i] = not np.any((hits > 0) & (hits * dist < dist - eps))
    return out


def closest_point_triangle(p, a, b, c):
    """Closest point on triangle ``abc`` to ``p``: interior projection when it
    lands inside, otherwise the best of the three clamped edge projections."""
    n = np.cross(b - a, c - a)
    n2 = n @ n
    q = p - ((p - a) @ n) / n2 * n
    # barycentrics of the in-plane projection
    w_a = np.cross(c - b, q - b) @ n / n2
    w_b = np.cross(a - c, q - c) @ n / n2
    w_c = 1.0 - w_a - w_b
    if w_a >= 0 and w_b >= 0 and w_c >= 0:
        return q
    best, best_d = None, np.inf
    for s, e in ((a, b), (b, c), (c, a)):
        t = np.clip((p - s) @ (e - s) / ((e - s) @ (e - s)), 0.0, 1.0)
        x = s + t * (e - s)
        d = np.linalg.norm(p - x)
        if d < best_d:
            best, best_d = x, d
    return best


def brute_point_to_mesh(points, vertices, faces) -> np.ndarray:
    """Distance from each point to the nearest triangle, checking all faces."""
    tri = vertices[faces]
    out = np.empty(len(points))
    for i, p in enumerate(points):
        out[i] = min(np.linalg.norm(p - closest_point_triangle(p, *t)) for t in tri)
    return out


def dense_lbs(mean, S, E, joints, parents, weights, beta, theta, psi, rotvec_to_matrix):
    """Posed vertices by an explicit per-vertex loop over joint matrices."""
    rest = (mean.ravel() + S @ beta + E @ psi).reshape(-1, 3)
    nj = len(joints)
    G = []
    for j in range(nj):
        L = np.eye(4)
        L[:3, :3] = rotvec_to_matrix(theta[3 * j:3 * j + 3])
        L[:3, 3] = joints[j] - L[:3, :3] @ joints[j]
        G.append(L if parents[j] < 0 else G[parents[j]] @ L)
    out = np.zeros_like(rest)
    for v in range(len(rest)):
        A = sum(weights[v, j] * G[j] for j in range(nj))
        out[v] = A[:3, :3] @ rest[v] + A[:3, 3]
    return out
