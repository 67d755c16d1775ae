"""Closed-form similarity alignment of corresponding point sets."""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateConfiguration, ValidationError


def rigid_align(src: np.ndarray, dst: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Similarity ``(s, R, T)`` minimising ``sum |s R x + T - y|^2`` (Umeyama).

    Raises:
        DegenerateConfiguration: fewer than 3 points, or points (nearly)
            collinear or coincident.
    """
    x = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if x.shape != y.shape:
        raise ValidationError(f"shape mismatch {x.shape} vs {y.shape}")
    if len(x) < 3:
        raise DegenerateConfiguration("need at least 3 correspondences")
    finite = np.all(np.isfinite(x), axis=1) & np.all(np.isfinite(y), axis=1)
    x, y = x[finite], y[finite]
    if len(x) < 3:
        raise DegenerateConfiguration("fewer than 3 finite correspondences")
    mx, my = x.mean(0), y.mean(0)
    xc, yc = x - mx, y - my
    sx = np.linalg.svd(xc, compute_uv=False)
    sy = np.linalg.svd(yc, compute_uv=False)
    tol = 1e-9 * max(sx[0], 1e-300)
    if sx[0] <= 1e-12 or sx[1] <= tol or sy[1] <= 1e-9 * max(sy[0], 1e-300):
        raise DegenerateConfiguration("points are collinear or coincident")
    cov = yc.T @ xc / len(x)
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1
    R = U @ D @ Vt
    var_x = (xc ** 2).sum() / len(x)
    s = float(np.trace(np.diag(S) @ D) / var_x)
    T = my - s * R @ mx
    return s, R, T
