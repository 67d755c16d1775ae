"""Pinhole cameras (OpenCV convention: x right, y down, z forward)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError


@dataclass(frozen=True)
class CameraParams:
    """Intrinsics in pixels plus a 4x4 world-to-camera rigid transform.

    Pixel ``(row i, col j)`` has its centre at image coordinates ``(u=j, v=i)``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray
    view_id: int = 0

    def __post_init__(self) -> None:
        m = np.asarray(self.world_to_cam, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValidationError("world_to_cam must be 4x4")
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValidationError("image size must be positive")
        r = m[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-8 or np.linalg.det(r) < 0:
            raise ValidationError("world_to_cam rotation block is not a proper rotation")
        if np.abs(m[3] - [0, 0, 0, 1]).max() > 1e-12:
            raise ValidationError("world_to_cam last row must be [0, 0, 0, 1]")
        object.__setattr__(self, "world_to_cam", m)

    @property
    def R(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.R.T @ self.t

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Image coordinates ``(u, v)`` and camera depth ``z`` of world points."""
        pc = self.to_camera(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[..., 0] / z + self.cx
            v = self.fy * pc[..., 1] / z + self.cy
        return u, v, z

    def pixel_rays(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """World-space (unnormalised) ray directions through image points."""
        d = np.stack([(np.asarray(u) - self.cx) / self.fx,
                      (np.asarray(v) - self.cy) / self.fy,
                      np.ones(np.shape(u))], axis=-1)
        return d @ self.R

    def to_dict(self) -> dict:
        return {
            "view_id": int(self.view_id),
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "world_to_cam": [float(x) for x in self.world_to_cam.ravel()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraParams":
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            world_to_cam=np.asarray(d["world_to_cam"], dtype=np.float64).reshape(4, 4),
            view_id=int(d.get("view_id", 0)),
        )


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera transform for a camera at ``eye`` looking at ``target``.

    Image ``v`` grows against ``up``.
    """
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    right = np.cross(f, up)
    n = np.linalg.norm(right)
    if n < 1e-12:
        raise ValidationError("up vector is parallel to the viewing direction")
    right /= n
    down = np.cross(f, right)
    m = np.eye(4)
    m[:3, :3] = np.stack([right, down, f])
    m[:3, 3] = -m[:3, :3] @ eye
    return m


def make_camera(eye, target, width: int, height: int, fov_deg: float = 30.0,
                up=(0.0, 1.0, 0.0), view_id: int = 0) -> CameraParams:
    """Camera with square pixels, principal point at the image centre, and
    ``fov_deg`` horizontal field of view."""
    fx = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
    return CameraParams(fx=fx, fy=fx, cx=(width - 1) / 2, cy=(height - 1) / 2,
                        width=width, height=height,
                        world_to_cam=look_at(eye, target, up), view_id=view_id)
