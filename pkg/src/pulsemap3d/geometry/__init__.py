"""Cameras, meshes, rasterization and UV texture baking."""

from .camera import CameraParams, look_at, make_camera
from .mesh import TriMesh, grid_plane, read_obj, uv_sphere, write_obj
from .raster import LandmarkHits, RasterResult, backproject_landmarks, rasterize, ray_triangle
from .texture import (
    DEFAULT_RESOLUTION,
    TexelLookup,
    UvTextureMap,
    ViewSampling,
    VisibilityIndex,
    bake_view,
    bake_views,
    depth_eps,
    plan_view,
    preview_rgb,
    reproject,
    sample_bilinear,
    texel_visibility,
    uv_lookup,
)

__all__ = [
    "CameraParams", "look_at", "make_camera",
    "TriMesh", "grid_plane", "read_obj", "uv_sphere", "write_obj",
    "LandmarkHits", "RasterResult", "backproject_landmarks", "rasterize", "ray_triangle",
    "DEFAULT_RESOLUTION", "TexelLookup", "UvTextureMap", "ViewSampling", "VisibilityIndex", "bake_view", "plan_view",
    "bake_views", "depth_eps", "preview_rgb", "reproject", "sample_bilinear",
    "texel_visibility", "uv_lookup",
]
