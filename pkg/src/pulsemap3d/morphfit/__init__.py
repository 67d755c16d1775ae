"""Morphable head model, similarity alignment and robust non-rigid fitting."""

from .align import rigid_align
from .fit import FitProblem, FitResult, FitWeights, fit_scan, geman_mcclure, nonrigid_fit, pack, unpack
from .model import FitState, MorphableModel, evaluate_model, posed_vertices, rodrigues, vertex_jacobians
from .surface import MeshScanError, SurfaceQuery, clean_scan, closest_point_on_triangles, mesh_to_scan_error
from .synthetic import SyntheticHead, landmark_angles, synthetic_head

__all__ = [
    "rigid_align", "FitProblem", "FitResult", "FitWeights", "fit_scan", "geman_mcclure",
    "nonrigid_fit", "pack", "unpack", "FitState", "MorphableModel", "evaluate_model",
    "posed_vertices", "rodrigues", "vertex_jacobians", "MeshScanError", "SurfaceQuery",
    "clean_scan", "closest_point_on_triangles", "mesh_to_scan_error", "SyntheticHead",
    "landmark_angles", "synthetic_head",
]
