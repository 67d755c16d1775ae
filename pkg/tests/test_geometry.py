from __future__ import annotations

import numpy as np
import pytest

from pulsemap3d.errors import LandmarkOffSurface, MissingUVs, ValidationError
from pulsemap3d.geometry import (
    CameraParams,
    TriMesh,
    UvTextureMap,
    backproject_landmarks,
    bake_view,
    bake_views,
    depth_eps,
    grid_plane,
    make_camera,
    preview_rgb,
    rasterize,
    read_obj,
    reproject,
    sample_bilinear,
    texel_visibility,
    uv_lookup,
    uv_sphere,
    write_obj,
)

from oracles import brute_visibility


def front_camera(w=64, h=48, dist=300.0, fov=40.0):
    return make_camera((0.0, 0.0, dist), (0.0, 0.0, 0.0), w, h, fov)


def test_camera_dict_round_trip():
    cam = make_camera((100.0, 20.0, 300.0), (0, 0, 0), 80, 60, 35.0, view_id=4)
    back = CameraParams.from_dict(cam.to_dict())
    assert np.array_equal(back.world_to_cam, cam.world_to_cam)
    assert back.view_id == 4 and back.fx == cam.fx


def test_camera_rejects_non_rotation():
    m = np.eye(4)
    m[0, 0] = 2.0
    with pytest.raises(ValidationError):
        CameraParams(100, 100, 10, 10, 20, 20, m)


def test_camera_centre_projects_target_to_principal_point():
    cam = make_camera((50.0, -30.0, 400.0), (5.0, 2.0, -1.0), 64, 48)
    u, v, z = cam.project(np.array([[5.0, 2.0, -1.0]]))
    assert abs(u[0] - cam.cx) < 1e-9 and abs(v[0] - cam.cy) < 1e-9
    assert np.allclose(cam.center, [50.0, -30.0, 400.0])


def test_quad_covers_projected_rectangle():
    cam = front_camera()
    quad = grid_plane(100.0, 60.0)
    r = rasterize(quad, cam)
    u, v, _ = cam.project(quad.vertices)
    cols = np.flatnonzero(r.hit.any(axis=0))
    rows = np.flatnonzero(r.hit.any(axis=1))
    assert abs(cols[0] - u.min()) <= 1 and abs(cols[-1] - u.max()) <= 1
    assert abs(rows[0] - v.min()) <= 1 and abs(rows[-1] - v.max()) <= 1
    assert np.allclose(r.depth[r.hit], 300.0)


def test_nearer_quad_wins():
    cam = front_camera()
    far = grid_plane(100.0, 60.0)
    near = grid_plane(40.0, 30.0)
    near = near.transformed(T=np.array([0.0, 0.0, 50.0]))
    both = TriMesh(np.vstack([far.vertices, near.vertices]),
                   np.vstack([far.faces, near.faces + len(far.vertices)]),
                   np.vstack([far.uvs, near.uvs]))
    r = rasterize(both, cam)
    u, v, _ = cam.project(near.vertices)
    inner = r.face_id[int(np.ceil(v.min())) + 1:int(v.max()), int(np.ceil(u.min())) + 1:int(u.max())]
    assert np.all(inner >= far.n_faces)


def test_backfaces_are_culled():
    cam = make_camera((0.0, 0.0, -300.0), (0, 0, 0), 32, 32)
    assert not rasterize(grid_plane(50.0, 50.0), cam).hit.any()


def test_sphere_silhouette_radius():
    R, D = 100.0, 400.0
    cam = make_camera((0.0, 0.0, D), (0, 0, 0), 160, 160, 40.0)
    r = rasterize(uv_sphere(R, 48, 96), cam)
    expected = cam.fx * np.tan(np.arcsin(R / D))
    measured = np.sqrt(r.hit.sum() / np.pi)
    # a 96-gon silhouette is inscribed in the true circle
    assert abs(measured - expected) < 1.0


def test_backproject_vertex_round_trip():
    cam = front_camera(96, 96, 250.0)
    mesh = uv_sphere(60.0, 16, 32)
    r = rasterize(mesh, cam)
    front = mesh.vertices[mesh.vertices[:, 2] > 30]
    u, v, _ = cam.project(front)
    hits = backproject_landmarks(np.stack([u, v], axis=1), r, mesh, cam)
    assert hits.found.all()
    assert np.max(np.linalg.norm(hits.points - front, axis=1)) < 1e-3


def test_backproject_background_is_missing():
    cam = front_camera()
    r = rasterize(grid_plane(20.0, 20.0), cam)
    pts = np.array([[1.0, 1.0], [cam.cx, cam.cy]])
    hits = backproject_landmarks(pts, r, grid_plane(20.0, 20.0), cam)
    assert hits.missing == [0] and hits.found[1]
    with pytest.raises(LandmarkOffSurface):
        backproject_landmarks(pts, r, grid_plane(20.0, 20.0), cam, strict=True)


def test_obj_round_trip(tmp_path):
    mesh = uv_sphere(10.0, 6, 12)
    write_obj(tmp_path / "m.obj", mesh, precision=9)
    back = read_obj(tmp_path / "m.obj")
    assert np.array_equal(back.faces, mesh.faces)
    assert np.max(np.abs(back.vertices - mesh.vertices)) < 1e-8
    assert np.max(np.abs(back.uvs - mesh.uvs)) < 1e-8


@pytest.mark.parametrize("text", ["v 1 2\nf 1 2 3\n", "v 0 0 0\nv 1 0 0\nf 1 2 7\n", "f 1 2 3\n",
                                  "v a b c\n"])
def test_malformed_obj(tmp_path, text):
    p = tmp_path / "bad.obj"
    p.write_text(text)
    with pytest.raises(ValidationError):
        read_obj(p)


def test_bake_needs_uvs():
    mesh = TriMesh(np.eye(3), [[0, 1, 2]])
    cam = front_camera()
    with pytest.raises(MissingUVs):
        bake_view(np.zeros((48, 64)), mesh, cam, UvTextureMap.empty(8, "snr"))


def test_single_view_round_trip():
    cam = front_camera(64, 48, 300.0)
    mesh = grid_plane(120.0, 90.0, 4, 4)
    yy, xx = np.mgrid[0:48, 0:64]
    src = 0.05 * xx + 0.02 * yy
    r = rasterize(mesh, cam)
    src = np.where(r.hit, src, np.nan)
    tex = bake_view(src, mesh, cam, UvTextureMap.empty(256, "snr"))
    back = reproject(tex, mesh, cam, r)
    ok = np.isfinite(back) & np.isfinite(src)
    assert ok.sum() > 0.9 * r.hit.sum()
    assert np.max(np.abs(back[ok] - src[ok])) < 1e-3


def test_two_symmetric_views_average():
    mesh = grid_plane(100.0, 100.0, 2, 2)
    a = make_camera((150.0, 0.0, 260.0), (0, 0, 0), 48, 48, 50.0)
    b = make_camera((-150.0, 0.0, 260.0), (0, 0, 0), 48, 48, 50.0)
    tex = bake_views([np.full((48, 48), 2.0), np.full((48, 48), 5.0)], mesh, [a, b], "snr",
                     resolution=32, weighting="uniform")
    both = tex.n_views == 2
    assert both.sum() > 100
    assert np.allclose(tex.value[both], 3.5)


def test_phase_bake_circular_and_confidence():
    mesh = grid_plane(100.0, 100.0, 2, 2)
    a = make_camera((150.0, 0.0, 260.0), (0, 0, 0), 48, 48, 50.0)
    b = make_camera((-150.0, 0.0, 260.0), (0, 0, 0), 48, 48, 50.0)
    same = bake_views([np.full((48, 48), 3.0), np.full((48, 48), -3.0)], mesh, [a, b],
                      "phase_g", resolution=32, weighting="uniform")
    both = same.n_views == 2
    # +-3 rad straddle the wrap, their circular mean is pi, not 0
    assert np.allclose(np.abs(same.value[both]), np.pi, atol=1e-9)
    v = same.value[same.valid]
    assert np.all((v > -np.pi) & (v <= np.pi))
    opposite = bake_views([np.zeros((48, 48)), np.full((48, 48), np.pi)], mesh, [a, b],
                          "phase_g", resolution=32, weighting="uniform")
    assert np.all(opposite.confidence[opposite.n_views == 2] < 1e-9)


def test_sample_bilinear_nan_aware_and_phase():
    vals = np.array([[1.0, 3.0], [np.nan, 5.0]])
    uv = np.array([[0.5, 0.5]])
    assert sample_bilinear(vals, uv)[0] == pytest.approx(3.0)
    ph = np.array([[3.0, -3.0], [3.0, -3.0]])
    got = sample_bilinear(ph, uv, is_phase=True)[0]
    assert abs(abs(got) - np.pi) < 1e-9


def test_reproject_constant_texture():
    cam = front_camera()
    mesh = grid_plane(120.0, 90.0, 2, 2)
    tex = UvTextureMap.from_arrays(np.full((16, 16), 7.0), np.ones((16, 16)),
                                   np.ones((16, 16), int), "snr")
    r = rasterize(mesh, cam)
    out = reproject(tex, mesh, cam, r)
    assert np.allclose(out[r.hit], 7.0, rtol=0, atol=1e-12) and np.all(np.isnan(out[~r.hit]))


def test_visibility_matches_brute_force():
    mesh = uv_sphere(80.0, 10, 20)
    # a second sphere partially occluding the first
    occ = uv_sphere(30.0, 8, 16, center=(40.0, 20.0, 110.0))
    both = TriMesh(np.vstack([mesh.vertices, occ.vertices]),
                   np.vstack([mesh.faces, occ.faces + len(mesh.vertices)]),
                   np.vstack([mesh.uvs * [0.5, 1.0], occ.uvs * [0.5, 1.0] + [0.5, 0.0]]))
    cam = make_camera((60.0, 40.0, 400.0), (0, 0, 0), 64, 64, 45.0)
    lookup = uv_lookup(both, 48)
    vis = texel_visibility(both, cam, lookup)
    m = lookup.covered
    ref = brute_visibility(both.vertices, both.faces, cam.K, cam.world_to_cam, cam.width,
                           cam.height, lookup.points[m], lookup.face_id[m], depth_eps(both))
    assert np.array_equal(vis[m], ref)
    assert 0 < ref.sum() < ref.size


def test_preview_rgb():
    img = preview_rgb(np.array([[0.0, 10.0], [np.nan, 5.0]]), "snr")
    assert img.shape == (2, 2, 3) and img.dtype == np.uint8
    assert np.all(img[1, 0] == 0)
    ph = preview_rgb(np.array([[-np.pi, np.pi]]), "phase_r")
    # cyclic colour scale: both ends of the phase range look alike
    assert np.abs(ph[0, 0].astype(int) - ph[0, 1].astype(int)).max() <= 8
