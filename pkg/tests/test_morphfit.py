from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from pulsemap3d.errors import DegenerateConfiguration, DimensionMismatch, ValidationError
from pulsemap3d.geometry import TriMesh, grid_plane, uv_sphere
from pulsemap3d.morphfit import (
    FitProblem,
    FitState,
    FitWeights,
    MorphableModel,
    SurfaceQuery,
    clean_scan,
    evaluate_model,
    fit_scan,
    geman_mcclure,
    mesh_to_scan_error,
    pack,
    posed_vertices,
    rigid_align,
    rodrigues,
    synthetic_head,
    unpack,
    vertex_jacobians,
)
from pulsemap3d.morphfit.model import rodrigues_jacobian

from oracles import brute_point_to_mesh, dense_lbs


@pytest.fixture(scope="module")
def head():
    return synthetic_head(n_lat=14, n_lon=28, n_beta=6, n_psi=4)


def random_state(model, rng, mag=0.3):
    R = Rotation.from_rotvec(rng.normal(size=3) * 0.3).as_matrix()
    return FitState(1.0 + 0.1 * rng.random(), R, rng.normal(size=3) * 5,
                    rng.normal(size=model.n_beta) * mag, rng.normal(size=model.n_theta) * 0.1,
                    rng.normal(size=model.n_psi) * mag)


def test_rodrigues_matches_scipy(rng):
    for _ in range(20):
        r = rng.normal(size=3) * rng.uniform(0, 3)
        assert np.allclose(rodrigues(r), Rotation.from_rotvec(r).as_matrix(), atol=1e-12)
    assert np.allclose(rodrigues(np.zeros(3)), np.eye(3))


def test_rodrigues_jacobian_finite_difference(rng):
    for r in (rng.normal(size=3), np.zeros(3), 1e-7 * rng.normal(size=3)):
        J = rodrigues_jacobian(r)
        h = 1e-6
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            num = (rodrigues(r + e) - rodrigues(r - e)) / (2 * h)
            assert np.allclose(J[a], num, atol=1e-8)


def test_mean_mesh_at_zero(head):
    m = head.model
    v = posed_vertices(m, FitState.zeros(m))
    assert np.array_equal(v, m.mean_vertices)


def test_first_shape_column(head):
    m = head.model
    beta = np.zeros(m.n_beta)
    beta[0] = 1.0
    v = posed_vertices(m, FitState.zeros(m).copy(beta=beta))
    assert np.allclose(v, m.mean_vertices + m.shape_basis[:, 0].reshape(-1, 3), atol=1e-12)


def test_matches_dense_oracle(head, rng):
    m = head.model
    st = random_state(m, rng)
    ref = dense_lbs(m.mean_vertices, m.shape_basis, m.expression_basis, m.joints, m.parents,
                    m.lbs_weights, st.beta, st.theta, st.psi,
                    lambda r: Rotation.from_rotvec(r).as_matrix())
    ref = st.scale * ref @ st.R.T + st.T
    assert np.max(np.abs(posed_vertices(m, st) - ref)) < 1e-9


def test_affine_in_shape_and_expression(head, rng):
    m = head.model
    base = random_state(m, rng).copy(beta=np.zeros(m.n_beta), psi=np.zeros(m.n_psi))
    b1, b2 = rng.normal(size=(2, m.n_beta))
    p1, p2 = rng.normal(size=(2, m.n_psi))
    a, b = 0.7, -1.3
    M0 = posed_vertices(m, base)
    M1 = posed_vertices(m, base.copy(beta=b1, psi=p1))
    M2 = posed_vertices(m, base.copy(beta=b2, psi=p2))
    M12 = posed_vertices(m, base.copy(beta=a * b1 + b * b2, psi=a * p1 + b * p2))
    assert np.max(np.abs((M12 - M0) - (a * (M1 - M0) + b * (M2 - M0)))) < 1e-9


def test_dimension_mismatch(head):
    m = head.model
    with pytest.raises(DimensionMismatch):
        evaluate_model(m, FitState.zeros(m).copy(beta=np.zeros(m.n_beta + 1)))


def test_vertex_jacobians_finite_difference(head, rng):
    m = head.model
    st = random_state(m, rng)
    _, jac = vertex_jacobians(m, st)
    J = np.concatenate([jac[k] for k in ("T", "beta", "theta", "psi")], axis=2)
    x = pack(st)
    h = 1e-6
    for p in range(x.size):
        e = np.zeros_like(x)
        e[p] = h
        num = (posed_vertices(m, unpack(x + e, st)) - posed_vertices(m, unpack(x - e, st))) / (2 * h)
        assert np.allclose(J[:, :, p], num, atol=1e-6 * max(1.0, np.abs(num).max()))


def test_save_load_round_trip(head, tmp_path):
    m = head.model
    m.save(tmp_path / "m.pm3dmm")
    back = MorphableModel.load(tmp_path / "m.pm3dmm")
    assert np.array_equal(back.faces, m.faces)
    assert np.array_equal(back.landmark_vertex_ids, m.landmark_vertex_ids)
    assert np.allclose(back.mean_vertices, m.mean_vertices, rtol=1e-6)
    assert back.meta == m.meta


def test_load_rejects_corruption(head, tmp_path):
    p = tmp_path / "m.pm3dmm"
    head.model.save(p)
    data = p.read_bytes()
    (tmp_path / "trunc").write_bytes(data[:len(data) // 2])
    (tmp_path / "magic").write_bytes(b"XXXXXXXX" + data[8:])
    for name in ("trunc", "magic"):
        with pytest.raises(ValidationError):
            MorphableModel.load(tmp_path / name)


def test_rigid_align_identity_and_recovery(rng):
    x = rng.normal(size=(20, 3)) * 50
    s, R, T = rigid_align(x, x)
    assert abs(s - 1) < 1e-12 and np.allclose(R, np.eye(3), atol=1e-12) and np.allclose(T, 0, atol=1e-9)
    R0 = Rotation.random(random_state=3).as_matrix()
    t0 = rng.normal(size=3) * 10
    s, R, T = rigid_align(x, 2 * x @ R0.T + t0)
    assert abs(s - 2) < 1e-12 and np.allclose(R, R0, atol=1e-12) and np.allclose(T, t0, atol=1e-9)


def test_rigid_align_degenerate():
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(DegenerateConfiguration):
        rigid_align(line, line)
    with pytest.raises(DegenerateConfiguration):
        rigid_align(np.ones((4, 3)), np.ones((4, 3)))
    with pytest.raises(DegenerateConfiguration):
        rigid_align(np.eye(3)[:2], np.eye(3)[:2])


def test_geman_mcclure_bounded():
    r = np.linspace(-10, 10, 101)
    v = geman_mcclure(r, 0.5)
    assert np.all(v >= 0) and np.all(v < 1) and geman_mcclure(np.array(0.0), 1.0) == 0


def test_closest_point_matches_brute_force(rng):
    mesh = uv_sphere(40.0, 8, 16)
    pts = rng.normal(size=(150, 3)) * 50
    _, d, _ = SurfaceQuery(mesh, k=4).query(pts)
    ref = brute_point_to_mesh(pts, mesh.vertices, mesh.faces)
    assert np.max(np.abs(d - ref)) < 1e-9


def test_mesh_to_scan_error_zero_and_offset():
    plane = grid_plane(100.0, 100.0, 10, 10)
    e = mesh_to_scan_error(plane, plane)
    assert e.p95 == 0 and e.mean == 0
    lifted = plane.transformed(T=np.array([0.0, 0.0, 1.0]))
    e = mesh_to_scan_error(lifted, plane)
    assert np.allclose(e.per_vertex_mm, 1.0)


def test_clean_scan_drops_fragments_and_recentres():
    big = uv_sphere(50.0, 12, 24)
    chip = TriMesh([[500, 0, 0], [501, 0, 0], [500, 1, 0]], [[0, 1, 2]])
    both = TriMesh(np.vstack([big.vertices + 7.0, chip.vertices]),
                   np.vstack([big.faces, chip.faces + len(big.vertices)]))
    out, shift = clean_scan(both)
    assert out.n_faces == big.n_faces
    assert np.allclose(out.vertices.mean(axis=0), 0, atol=1e-9)
    assert np.allclose(shift, -7.0)


def test_gradient_matches_central_differences(head, rng):
    m = head.model
    truth = FitState.zeros(m).copy(beta=rng.normal(size=m.n_beta) * 0.5)
    scan = evaluate_model(m, truth)
    prob = FitProblem(m, scan, FitWeights(), scan.vertices[m.landmark_vertex_ids])
    st = truth.copy(T=rng.normal(size=3) * 0.5, beta=truth.beta + 0.05 * rng.normal(size=m.n_beta))
    E, g, _ = prob.evaluate(st, 2e-3)
    x = pack(st)
    num = np.empty_like(x)
    h = 1e-6
    for p in range(x.size):
        e = np.zeros_like(x)
        e[p] = h
        num[p] = (prob.evaluate(unpack(x + e, st), 2e-3, False)
                  - prob.evaluate(unpack(x - e, st), 2e-3, False)) / (2 * h)
    assert np.linalg.norm(g - num) / np.linalg.norm(num) < 1e-4


def test_self_fit_stays_put(head, rng):
    m = head.model
    truth = FitState.zeros(m).copy(beta=rng.normal(size=m.n_beta) * 0.02)
    scan = evaluate_model(m, truth)
    res = fit_scan(m, scan, truth, iters=10, graduated=False)
    assert np.max(np.abs(posed_vertices(m, res.state) - scan.vertices)) < 1e-6


def test_objective_monotone_and_recovers_shape(head, rng):
    m = head.model
    truth = FitState.zeros(m).copy(beta=rng.normal(size=m.n_beta) * 1.5)
    scan = evaluate_model(m, truth)
    lmk = scan.vertices[m.landmark_vertex_ids]
    res = fit_scan(m, scan, FitState.zeros(m), iters=30, scan_landmarks=lmk)
    acc = [h["objective"] for h in res.history if h["accepted"] and h["iter"] > 0]
    stages = [h for h in res.history if h["accepted"]]
    for a, b in zip(stages, stages[1:]):
        if a["stage"] == b["stage"]:
            assert b["objective"] <= a["objective"]
    assert acc
    cos = truth.beta @ res.state.beta / np.linalg.norm(truth.beta) / np.linalg.norm(res.state.beta)
    assert cos > 0.95
    err = mesh_to_scan_error(evaluate_model(m, res.state), scan)
    assert err.p95 < 0.01 * scan.bbox_diagonal()
