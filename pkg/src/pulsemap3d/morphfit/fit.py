"""Robust non-rigid model-to-scan fitting (Gauss-Newton with a dogleg trust region)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NoCorrespondences, NonFiniteObjective, ValidationError
from ..geometry.mesh import TriMesh
from .model import FitState, MorphableModel, vertex_jacobians
from .surface import SurfaceQuery

PARAM_BLOCKS = ("T", "beta", "theta", "psi")


@dataclass(frozen=True)
class FitWeights:
    """Objective weights.

    Lengths enter the weighted terms in units of ``unit_mm`` millimetres
    (default metres, the unit the weights were tuned in), so ``sigma_gmo`` of
    1e-4 corresponds to 0.1 mm.
    """

    lambda_D: float = 2.5
    lambda_L: float = 0.01
    lambda_beta: float = 1e-4
    lambda_psi: float = 2e-4
    lambda_theta: float = 1e-3
    sigma_gmo: float = 1e-4
    unit_mm: float = 1000.0

    def __post_init__(self) -> None:
        for k, v in self.__dict__.items():
            if not v > 0:
                raise ValidationError(f"{k} must be positive, got {v}")


def geman_mcclure(r: np.ndarray, sigma: float) -> np.ndarray:
    r2 = np.square(r)
    return r2 / (r2 + sigma * sigma)


def pack(fit: FitState) -> np.ndarray:
    return np.concatenate([fit.T, fit.beta, fit.theta, fit.psi])


def unpack(x: np.ndarray, like: FitState) -> FitState:
    n = [3, like.beta.size, like.theta.size, like.psi.size]
    o = np.cumsum([0] + n)
    return like.copy(T=x[o[0]:o[1]].copy(), beta=x[o[1]:o[2]].copy(),
                     theta=x[o[2]:o[3]].copy(), psi=x[o[3]:o[4]].copy())


class FitProblem:
    """Objective, gradient and majorising Gauss-Newton Hessian at a state."""

    def __init__(self, model: MorphableModel, scan: TriMesh, weights: FitWeights,
                 scan_landmarks: np.ndarray | None = None,
                 vertex_mask: np.ndarray | None = None):
        self.model, self.w = model, weights
        self.query = SurfaceQuery(scan)
        self.vidx = (np.arange(model.n_vertices) if vertex_mask is None
                     else np.flatnonzero(np.asarray(vertex_mask, dtype=bool)))
        if self.vidx.size == 0:
            raise NoCorrespondences("no model vertices selected for fitting")
        if scan_landmarks is None:
            self.lmk_ids = np.zeros(0, dtype=np.int64)
            self.lmk = np.zeros((0, 3))
        else:
            L = np.asarray(scan_landmarks, dtype=np.float64).reshape(-1, 3)
            if len(L) != model.landmark_vertex_ids.size:
                raise ValidationError(f"expected {model.landmark_vertex_ids.size} scan landmarks, got {len(L)}")
            ok = np.all(np.isfinite(L), axis=1)
            self.lmk_ids = model.landmark_vertex_ids[ok]
            self.lmk = L[ok]

    def distances_mm(self, fit: FitState) -> np.ndarray:
        from .model import posed_vertices

        _, d, _ = self.query.query(posed_vertices(self.model, fit)[self.vidx])
        return d

    def evaluate(self, fit: FitState, sigma: float, derivatives: bool = True):
        """Return ``E`` or ``(E, g, B)`` with ``B`` the Gauss-Newton majoriser."""
        w, u = self.w, self.w.unit_mm
        verts, jac = vertex_jacobians(self.model, fit)
        v = verts[self.vidx]
        cp, d, fid = self.query.query(v)
        r = d / u
        s2 = sigma * sigma
        E_d = w.lambda_D * float(np.sum(r * r / (r * r + s2)))
        dl = (verts[self.lmk_ids] - self.lmk) / u
        E_l = w.lambda_L * float(np.sum(dl * dl))
        E_r = (w.lambda_beta * float(fit.beta @ fit.beta) + w.lambda_psi * float(fit.psi @ fit.psi)
               + w.lambda_theta * float(fit.theta @ fit.theta))
        E = E_d + E_l + E_r
        if not np.isfinite(E):
            raise NonFiniteObjective(f"objective is {E}")
        if not derivatives:
            return E
        J = np.concatenate([jac[k] for k in PARAM_BLOCKS], axis=2)
        # point-to-plane linearisation along the closest-point direction (the
        # face normal when a vertex lies on the scan): exact gradient, and a
        # Gauss-Newton model that lets vertices slide along the surface
        nrm = np.where(d[:, None] > 0, v - cp, self.query.normals[fid])
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        # d/dq of q/(q+s2) at q = r^2
        fp = s2 / np.square(r * r + s2)
        Jn = np.einsum("va,vap->vp", nrm, J[self.vidx]) / u
        g = 2 * w.lambda_D * (fp * r) @ Jn
        B = 2 * w.lambda_D * np.einsum("v,vp,vq->pq", fp, Jn, Jn)
        if self.lmk_ids.size:
            Jl = J[self.lmk_ids] / u
            g += 2 * w.lambda_L * np.einsum("lap,la->p", Jl, dl)
            B += 2 * w.lambda_L * np.einsum("lap,laq->pq", Jl, Jl)
        reg = np.concatenate([np.zeros(3), np.full(fit.beta.size, w.lambda_beta),
                              np.full(fit.theta.size, w.lambda_theta),
                              np.full(fit.psi.size, w.lambda_psi)])
        x = pack(fit)
        g += 2 * reg * x
        B[np.diag_indices_from(B)] += 2 * reg
        return E, g, B


@dataclass
class FitResult:
    state: FitState
    objective: float
    history: list[dict] = field(default_factory=list)
    sigmas: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"state": self.state.to_dict(), "objective": self.objective,
                "sigmas": self.sigmas, "history": self.history}


def sigma_schedule(rms: float, sigma: float, factor: float = 4.0) -> list[float]:
    """Graduated robustifier widths from ``2*rms`` down to ``sigma``."""
    out = []
    s = 2.0 * rms
    while s > sigma:
        out.append(float(s))
        s /= factor
    out.append(float(sigma))
    return out


def _dogleg_step(g: np.ndarray, B: np.ndarray, radius: float) -> tuple[np.ndarray, bool]:
    try:
        p_gn = -np.linalg.solve(B, g)
    except np.linalg.LinAlgError:
        p_gn = -np.linalg.lstsq(B, g, rcond=None)[0]
    if np.linalg.norm(p_gn) <= radius:
        return p_gn, False
    gBg = float(g @ B @ g)
    p_u = -(float(g @ g) / gBg) * g if gBg > 0 else -radius * g / np.linalg.norm(g)
    nu = np.linalg.norm(p_u)
    if nu >= radius:
        return p_u * (radius / nu), True
    d = p_gn - p_u
    a, b, c = float(d @ d), float(2 * p_u @ d), float(p_u @ p_u - radius * radius)
    tau = (-b + np.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a)
    return p_u + tau * d, True


def fit_scan(model: MorphableModel, scan: TriMesh, init: FitState,
             weights: FitWeights | None = None, iters: int = 30,
             scan_landmarks: np.ndarray | None = None,
             vertex_mask: np.ndarray | None = None, graduated: bool = True,
             rel_tol: float = 1e-8) -> FitResult:
    """Optimise ``T, beta, theta, psi`` with ``scale`` and ``R`` held fixed.

    Each trial point recomputes exact closest-point correspondences on the
    scan, so accepted steps strictly decrease the true objective. With
    ``graduated`` the robustifier width starts at twice the initial RMS
    distance and shrinks 4x per stage until it reaches ``sigma_gmo``; the last
    stage minimises the stated objective. ``iters`` bounds the trial steps
    per stage.
    """
    w = weights or FitWeights()
    prob = FitProblem(model, scan, w, scan_landmarks, vertex_mask)
    model.check_coefficients(init.beta, init.theta, init.psi)
    state = init.copy()
    if graduated:
        d = prob.distances_mm(state) / w.unit_mm
        sigmas = sigma_schedule(float(np.sqrt(np.mean(d * d))), w.sigma_gmo)
    else:
        sigmas = [w.sigma_gmo]
    history: list[dict] = []
    E = float("nan")
    for stage, sigma in enumerate(sigmas):
        E, g, B = prob.evaluate(state, sigma)
        history.append({"stage": stage, "sigma": sigma, "iter": 0, "objective": E, "accepted": True})
        scale = np.sqrt(np.maximum(np.diag(B), 1e-12 * max(np.diag(B).max(), 1e-300)))
        radius = None
        for it in range(1, iters + 1):
            gs = g / scale
            if not np.linalg.norm(gs) > 0:
                break
            Bs = B / np.outer(scale, scale)
            if radius is None:
                radius = max(float(np.linalg.norm(np.linalg.lstsq(Bs, gs, rcond=None)[0])), 1e-8)
            ps, on_boundary = _dogleg_step(gs, Bs, radius)
            pred = -(float(gs @ ps) + 0.5 * float(ps @ Bs @ ps))
            trial = unpack(pack(state) + ps / scale, state)
            E_new, g_new, B_new = prob.evaluate(trial, sigma)
            rho = (E - E_new) / pred if pred > 0 else -1.0
            accepted = E_new < E
            history.append({"stage": stage, "sigma": sigma, "iter": it, "objective": E_new,
                            "accepted": bool(accepted)})
            if rho < 0.25:
                radius *= 0.25
            elif rho > 0.75 and on_boundary:
                radius *= 2.0
            if accepted:
                rel = (E - E_new) / max(abs(E), 1e-300)
                state, E, g, B = trial, E_new, g_new, B_new
                if rel < rel_tol:
                    break
            if radius < 1e-12:
                break
    return FitResult(state, float(E), history, sigmas)


def nonrigid_fit(model: MorphableModel, scan: TriMesh, init: FitState,
                 weights: FitWeights | None = None, iters: int = 30, **kwargs) -> FitState:
    return fit_scan(model, scan, init, weights, iters, **kwargs).state
