"""PCA morphable head model with a small linear-blend-skinned skeleton.

Binary model file layout (all integers and floats little-endian)::

    bytes 0-7   magic  b"PM3DMM01"
    bytes 8-11  uint32 header length H
    next H      UTF-8 JSON header
    rest        data blocks, each at header["blocks"][name]["offset"] bytes
                from the start of the data section

The header carries ``n_vertices, n_faces, n_beta, n_psi, n_joints, n_theta``,
``parents`` (joint tree, -1 for the root), ``landmarks`` (list of vertex ids,
index = landmark id) and a ``blocks`` table of ``{dtype, shape, offset}``.
Blocks: ``mean`` f4 (n_v, 3); ``shape_basis`` f4 (3 n_v, n_beta);
``expression_basis`` f4 (3 n_v, n_psi); ``joints`` f4 (n_joints, 3);
``lbs_weights`` f4 (n_v, n_joints); ``faces`` i4 (n_f, 3); optional ``uvs`` f4
(n_f, 3, 2). Basis rows are vertex-major (x0, y0, z0, x1, ...). Pose
parameters are one axis-angle triple per joint, so ``n_theta = 3 n_joints``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DimensionMismatch, ValidationError
from ..geometry.mesh import TriMesh

MAGIC = b"PM3DMM01"
FORMAT_VERSION = 1


# --------------------------------------------------------------------------
# rotations


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    th = np.linalg.norm(r)
    if th < 1e-12:
        return np.eye(3) + skew(r)
    k = skew(r / th)
    return np.eye(3) + np.sin(th) * k + (1 - np.cos(th)) * (k @ k)


def rodrigues_jacobian(r: np.ndarray) -> np.ndarray:
    """``dR/dr_a`` for a = 0, 1, 2, shape ``(3, 3, 3)``.

    Closed form of Gallego and Yezzi, with the exact limit at r = 0.
    """
    r = np.asarray(r, dtype=np.float64)
    th2 = float(r @ r)
    eye = np.eye(3)
    if th2 < 1e-24:
        return np.stack([skew(eye[a]) for a in range(3)])
    R = rodrigues(r)
    out = np.empty((3, 3, 3))
    for a in range(3):
        out[a] = (r[a] * skew(r) + skew(np.cross(r, (eye - R)[:, a]))) / th2 @ R
    return out


def _homog(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = R
    m[:3, 3] = t
    return m


# --------------------------------------------------------------------------
# model


@dataclass
class MorphableModel:
    mean_vertices: np.ndarray
    shape_basis: np.ndarray
    expression_basis: np.ndarray
    faces: np.ndarray
    joints: np.ndarray
    parents: np.ndarray
    lbs_weights: np.ndarray
    landmark_vertex_ids: np.ndarray
    uvs: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.mean_vertices = np.asarray(self.mean_vertices, dtype=np.float64).reshape(-1, 3)
        nv = len(self.mean_vertices)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64).reshape(3 * nv, -1)
        self.expression_basis = np.asarray(self.expression_basis, dtype=np.float64).reshape(3 * nv, -1)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 3)
        self.parents = np.asarray(self.parents, dtype=np.int64).ravel()
        self.lbs_weights = np.asarray(self.lbs_weights, dtype=np.float64)
        self.landmark_vertex_ids = np.asarray(self.landmark_vertex_ids, dtype=np.int64).ravel()
        nj = len(self.joints)
        if len(self.parents) != nj:
            raise ValidationError("one parent entry per joint required")
        for j, p in enumerate(self.parents):
            if not (p == -1 and j == 0) and not 0 <= p < j:
                raise ValidationError("joints must be topologically ordered with joint 0 as root")
        if self.lbs_weights.shape != (nv, nj):
            raise ValidationError(f"lbs_weights must be ({nv}, {nj})")
        for name in ("mean_vertices", "shape_basis", "expression_basis", "joints", "lbs_weights"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"{name} contains non-finite values")
        ids = self.landmark_vertex_ids
        if ids.size and (ids.min() < 0 or ids.max() >= nv):
            raise ValidationError("landmark vertex id out of range")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= nv):
            raise ValidationError("face index out of range")
        if self.uvs is not None:
            self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(len(self.faces), 3, 2)

    @property
    def n_vertices(self) -> int:
        return len(self.mean_vertices)

    @property
    def n_beta(self) -> int:
        return self.shape_basis.shape[1]

    @property
    def n_psi(self) -> int:
        return self.expression_basis.shape[1]

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def n_theta(self) -> int:
        return 3 * self.n_joints

    def mesh(self, vertices: np.ndarray | None = None) -> TriMesh:
        v = self.mean_vertices if vertices is None else vertices
        return TriMesh(v, self.faces, self.uvs, self.landmark_vertex_ids)

    # ----- evaluation

    def rest_shape(self, beta: np.ndarray, psi: np.ndarray) -> np.ndarray:
        return (self.mean_vertices.ravel() + self.shape_basis @ beta
                + self.expression_basis @ psi).reshape(-1, 3)

    def joint_transforms(self, theta: np.ndarray) -> np.ndarray:
        """World transforms ``G_j`` (n_joints, 4, 4) mapping rest to posed points."""
        theta = np.asarray(theta, dtype=np.float64).reshape(-1, 3)
        G = np.empty((self.n_joints, 4, 4))
        for j in range(self.n_joints):
            J = self.joints[j]
            L = _homog(rodrigues(theta[j]), J) @ _homog(np.eye(3), -J)
            G[j] = L if self.parents[j] < 0 else G[self.parents[j]] @ L
        return G

    def joint_transform_jacobian(self, theta: np.ndarray) -> np.ndarray:
        """``dG_j / dtheta_k``, shape ``(n_theta, n_joints, 4, 4)``."""
        theta = np.asarray(theta, dtype=np.float64).reshape(-1, 3)
        nj = self.n_joints
        G = self.joint_transforms(theta)
        out = np.zeros((3 * nj, nj, 4, 4))
        for m in range(nj):
            J = self.joints[m]
            dR = rodrigues_jacobian(theta[m])
            Gp = np.eye(4) if self.parents[m] < 0 else G[self.parents[m]]
            Ginv = np.linalg.inv(G[m])
            for j in range(nj):
                if not self._is_ancestor(m, j):
                    continue
                tail = Ginv @ G[j]
                for a in range(3):
                    dL = np.zeros((4, 4))
                    dL[:3, :3] = dR[a]
                    dL[:3, 3] = -dR[a] @ J
                    out[3 * m + a, j] = Gp @ dL @ tail
        return out

    def _is_ancestor(self, m: int, j: int) -> bool:
        while j >= 0:
            if j == m:
                return True
            j = int(self.parents[j])
        return False

    def check_coefficients(self, beta, theta, psi) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        beta = np.asarray(beta, dtype=np.float64).ravel()
        theta = np.asarray(theta, dtype=np.float64).ravel()
        psi = np.asarray(psi, dtype=np.float64).ravel()
        if beta.size != self.n_beta or psi.size != self.n_psi or theta.size != self.n_theta:
            raise DimensionMismatch(
                f"expected beta {self.n_beta}, theta {self.n_theta}, psi {self.n_psi}; "
                f"got {beta.size}, {theta.size}, {psi.size}")
        return beta, theta, psi

    # ----- file I/O

    def save(self, path: str | Path) -> None:
        blocks = {
            "mean": (self.mean_vertices, "<f4"),
            "shape_basis": (self.shape_basis, "<f4"),
            "expression_basis": (self.expression_basis, "<f4"),
            "joints": (self.joints, "<f4"),
            "lbs_weights": (self.lbs_weights, "<f4"),
            "faces": (self.faces, "<i4"),
        }
        if self.uvs is not None:
            blocks["uvs"] = (self.uvs, "<f4")
        table, payload, off = {}, [], 0
        for name, (arr, dt) in blocks.items():
            raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
            table[name] = {"dtype": dt, "shape": list(arr.shape), "offset": off}
            payload.append(raw)
            off += len(raw)
        header = {
            "format_version": FORMAT_VERSION,
            "n_vertices": self.n_vertices, "n_faces": len(self.faces),
            "n_beta": self.n_beta, "n_psi": self.n_psi,
            "n_joints": self.n_joints, "n_theta": self.n_theta,
            "parents": [int(p) for p in self.parents],
            "landmarks": [int(i) for i in self.landmark_vertex_ids],
            "meta": self.meta,
            "blocks": table,
        }
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(np.uint32(len(hb)).astype("<u4").tobytes())
            fh.write(hb)
            for raw in payload:
                fh.write(raw)

    @classmethod
    def load(cls, path: str | Path) -> "MorphableModel":
        data = Path(path).read_bytes()
        if data[:8] != MAGIC:
            raise ValidationError(f"{path}: not a morphable model file (bad magic)")
        try:
            hlen = int(np.frombuffer(data[8:12], dtype="<u4")[0])
            header = json.loads(data[12:12 + hlen].decode("utf-8"))
            base = 12 + hlen
            arrays = {}
            for name, b in header["blocks"].items():
                dt = np.dtype(b["dtype"])
                count = int(np.prod(b["shape"]))
                start = base + int(b["offset"])
                if start + count * dt.itemsize > len(data):
                    raise ValueError(f"block {name} truncated")
                arrays[name] = np.frombuffer(data, dtype=dt, count=count, offset=start).reshape(b["shape"])
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            raise ValidationError(f"{path}: corrupt model file: {exc}") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise ValidationError(f"{path}: unsupported format_version {header.get('format_version')}")
        return cls(
            mean_vertices=arrays["mean"], shape_basis=arrays["shape_basis"],
            expression_basis=arrays["expression_basis"], faces=arrays["faces"],
            joints=arrays["joints"], parents=header["parents"],
            lbs_weights=arrays["lbs_weights"], landmark_vertex_ids=header["landmarks"],
            uvs=arrays.get("uvs"), meta=header.get("meta", {}),
        )


# --------------------------------------------------------------------------
# fitting state


@dataclass
class FitState:
    """Model-to-scan similarity plus model coefficients.

    Posed model vertices are ``scale * R @ lbs(theta, mean + S beta + E psi) + T``.
    """

    scale: float
    R: np.ndarray
    T: np.ndarray
    beta: np.ndarray
    theta: np.ndarray
    psi: np.ndarray

    def __post_init__(self) -> None:
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.T = np.asarray(self.T, dtype=np.float64).ravel()
        self.beta = np.asarray(self.beta, dtype=np.float64).ravel()
        self.theta = np.asarray(self.theta, dtype=np.float64).ravel()
        self.psi = np.asarray(self.psi, dtype=np.float64).ravel()
        if not self.scale > 0:
            raise ValidationError("scale must be positive")
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-8 or np.linalg.det(self.R) < 0:
            raise ValidationError("R must be a proper rotation")

    @classmethod
    def zeros(cls, model: MorphableModel, scale: float = 1.0, R=None, T=None) -> "FitState":
        return cls(scale, np.eye(3) if R is None else R, np.zeros(3) if T is None else T,
                   np.zeros(model.n_beta), np.zeros(model.n_theta), np.zeros(model.n_psi))

    def copy(self, **changes) -> "FitState":
        d = dict(scale=self.scale, R=self.R.copy(), T=self.T.copy(), beta=self.beta.copy(),
                 theta=self.theta.copy(), psi=self.psi.copy())
        d.update(changes)
        return FitState(**d)

    def to_dict(self) -> dict:
        return {"scale": float(self.scale), "R": self.R.tolist(), "T": self.T.tolist(),
                "beta": self.beta.tolist(), "theta": self.theta.tolist(), "psi": self.psi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FitState":
        return cls(d["scale"], d["R"], d["T"], d["beta"], d["theta"], d["psi"])


def posed_vertices(model: MorphableModel, fit: FitState) -> np.ndarray:
    beta, theta, psi = model.check_coefficients(fit.beta, fit.theta, fit.psi)
    rest = model.rest_shape(beta, psi)
    G = model.joint_transforms(theta)
    A = np.einsum("vj,jab->vab", model.lbs_weights, G)
    posed = np.einsum("vab,vb->va", A[:, :3, :3], rest) + A[:, :3, 3]
    return fit.scale * posed @ fit.R.T + fit.T


def evaluate_model(model: MorphableModel, fit: FitState) -> TriMesh:
    """Mesh of the model at ``fit``; raises DimensionMismatch on bad coefficient lengths."""
    return model.mesh(posed_vertices(model, fit))


def vertex_jacobians(model: MorphableModel, fit: FitState
                     ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Posed vertices and their Jacobians w.r.t. T, beta, theta and psi.

    Each Jacobian has shape ``(n_vertices, 3, n_params)``.
    """
    beta, theta, psi = model.check_coefficients(fit.beta, fit.theta, fit.psi)
    nv = model.n_vertices
    rest = model.rest_shape(beta, psi)
    G = model.joint_transforms(theta)
    A = np.einsum("vj,jab->vab", model.lbs_weights, G)
    M = fit.scale * np.einsum("ab,vbc->vac", fit.R, A[:, :3, :3])
    posed = np.einsum("vab,vb->va", A[:, :3, :3], rest) + A[:, :3, 3]
    verts = fit.scale * posed @ fit.R.T + fit.T
    jb = np.einsum("vab,vbk->vak", M, model.shape_basis.reshape(nv, 3, -1))
    jp = np.einsum("vab,vbk->vak", M, model.expression_basis.reshape(nv, 3, -1))
    dG = model.joint_transform_jacobian(theta)
    dA = np.einsum("vj,kjab->kvab", model.lbs_weights, dG)
    dposed = np.einsum("kvab,vb->kva", dA[:, :, :3, :3], rest) + dA[:, :, :3, 3]
    jt = fit.scale * np.einsum("ab,kvb->vak", fit.R, dposed)
    jT = np.broadcast_to(np.eye(3), (nv, 3, 3))
    return verts, {"T": jT, "beta": jb, "theta": jt, "psi": jp}
