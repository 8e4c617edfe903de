"""Linear morphable face model and the per-subject / per-view parameters."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    PoseSE3,
    euler_to_matrix,
    matrix_to_euler,
    matrix_to_quat,
    quat_normalize,
    quat_retract,
    quat_to_matrix,
)
from .sh import N_SH


class ContractError(ValueError):
    """Inputs violate an operation's dimensional or structural contract."""


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MorphableModel:
    """Mean shape/albedo plus identity, expression and albedo bases.

    Flat arrays are vertex-major: ``[x0, y0, z0, x1, ...]``.
    """

    mean_shape: np.ndarray
    mean_albedo: np.ndarray
    basis_id: np.ndarray
    basis_exp: np.ndarray
    basis_albedo: np.ndarray
    triangles: np.ndarray
    landmark_indices: np.ndarray
    landmark_confidence: np.ndarray

    def __post_init__(self):
        for name in ("mean_shape", "mean_albedo", "basis_id", "basis_exp", "basis_albedo",
                     "landmark_confidence"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "triangles", _frozen(self.triangles, np.int64).reshape(-1, 3))
        object.__setattr__(self, "landmark_indices", _frozen(self.landmark_indices, np.int64))

        n3 = self.mean_shape.size
        if n3 % 3:
            raise ContractError("mean_shape length must be a multiple of 3")
        V = n3 // 3
        if self.mean_albedo.shape != (n3,):
            raise ContractError("mean_albedo must match mean_shape")
        for name in ("basis_id", "basis_exp", "basis_albedo"):
            B = getattr(self, name)
            if B.ndim != 2 or B.shape[0] != n3:
                raise ContractError(f"{name} must have shape (3V, k), got {B.shape}")
            if not np.all(np.isfinite(B)):
                raise ContractError(f"{name} has non-finite entries")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= V):
            raise ContractError("triangle index out of range")
        lm = self.landmark_indices
        if len(np.unique(lm)) != len(lm) or (lm.size and (lm.min() < 0 or lm.max() >= V)):
            raise ContractError("landmark indices must be unique and < V")
        if self.landmark_confidence.shape != lm.shape or np.any(self.landmark_confidence <= 0):
            raise ContractError("one positive confidence per landmark required")

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.size // 3

    @property
    def n_id(self) -> int:
        return self.basis_id.shape[1]

    @property
    def n_exp(self) -> int:
        return self.basis_exp.shape[1]

    @property
    def n_alb(self) -> int:
        return self.basis_albedo.shape[1]

    @property
    def n_landmarks(self) -> int:
        return self.landmark_indices.size


def synthesize_shape(model: MorphableModel, alpha, beta) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if alpha.shape != (model.n_id,) or beta.shape != (model.n_exp,):
        raise ContractError(
            f"expected alpha ({model.n_id},) and beta ({model.n_exp},), "
            f"got {alpha.shape} and {beta.shape}")
    return model.mean_shape + model.basis_id @ alpha + model.basis_exp @ beta


def synthesize_albedo(model: MorphableModel, gamma) -> np.ndarray:
    """Raw per-vertex albedo; clamping to [0, 1] is left to the renderer."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (model.n_alb,):
        raise ContractError(f"expected gamma ({model.n_alb},), got {gamma.shape}")
    return model.mean_albedo + model.basis_albedo @ gamma


def vertex_normals(vertices, triangles, return_isolated: bool = False):
    """Area-weighted unit vertex normals.

    Vertices touched by no (non-degenerate) triangle get (0, 0, 1); pass
    ``return_isolated=True`` to also receive the boolean flag array.
    """
    V = np.asarray(vertices, dtype=float).reshape(-1, 3)
    F = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if F.shape[0] == 0:
        raise ContractError("mesh has no triangles")
    # cross product magnitude is twice the area: this is the area weighting
    fn = np.cross(V[F[:, 1]] - V[F[:, 0]], V[F[:, 2]] - V[F[:, 0]])
    idx = F.ravel()
    acc = np.stack([np.bincount(idx, np.repeat(fn[:, c], 3), minlength=V.shape[0])
                    for c in range(3)], axis=1)
    norm = np.linalg.norm(acc, axis=1)
    isolated = norm == 0
    out = np.empty_like(acc)
    out[~isolated] = acc[~isolated] / norm[~isolated, None]
    out[isolated] = (0.0, 0.0, 1.0)
    return (out, isolated) if return_isolated else out


# --------------------------------------------------------------------------
# Parameters
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ViewParams:
    quat: np.ndarray          # unit quaternion (w, x, y, z), world-to-camera
    translation: np.ndarray
    sh: np.ndarray            # 27 lighting coefficients

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float)
        if q.shape != (4,):
            raise ContractError("quaternion must have 4 components")
        if abs(np.linalg.norm(q) - 1.0) >= 1e-9:
            q = quat_normalize(q)
        object.__setattr__(self, "quat", _frozen(q))
        object.__setattr__(self, "translation", _frozen(np.asarray(self.translation).reshape(3)))
        sh = np.asarray(self.sh, dtype=float).ravel()
        if sh.shape != (N_SH,):
            raise ContractError(f"lighting needs {N_SH} coefficients")
        object.__setattr__(self, "sh", _frozen(sh))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    @property
    def pose(self) -> PoseSE3:
        return PoseSE3(self.rotation, self.translation)

    @classmethod
    def from_pose(cls, pose: PoseSE3, sh) -> "ViewParams":
        return cls(matrix_to_quat(pose.rotation), pose.translation, sh)


VIEW_PACK = 4 + 3 + N_SH      # quaternion, translation, lighting
VIEW_TANGENT = 3 + 3 + N_SH   # rotation vector replaces the quaternion


@dataclass(frozen=True, eq=False)
class ParameterVector:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    views: tuple = field(default_factory=tuple)

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name)).ravel()))
        object.__setattr__(self, "views", tuple(self.views))

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def n_coeffs(self) -> int:
        return self.alpha.size + self.beta.size + self.gamma.size

    @property
    def size(self) -> int:
        return self.n_coeffs + VIEW_PACK * self.n_views

    @property
    def tangent_size(self) -> int:
        return self.n_coeffs + VIEW_TANGENT * self.n_views

    def pose(self, v: int) -> PoseSE3:
        return self.views[v].pose

    def pack(self) -> np.ndarray:
        parts = [self.alpha, self.beta, self.gamma]
        for vp in self.views:
            parts += [vp.quat, vp.translation, vp.sh]
        return np.concatenate(parts)

    @classmethod
    def unpack(cls, flat, n_id: int, n_exp: int, n_alb: int, n_views: int) -> "ParameterVector":
        flat = np.asarray(flat, dtype=float)
        expected = n_id + n_exp + n_alb + VIEW_PACK * n_views
        if flat.shape != (expected,):
            raise ContractError(f"packed vector must have {expected} entries, got {flat.shape}")
        a, b, g = np.split(flat[:n_id + n_exp + n_alb], [n_id, n_id + n_exp])
        views = []
        off = n_id + n_exp + n_alb
        for _ in range(n_views):
            chunk = flat[off:off + VIEW_PACK]
            views.append(ViewParams(chunk[:4], chunk[4:7], chunk[7:]))
            off += VIEW_PACK
        return cls(a, b, g, tuple(views))

    def retract(self, delta) -> "ParameterVector":
        """Apply a tangent-space step (rotation vectors for the quaternions)."""
        d = np.asarray(delta, dtype=float)
        if d.shape != (self.tangent_size,):
            raise ContractError(f"tangent step must have {self.tangent_size} entries")
        na, nb = self.alpha.size, self.beta.size
        nc = self.n_coeffs
        views = []
        for v, vp in enumerate(self.views):
            c = d[nc + v * VIEW_TANGENT: nc + (v + 1) * VIEW_TANGENT]
            q = vp.quat if not np.any(c[:3]) else quat_retract(vp.quat, c[:3])
            views.append(ViewParams(q, vp.translation + c[3:6], vp.sh + c[6:]))
        return ParameterVector(self.alpha + d[:na], self.beta + d[na:na + nb],
                               self.gamma + d[na + nb:nc], tuple(views))

    def tangent_groups(self) -> dict:
        """Index arrays of the tangent coordinates per parameter group."""
        nc = self.n_coeffs
        groups = {"coeff": list(range(nc)), "rotation": [], "translation": [], "sh": []}
        for v in range(self.n_views):
            base = nc + v * VIEW_TANGENT
            groups["rotation"] += range(base, base + 3)
            groups["translation"] += range(base + 3, base + 6)
            groups["sh"] += range(base + 6, base + VIEW_TANGENT)
        return {k: np.asarray(i, dtype=np.int64) for k, i in groups.items()}

    def with_views(self, views) -> "ParameterVector":
        return replace(self, views=tuple(views))

    def with_coeffs(self, alpha=None, beta=None, gamma=None) -> "ParameterVector":
        return ParameterVector(self.alpha if alpha is None else alpha,
                               self.beta if beta is None else beta,
                               self.gamma if gamma is None else gamma, self.views)

    def to_dict(self) -> dict:
        views = []
        for vp in self.views:
            views.append({
                "euler_deg": matrix_to_euler(vp.rotation).tolist(),
                "quaternion_wxyz": vp.quat.tolist(),
                "translation": vp.translation.tolist(),
                "sh": vp.sh.tolist(),
            })
        return {"alpha": self.alpha.tolist(), "beta": self.beta.tolist(),
                "gamma": self.gamma.tolist(), "views": views}

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterVector":
        views = []
        for v in d["views"]:
            if "quaternion_wxyz" in v:
                q = np.asarray(v["quaternion_wxyz"], dtype=float)
            else:
                q = matrix_to_quat(euler_to_matrix(v["euler_deg"]))
            views.append(ViewParams(q, v["translation"], v["sh"]))
        return cls(d["alpha"], d["beta"], d["gamma"], tuple(views))


def zero_coefficients(model: MorphableModel, views=()) -> ParameterVector:
    return ParameterVector(np.zeros(model.n_id), np.zeros(model.n_exp), np.zeros(model.n_alb),
                           tuple(views))
