"""Camera intrinsics, rigid poses, quaternions and pinhole projection.

Pose convention is world-to-camera throughout: ``X_cam = R @ X_world + t``.
Cameras look down their +z axis, image ``u`` grows to the right and ``v``
grows downwards. Integer pixel coordinates are pixel centers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9


class BehindCameraError(ValueError):
    """A point that must be projected lies at or behind the camera plane."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse_matrix(self) -> np.ndarray:
        return np.array([
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


# --------------------------------------------------------------------------
# Quaternions, scalar-first (w, x, y, z)
# --------------------------------------------------------------------------

def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0:
        raise ValueError("zero quaternion")
    q = q / n
    # canonical hemisphere keeps packing deterministic
    return -q if q[0] < 0 else q


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    return quat_normalize([w, x, y, z])


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_from_rotvec(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    angle = np.linalg.norm(w)
    if angle < 1e-12:
        # second-order accurate near zero
        q = np.array([1.0 - angle * angle / 8.0, *(0.5 * w)])
        return q / np.linalg.norm(q)
    axis = w / angle
    return np.array([np.cos(angle / 2), *(np.sin(angle / 2) * axis)])


def quat_retract(q, rotvec) -> np.ndarray:
    """Left-multiply ``q`` by the rotation ``exp(rotvec)`` and renormalize."""
    return quat_normalize(quat_multiply(quat_from_rotvec(rotvec), q))


def euler_to_matrix(angles_deg) -> np.ndarray:
    """Extrinsic x-y-z Euler angles in degrees (pitch, yaw, roll)."""
    return Rotation.from_euler("xyz", angles_deg, degrees=True).as_matrix()


def matrix_to_euler(R) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_euler("xyz", degrees=True)


def rotation_angle_deg(R_a, R_b) -> float:
    """Geodesic distance between two rotations, in degrees."""
    # the rotation-vector norm stays accurate for tiny angles, unlike arccos
    rel = np.asarray(R_a, dtype=float) @ np.asarray(R_b, dtype=float).T
    return float(np.degrees(Rotation.from_matrix(rel).magnitude()))


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# --------------------------------------------------------------------------
# Rigid poses
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PoseSE3:
    """World-to-camera rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quat(cls, q, t) -> "PoseSE3":
        return cls(quat_to_matrix(quat_normalize(q)), t)

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return X @ self.rotation.T + self.translation

    def inverse(self) -> "PoseSE3":
        Rt = self.rotation.T
        return PoseSE3(Rt, -Rt @ self.translation)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """``self ∘ other``: apply ``other`` first."""
        return PoseSE3(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M


def relative_pose(pose_t: PoseSE3, pose_s: PoseSE3) -> PoseSE3:
    """Transform taking target-camera coordinates to source-camera coordinates."""
    R_rel = pose_s.rotation @ pose_t.rotation.T
    t_rel = pose_s.translation - R_rel @ pose_t.translation
    # re-orthonormalize away the last-ulp drift of the product
    u, _, vt = np.linalg.svd(R_rel)
    return PoseSE3(u @ vt, t_rel)


def project_points(points_cam, K: CameraIntrinsics):
    """Vectorized pinhole projection of camera-frame points, no depth check."""
    P = np.asarray(points_cam, dtype=float)
    z = P[..., 2]
    u = K.fx * P[..., 0] / z + K.cx
    v = K.fy * P[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1), z


def project(point_world, pose: PoseSE3, K: CameraIntrinsics):
    """Project one world point; returns ``((u, v), depth)``."""
    X = pose.apply(np.asarray(point_world, dtype=float).reshape(3))
    if X[2] <= 0:
        raise BehindCameraError(f"camera-space depth {X[2]:.6g} is not positive")
    uv, z = project_points(X, K)
    return uv, float(z)


def backproject(uv, depth, K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points for pixels ``uv`` (n, 2) at z-depth ``depth`` (n,)."""
    uv = np.asarray(uv, dtype=float)
    d = np.asarray(depth, dtype=float)
    x = (uv[..., 0] - K.cx) / K.fx * d
    y = (uv[..., 1] - K.cy) / K.fy * d
    return np.stack([x, y, d], axis=-1)
