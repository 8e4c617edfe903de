"""Error metrics of fitted parameters against ground truth."""
from __future__ import annotations

import numpy as np

from .geometry import CameraIntrinsics, rotation_angle_deg
from .model import MorphableModel, ParameterVector, synthesize_shape


def rotation_errors(params: ParameterVector, gt: ParameterVector) -> np.ndarray:
    """Geodesic rotation distance per view, degrees."""
    return np.array([rotation_angle_deg(params.pose(v).rotation, gt.pose(v).rotation)
                     for v in range(gt.n_views)])


def translation_errors(params: ParameterVector, gt: ParameterVector) -> np.ndarray:
    """Translation error per view as a fraction of the ground-truth face depth."""
    return np.array([np.linalg.norm(params.views[v].translation - gt.views[v].translation)
                     / abs(gt.views[v].translation[2]) for v in range(gt.n_views)])


def project_landmarks(model: MorphableModel, params: ParameterVector, K: CameraIntrinsics, v: int):
    S = synthesize_shape(model, params.alpha, params.beta).reshape(-1, 3)
    Xc = params.pose(v).apply(S[model.landmark_indices])
    return np.stack([K.fx * Xc[:, 0] / Xc[:, 2] + K.cx, K.fy * Xc[:, 1] / Xc[:, 2] + K.cy], axis=1)


def nme(pred, gt) -> float:
    """Mean landmark distance over sqrt(width * height) of the ground-truth bounding box."""
    pred = np.asarray(pred, dtype=float).reshape(-1, 2)
    gt = np.asarray(gt, dtype=float).reshape(-1, 2)
    w, h = gt.max(axis=0) - gt.min(axis=0)
    size = np.sqrt(w * h)
    if size <= 0:
        raise ValueError("degenerate landmark bounding box")
    return float(np.mean(np.linalg.norm(pred - gt, axis=1)) / size)


def landmark_nme(model: MorphableModel, params: ParameterVector, gt: ParameterVector, intrinsics) -> float:
    """NME averaged over views, both sets projected from parameters."""
    return float(np.mean([nme(project_landmarks(model, params, K, v), project_landmarks(model, gt, K, v))
                          for v, K in enumerate(intrinsics)]))


def vertex_rmse(model: MorphableModel, params: ParameterVector, gt: ParameterVector) -> float:
    """Per-vertex RMSE between fitted and true shapes, model frame and units."""
    a = synthesize_shape(model, params.alpha, params.beta).reshape(-1, 3)
    b = synthesize_shape(model, gt.alpha, gt.beta).reshape(-1, 3)
    return float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=1))))


def evaluate(model: MorphableModel, params: ParameterVector, gt: ParameterVector, intrinsics) -> dict:
    rot = rotation_errors(params, gt)
    tr = translation_errors(params, gt)
    return {"rotation_error_deg": float(rot.max()), "rotation_error_per_view_deg": rot.tolist(),
            "translation_error_frac": float(tr.max()), "translation_error_per_view": tr.tolist(),
            "landmark_nme": landmark_nme(model, params, gt, intrinsics),
            "vertex_rmse": vertex_rmse(model, params, gt)}
