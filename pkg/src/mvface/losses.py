"""Loss terms: 2D feature losses and multi-view geometry consistency losses."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from .geometry import CameraIntrinsics, PoseSE3, skew


class EmptyMaskError(ValueError):
    """No pixel contributes to a term that requires at least one."""


class SkippedTerm(Exception):
    """A multi-view term cannot be evaluated for this view pair."""


@dataclass(frozen=True)
class LossWeights:
    w_render: float = 1.9
    w_lm: float = 1e-3
    w_id: float = 0.2
    w_reg: float = 1e-4
    w_id_reg: float = 1.0
    w_exp_reg: float = 0.8
    w_tex_reg: float = 3e-3
    w_2d: float = 1.0
    w_mul: float = 1.0
    w_pixel: float = 0.15
    w_depth: float = 1e-4
    w_epi: float = 1e-3

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"weight {f.name} must be a finite non-negative number, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown weight names: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    @classmethod
    def load(cls, path) -> "LossWeights":
        """Read a JSON object of overrides; missing names keep their defaults."""
        with open(path) as fh:
            d = json.load(fh)
        if not isinstance(d, dict):
            raise ValueError("weights file must contain a JSON object")
        return cls.from_dict(d)

    def replace(self, **kw) -> "LossWeights":
        d = self.to_dict()
        d.update(kw)
        return LossWeights(**d)


# --------------------------------------------------------------------------
# 2D feature losses
# --------------------------------------------------------------------------

def render_loss(image, rendered, mask, w_skin=None) -> float:
    """Mean over the face mask of the skin-weighted per-pixel RGB L2 distance."""
    m = np.asarray(mask, dtype=bool)
    M = int(m.sum())
    if M == 0:
        raise EmptyMaskError("no face pixels were rendered")
    diff = np.linalg.norm(np.asarray(image, dtype=float)[m] - np.asarray(rendered, dtype=float)[m], axis=-1)
    w = np.ones(M) if w_skin is None else np.broadcast_to(np.asarray(w_skin, dtype=float), m.shape)[m]
    return float(np.sum(w * diff) / M)


def landmark_loss(q_gt, q, confidence) -> float:
    q_gt = np.asarray(q_gt, dtype=float).reshape(-1, 2)
    q = np.asarray(q, dtype=float).reshape(-1, 2)
    if q_gt.shape != q.shape:
        raise ValueError("landmark arrays differ in length")
    return float(np.sum(np.asarray(confidence, dtype=float) * np.sum((q_gt - q) ** 2, axis=1)))


def regularization_loss(alpha, beta, gamma, weights: LossWeights = LossWeights()) -> float:
    return float(weights.w_id_reg * np.sum(np.square(alpha))
                 + weights.w_exp_reg * np.sum(np.square(beta))
                 + weights.w_tex_reg * np.sum(np.square(gamma)))


EmbeddingProvider = Callable[[np.ndarray], Optional[np.ndarray]]


def null_embedding(image) -> None:
    """Default provider: no face-recognition network, identity term inactive."""
    return None


def mean_rgb_embedding(image) -> np.ndarray:
    return np.asarray(image, dtype=float).reshape(-1, 3).mean(axis=0)


def identity_loss(provider: EmbeddingProvider, image, rendered) -> tuple[float, bool]:
    """Cosine distance of two embeddings; returns ``(value, active)``."""
    e1 = provider(image)
    e2 = provider(rendered)
    if e1 is None or e2 is None:
        return 0.0, False
    e1 = np.asarray(e1, dtype=float).ravel()
    e2 = np.asarray(e2, dtype=float).ravel()
    n = np.linalg.norm(e1) * np.linalg.norm(e2)
    if n == 0:
        return 0.0, False
    return float(1.0 - np.dot(e1, e2) / n), True


# --------------------------------------------------------------------------
# Multi-view losses
# --------------------------------------------------------------------------

def pixel_consistency_loss(synth, target, mask) -> float:
    """Channel-averaged mean absolute difference over the effective mask."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise SkippedTerm("no covisible pixels")
    d = np.abs(np.asarray(synth, dtype=float)[m] - np.asarray(target, dtype=float)[m])
    return float(d.reshape(d.shape[0], -1).mean(axis=1).mean())


def depth_scale(synth_depth, target_depth, mask) -> float:
    m = np.asarray(mask, dtype=bool)
    den = float(np.sum(np.asarray(synth_depth, dtype=float)[m]))
    if not m.any() or den <= 0:
        raise SkippedTerm("depth scale ratio undefined")
    return float(np.sum(np.asarray(target_depth, dtype=float)[m])) / den


def depth_consistency_loss(synth_depth, target_depth, mask) -> float:
    m = np.asarray(mask, dtype=bool)
    s = depth_scale(synth_depth, target_depth, m)
    Dw = np.asarray(synth_depth, dtype=float)[m]
    Dt = np.asarray(target_depth, dtype=float)[m]
    return float(np.mean(np.abs(s * Dw - Dt)))


def essential_matrix(rel: PoseSE3) -> np.ndarray:
    return skew(rel.translation) @ rel.rotation


def fundamental_matrix(rel: PoseSE3, K_t: CameraIntrinsics, K_s: CameraIntrinsics) -> np.ndarray:
    return K_s.inverse_matrix.T @ essential_matrix(rel) @ K_t.inverse_matrix


def epipolar_distances(q_t, q_s, F):
    """Signed point-to-epipolar-line distances in both directions.

    Returns ``(forward, backward, ok)``: distance of the source point to the
    line ``F p`` and of the target point to ``F^T p'``; ``ok`` is False for
    pairs whose line is undefined (those distances are 0).
    """
    p = np.hstack([np.asarray(q_t, dtype=float).reshape(-1, 2), np.ones((len(q_t), 1))])
    pp = np.hstack([np.asarray(q_s, dtype=float).reshape(-1, 2), np.ones((len(q_s), 1))])
    Fp = p @ F.T
    Ftpp = pp @ F
    num = np.einsum("ik,ik->i", pp, Fp)
    n1 = np.hypot(Fp[:, 0], Fp[:, 1])
    n2 = np.hypot(Ftpp[:, 0], Ftpp[:, 1])
    ok = (n1 > 0) & (n2 > 0)
    fwd = np.where(ok, num / np.where(ok, n1, 1.0), 0.0)
    bwd = np.where(ok, num / np.where(ok, n2, 1.0), 0.0)
    return fwd, bwd, ok


def epipolar_loss(q_t, q_s, rel: PoseSE3, K_t: CameraIntrinsics, K_s: CameraIntrinsics,
                  min_baseline: float = 1e-9) -> float:
    """Symmetric epipolar distance summed over landmark pairs, in pixels."""
    if np.linalg.norm(rel.translation) < min_baseline:
        raise SkippedTerm("pure rotation: epipolar geometry is degenerate")
    fwd, bwd, _ = epipolar_distances(q_t, q_s, fundamental_matrix(rel, K_t, K_s))
    return float(np.sum(np.abs(fwd)) + np.sum(np.abs(bwd)))


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

@dataclass
class LossReport:
    total: float
    terms: dict                    # weighted-sum inputs: render, landmark, reg, id, l2d, pixel, depth, epi
    per_view: list                 # dicts of 2D terms per view
    per_pair: list                 # dicts per (target, source) pair
    covisible_counts: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"total": self.total, "terms": self.terms, "per_view": self.per_view,
                "per_pair": self.per_pair, "covisible_counts": self.covisible_counts,
                "warnings": self.warnings}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def combine(terms: dict, weights: LossWeights) -> float:
    """Weighted sum of the averaged terms."""
    mul = (weights.w_pixel * terms["pixel"] + weights.w_depth * terms["depth"]
           + weights.w_epi * terms["epi"])
    return weights.w_2d * terms["l2d"] + weights.w_mul * mul


def combine_2d(render: float, landmark: float, identity: float, reg: float,
               weights: LossWeights) -> float:
    return (weights.w_render * render + weights.w_lm * landmark + weights.w_id * identity
            + weights.w_reg * reg)
