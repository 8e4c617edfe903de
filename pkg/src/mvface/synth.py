"""Procedural morphable model, camera rigs and ground-truth scenes.

All randomness comes from ``numpy.random.Generator(PCG64(seed))``, so a
seed fully determines every array produced here.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.polynomial import legendre
from scipy.spatial import Delaunay

from .geometry import CameraIntrinsics, PoseSE3, euler_to_matrix, quat_retract
from .model import MorphableModel, ParameterVector, ViewParams, synthesize_albedo, synthesize_shape, vertex_normals
from .raster import render
from .sh import UNIT_IRRADIANCE

# face cap geometry, model units
RADII = np.array([0.85, 1.05, 0.6])
CAP_ANGLE = np.radians(60.0)
NOSE_CENTER = np.array([0.0, -0.08])
NOSE_SIGMA = np.array([0.11, 0.24])
NOSE_HEIGHT = 0.2
MOUTH_CENTER = np.array([0.0, -0.52])
# >1 packs vertices towards the face center, where the nose occludes
CENTER_DENSITY = 1.4

# landmark layout: nose group and inner mouth ring carry confidence 10
N_NOSE_LM = 6
N_MOUTH_LM = 8
N_CONTOUR_LM = 13
HIGH_CONFIDENCE = 10.0

# camera looks down +z with y pointing down; the face looks along model +z
CAMERA_FLIP = np.diag([1.0, -1.0, -1.0])


class NoOverlapError(RuntimeError):
    """The generated views do not share enough covisible surface."""


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _disk_points(n_vertices: int):
    """Sunflower interior plus an evenly spaced rim on the unit disk."""
    spacing = np.sqrt(np.pi / n_vertices * 2.0 / np.sqrt(3.0))
    n_rim = max(6, int(round(2 * np.pi / spacing)))
    n_in = n_vertices - n_rim
    if n_in < 1:
        n_rim, n_in = n_vertices - 1, 1
    golden = np.pi * (3.0 - np.sqrt(5.0))
    k = np.arange(n_in)
    r = np.sqrt((k + 0.5) / n_in) * (1.0 - 0.5 * spacing)
    phi = k * golden
    inner = np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)
    a = 2 * np.pi * np.arange(n_rim) / n_rim
    rim = np.stack([np.cos(a), np.sin(a)], axis=1)
    inner *= (r ** (CENTER_DENSITY - 1.0))[:, None]
    return np.vstack([inner, rim])


def _cap_positions(disk):
    rho = np.linalg.norm(disk, axis=1)
    phi = np.arctan2(disk[:, 1], disk[:, 0])
    # equal-area map of the disk onto the spherical cap
    theta = np.arccos(1.0 - rho ** 2 * (1.0 - np.cos(CAP_ANGLE)))
    d = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=1)
    P = d * RADII
    dx = (P[:, 0] - NOSE_CENTER[0]) / NOSE_SIGMA[0]
    dy = (P[:, 1] - NOSE_CENTER[1]) / NOSE_SIGMA[1]
    # nose: a ridge that widens towards its base
    P[:, 2] += NOSE_HEIGHT * np.exp(-0.5 * (dx ** 2 + dy ** 2))
    return P


def _smooth_fields(P, rng, count: int, degree: int = 4, decay: float = 1.0):
    """Random smooth scalar fields on the face: products of Legendre polynomials."""
    x = P[:, 0] / RADII[0]
    y = P[:, 1] / RADII[1]
    Lx = legendre.legvander(np.clip(x, -1, 1), degree)
    Ly = legendre.legvander(np.clip(y, -1, 1), degree)
    out = np.empty((P.shape[0], count))
    for c in range(count):
        coef = rng.standard_normal((degree + 1, degree + 1))
        i, j = np.meshgrid(np.arange(degree + 1), np.arange(degree + 1), indexing="ij")
        coef /= (1.0 + i + j) ** decay
        out[:, c] = np.einsum("vi,ij,vj->v", Lx, coef, Ly)
    return out


def _nearest_unique(P2, targets):
    taken = set()
    idx = []
    for t in targets:
        order = np.argsort(np.linalg.norm(P2 - t, axis=1))
        for i in order:
            if int(i) not in taken:
                taken.add(int(i))
                idx.append(int(i))
                break
    return np.asarray(idx, dtype=np.int64)


def generate_model(seed: int = 0, V: int = 1500, n_id: int = 16, n_exp: int = 8,
                   n_alb: int = 8) -> MorphableModel:
    """Build a face-like morphable model with orthogonal, spectrally decaying bases."""
    if V < 12:
        raise ValueError("need at least 12 vertices")
    rng = _rng(seed)
    disk = _disk_points(V)
    tri = Delaunay(disk).simplices.astype(np.int64)
    # counter-clockwise in the disk means outward (+z) normals on the cap
    a, b, c = disk[tri[:, 0]], disk[tri[:, 1]], disk[tri[:, 2]]
    cw = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]) < 0
    tri[cw] = tri[cw][:, [0, 2, 1]]
    P = _cap_positions(disk)
    n = vertex_normals(P, tri)

    # identity: global fields; expression: fields windowed around the mouth
    def displacement_fields(count, window):
        f = _smooth_fields(P, rng, 3 * count)
        cols = []
        for k in range(count):
            d = (n * f[:, 3 * k, None] + 0.3 * np.stack(
                [f[:, 3 * k + 1], f[:, 3 * k + 2], np.zeros(len(P))], axis=1)) * window[:, None]
            cols.append(d.ravel())
        return np.stack(cols, axis=1)

    ones = np.ones(len(P))
    mouth = np.exp(-0.5 * np.sum(((P[:, :2] - MOUTH_CENTER) / [0.4, 0.3]) ** 2, axis=1))
    Q, _ = np.linalg.qr(np.hstack([displacement_fields(n_id, ones), displacement_fields(n_exp, mouth)]))
    scale_id = 0.05 / np.sqrt(1.0 + np.arange(n_id))
    scale_exp = 0.035 / np.sqrt(1.0 + np.arange(n_exp))
    sq = np.sqrt(len(P))
    basis_id = Q[:, :n_id] * scale_id * sq
    basis_exp = Q[:, n_id:] * scale_exp * sq

    g = _smooth_fields(P, rng, 3 * n_alb)
    Qa, _ = np.linalg.qr(np.stack([g[:, 3 * k:3 * k + 3].ravel() for k in range(n_alb)], axis=1))
    basis_albedo = Qa * (0.06 / np.sqrt(1.0 + np.arange(n_alb))) * sq

    skin = np.array([0.72, 0.54, 0.44])
    lips = np.array([0.62, 0.32, 0.32])
    lip_w = np.exp(-0.5 * np.sum(((P[:, :2] - MOUTH_CENTER) / [0.2, 0.07]) ** 2, axis=1))
    eyes = sum(np.exp(-0.5 * np.sum(((P[:, :2] - [sx, 0.28]) / [0.13, 0.07]) ** 2, axis=1))
               for sx in (-0.32, 0.32))
    albedo = skin * (1 - lip_w[:, None]) + lips * lip_w[:, None]
    albedo = albedo * (1.0 - 0.45 * eyes[:, None])

    nose_tip = np.argmax(P[:, 2])
    tip_xy = P[nose_tip, :2]
    nose_targets = [tip_xy, tip_xy + [0, 0.15], tip_xy + [0, 0.3], tip_xy + [-0.12, -0.1],
                    tip_xy + [0.12, -0.1], tip_xy + [0, -0.17]]
    ang = 2 * np.pi * np.arange(N_MOUTH_LM) / N_MOUTH_LM
    mouth_targets = list(MOUTH_CENTER + np.stack([0.18 * np.cos(ang), 0.06 * np.sin(ang)], axis=1))
    ang = 2 * np.pi * np.arange(N_CONTOUR_LM) / N_CONTOUR_LM + np.pi / 2
    contour_targets = list(np.stack([0.78 * RADII[0] * np.cos(ang), 0.78 * RADII[1] * np.sin(ang)], axis=1))
    lm = _nearest_unique(P[:, :2], nose_targets[:1] + nose_targets[1:] + mouth_targets + contour_targets)
    conf = np.array([HIGH_CONFIDENCE] * (N_NOSE_LM + N_MOUTH_LM) + [1.0] * N_CONTOUR_LM)

    # float32-representable values, so the binary container round-trips exactly
    f32 = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)
    return MorphableModel(f32(P.ravel()), f32(albedo.ravel()), f32(basis_id), f32(basis_exp),
                          f32(basis_albedo), tri, lm, conf)


# --------------------------------------------------------------------------
# Rigs and scenes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RigSpec:
    n_views: int = 3
    yaw_step: float = 20.0          # degrees between neighbouring views
    image_size: int = 128
    focal: float = 300.0            # pixels
    distance: float = 5.5           # camera to face origin, model units
    seed: int = 0
    head_jitter: float = 5.0        # degrees of random head yaw/pitch
    coeff_scale: float = 1.0
    texture_detail: float = 0.0     # amplitude of out-of-model albedo detail
    landmark_noise: float = 0.0     # pixel std of 2D landmark noise
    min_overlap: float = 0.3        # covisible fraction required per pair
    model_vertices: int = 1500
    model_seed: int = 0

    def __post_init__(self):
        if self.n_views < 1:
            raise ValueError("a rig needs at least one view")
        if self.image_size < 8 or self.focal <= 0 or self.distance <= 0:
            raise ValueError("invalid camera settings")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        c = (self.image_size - 1) / 2.0
        return CameraIntrinsics(self.focal, self.focal, c, c, self.image_size, self.image_size)

    @property
    def yaw_offsets(self) -> np.ndarray:
        return (np.arange(self.n_views) - (self.n_views - 1) / 2.0) * self.yaw_step

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RigSpec":
        return cls(**d)


@dataclass(eq=False)
class ViewRig:
    intrinsics: list
    images: list            # observed (H, W, 3) images
    landmarks: list         # observed (L, 2) pixel landmarks
    masks: list = field(default_factory=list)   # observed face masks (informational)

    @property
    def n_views(self) -> int:
        return len(self.images)


@dataclass(eq=False)
class Scene:
    model: MorphableModel
    params: ParameterVector      # ground truth
    rig: ViewRig
    spec: RigSpec
    depths: list = field(default_factory=list)   # ground-truth depth maps


def camera_pose(yaw_deg: float, pitch_deg: float, distance: float, shift=(0.0, 0.0)) -> PoseSE3:
    R = CAMERA_FLIP @ euler_to_matrix([pitch_deg, yaw_deg, 0.0])
    return PoseSE3(R, np.array([shift[0], shift[1], distance]))


def ground_truth_lighting(rng) -> np.ndarray:
    theta = np.zeros((9, 3))
    theta[0] = UNIT_IRRADIANCE * (0.85 + 0.1 * rng.random(3))
    light = rng.standard_normal(3)
    light[2] = abs(light[2]) + 1.0
    light /= np.linalg.norm(light)
    # band-1 coefficients are ordered (y, z, x)
    theta[1:4] = 0.9 * np.array([light[1], light[2], light[0]])[:, None]
    theta[4:] = 0.08 * rng.standard_normal((5, 3))
    return theta.ravel()


def render_params(model: MorphableModel, params: ParameterVector, K: CameraIntrinsics, v: int,
                  albedo_detail=None):
    S = synthesize_shape(model, params.alpha, params.beta).reshape(-1, 3)
    T = synthesize_albedo(model, params.gamma).reshape(-1, 3)
    if albedo_detail is not None:
        T = T + albedo_detail
    N = vertex_normals(S, model.triangles)
    return render(S, model.triangles, params.pose(v), K, N, T, params.views[v].sh)


def project_landmarks(model: MorphableModel, params: ParameterVector, K: CameraIntrinsics, v: int):
    S = synthesize_shape(model, params.alpha, params.beta).reshape(-1, 3)
    Xc = params.pose(v).apply(S[model.landmark_indices])
    return np.stack([K.fx * Xc[:, 0] / Xc[:, 2] + K.cx, K.fy * Xc[:, 1] / Xc[:, 2] + K.cy], axis=1)


def generate_scene(model: MorphableModel, spec: RigSpec = RigSpec(), max_retries: int = 5,
                   check_overlap: bool = True) -> Scene:
    rng = _rng(spec.seed)
    K = spec.intrinsics
    s = spec.coeff_scale

    def coeffs(n):
        return np.clip(rng.standard_normal(n) * s, -3 * s, 3 * s) if s > 0 else np.zeros(n)

    alpha, beta, gamma = coeffs(model.n_id), coeffs(model.n_exp), coeffs(model.n_alb)
    theta = ground_truth_lighting(rng)
    detail = None
    if spec.texture_detail > 0:
        detail = spec.texture_detail * (rng.random((model.n_vertices, 1)) - 0.5) * [1.0, 0.9, 0.8]

    for _ in range(max_retries):
        jy, jp = spec.head_jitter * (2 * rng.random(2) - 1)
        shift = 0.05 * (2 * rng.random(2) - 1)
        views = [ViewParams.from_pose(camera_pose(off + jy, jp, spec.distance, shift), theta)
                 for off in spec.yaw_offsets]
        params = ParameterVector(alpha, beta, gamma, tuple(views))
        renders = [render_params(model, params, K, v, detail) for v in range(spec.n_views)]
        if all(r.mask.any() for r in renders):
            break
    else:
        raise RuntimeError("could not place cameras that see the face")

    landmarks = []
    for v in range(spec.n_views):
        q = project_landmarks(model, params, K, v)
        if spec.landmark_noise > 0:
            q = q + spec.landmark_noise * rng.standard_normal(q.shape)
        if not (np.all(np.isfinite(q)) and q.min() >= 0 and q[:, 0].max() <= K.width - 1
                and q[:, 1].max() <= K.height - 1):
            raise RuntimeError(f"landmarks of view {v} leave the image")
        landmarks.append(q)

    rig = ViewRig([K] * spec.n_views, [r.image for r in renders], landmarks,
                  [r.mask for r in renders])
    scene = Scene(model, params, rig, spec, [r.depth for r in renders])
    if check_overlap and spec.n_views > 1:
        from .objective import pair_overlap
        for t, src, frac in pair_overlap(scene):
            if frac < spec.min_overlap:
                raise NoOverlapError(
                    f"views {t} and {src} share {100 * frac:.1f}% covisible pixels "
                    f"(< {100 * spec.min_overlap:.0f}%)")
    return scene


def perturb(params: ParameterVector, rotation_deg: float = 0.0, translation_frac: float = 0.0,
            coeff_sigma: float = 0.0, seed: int = 0) -> ParameterVector:
    """Random rotation of exact magnitude, translation offset and coefficient noise per view."""
    rng = _rng(seed)
    views = []
    for vp in params.views:
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        q = quat_retract(vp.quat, np.radians(rotation_deg) * axis) if rotation_deg else vp.quat
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        t = vp.translation + translation_frac * np.linalg.norm(vp.translation) * d
        views.append(ViewParams(q, t, vp.sh))

    def noisy(a):
        return a + coeff_sigma * rng.standard_normal(a.size) if coeff_sigma else a

    return ParameterVector(noisy(params.alpha), noisy(params.beta), noisy(params.gamma), tuple(views))
