"""Occlusion-aware view synthesis between a target and a source view."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BehindCameraError, CameraIntrinsics, PoseSE3
from .raster import EMPTY, EMPTY_DEPTH, FragmentBuffer

_SNAP = 1e-9


@dataclass(frozen=True, eq=False)
class CovisibleMap:
    mask: np.ndarray   # (H, W) bool

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.mask))


def covisible_vertices(vis_t, vis_s) -> np.ndarray:
    a = np.asarray(vis_t, dtype=bool)
    b = np.asarray(vis_s, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"visibility arrays differ in length: {a.shape} vs {b.shape}")
    return a & b


def covisible_triangles(covis_vertices, triangles, mode: str = "any") -> np.ndarray:
    """Triangles adjacent to covisible vertices.

    ``mode="any"`` keeps a triangle with at least one covisible vertex;
    ``mode="all"`` requires all three.
    """
    c = np.asarray(covis_vertices, dtype=bool)[np.asarray(triangles).reshape(-1, 3)]
    if mode == "any":
        return c.any(axis=1)
    if mode == "all":
        return c.all(axis=1)
    raise ValueError(f"unknown adjacency mode {mode!r}")


def covisible_map(covis_triangles, fragments: FragmentBuffer) -> CovisibleMap:
    tid = fragments.triangle_id
    ct = np.asarray(covis_triangles, dtype=bool)
    mask = np.zeros(tid.shape, dtype=bool)
    occ = tid != EMPTY
    mask[occ] = ct[tid[occ]]
    return CovisibleMap(mask)


def warp_points(uv, depth, rel: PoseSE3, K_t: CameraIntrinsics, K_s: CameraIntrinsics):
    """Vectorized pixel warp target -> source; returns ``(uv_s, z_s)``.

    Points that land at or behind the source camera get NaN coordinates.
    """
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    d = np.asarray(depth, dtype=float).reshape(-1)
    Xt = np.stack([(uv[:, 0] - K_t.cx) / K_t.fx * d, (uv[:, 1] - K_t.cy) / K_t.fy * d, d], axis=1)
    Xs = Xt @ rel.rotation.T + rel.translation
    z = Xs[:, 2]
    ok = z > 0
    zs = np.where(ok, z, np.nan)
    us = K_s.fx * Xs[:, 0] / zs + K_s.cx
    vs = K_s.fy * Xs[:, 1] / zs + K_s.cy
    return np.stack([us, vs], axis=1), z


def warp_pixel(p_t, depth_t: float, rel: PoseSE3, K_t: CameraIntrinsics, K_s: CameraIntrinsics):
    """Warp one target pixel with known depth into the source view."""
    if not depth_t > 0:
        raise ValueError(f"target depth must be positive, got {depth_t}")
    uv, z = warp_points(np.asarray(p_t, dtype=float)[None], [depth_t], rel, K_t, K_s)
    if not z[0] > 0:
        raise BehindCameraError(f"warped depth {z[0]:.6g} is behind the source camera")
    return uv[0], float(z[0])


def bilinear_sample(image, points, empty=None):
    """Bilinear lookup at continuous pixel coordinates ``points`` (n, 2) as (u, v).

    Returns ``(values, valid)``. A sample is invalid when a neighbor carrying
    non-zero weight lies outside the image or equals ``empty``.
    """
    img = np.asarray(image, dtype=float)
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    H, W = img.shape[:2]
    u, v = P[:, 0], P[:, 1]
    finite = np.isfinite(u) & np.isfinite(v)
    u = np.where(finite, u, 0.0)
    v = np.where(finite, v, 0.0)
    # round-off from a warp should not drag in a neighbor with ~1e-12 weight
    u = np.where(np.abs(u - np.round(u)) < _SNAP, np.round(u), u)
    v = np.where(np.abs(v - np.round(v)) < _SNAP, np.round(v), v)
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    ax = u - x0
    ay = v - y0
    valid = finite.copy()
    extra = img.shape[2:]
    out = np.zeros((len(P),) + extra)
    for dy, wy in ((0, 1.0 - ay), (1, ay)):
        for dx, wx in ((0, 1.0 - ax), (1, ax)):
            w = wx * wy
            need = w > 0
            xi = x0 + dx
            yi = y0 + dy
            inb = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            valid &= ~need | inb
            xs = np.clip(xi, 0, W - 1)
            ys = np.clip(yi, 0, H - 1)
            val = img[ys, xs]
            if empty is not None:
                is_empty = (val == empty) if not extra else np.any(val == empty, axis=-1)
                valid &= ~(need & is_empty)
            wv = np.where(need & inb, w, 0.0)
            out += (wv.reshape((-1,) + (1,) * len(extra))) * val
    out[~valid] = 0.0
    return out, valid


@dataclass(frozen=True, eq=False)
class SynthesizedView:
    image: np.ndarray       # (H, W, 3) source colors resampled onto target pixels
    depth: np.ndarray       # (H, W) source depth expressed as target-frame z
    valid: np.ndarray       # (H, W) bool: covisible and successfully sampled
    source_uv: np.ndarray   # (H, W, 2) warped coordinates (NaN where not computed)
    source_z: np.ndarray    # (H, W) warped source-frame depth


def synthesize_target(source_image, source_depth, target_depth, covisible, rel: PoseSE3,
                      K_t: CameraIntrinsics, K_s: CameraIntrinsics,
                      occlusion_tol: float | None = None) -> SynthesizedView:
    """Resample a source view onto the target pixels that are covisible.

    Each selected pixel is back-projected with the target depth, moved into
    the source camera, and the source image/depth are sampled bilinearly.
    The sampled source depth is lifted to a 3D point and re-expressed as a
    target-frame z so it can be compared with the target depth directly.
    With ``occlusion_tol`` set, pixels whose sampled source depth disagrees
    with the warped depth by more than the tolerance are dropped.
    """
    Dt = np.asarray(target_depth, dtype=float)
    mask = np.asarray(getattr(covisible, "mask", covisible), dtype=bool) & (Dt != EMPTY_DEPTH) & (Dt > 0)
    H, W = Dt.shape
    rows, cols = np.nonzero(mask)
    uv_t = np.stack([cols, rows], axis=1).astype(float)
    uv_s, z_s = warp_points(uv_t, Dt[rows, cols], rel, K_t, K_s)
    ok = z_s > 0
    img_vals, ok_img = bilinear_sample(source_image, uv_s)
    d_vals, ok_d = bilinear_sample(source_depth, uv_s, empty=EMPTY_DEPTH)
    ok &= ok_img & ok_d
    if occlusion_tol is not None:
        ok &= np.abs(d_vals - np.where(ok, z_s, 0.0)) < occlusion_tol
    # sampled source point in target coordinates
    Xs = np.stack([(uv_s[:, 0] - K_s.cx) / K_s.fx * d_vals,
                   (uv_s[:, 1] - K_s.cy) / K_s.fy * d_vals, d_vals], axis=1)
    Xt = (Xs - rel.translation) @ rel.rotation
    image = np.zeros((H, W) + np.asarray(source_image).shape[2:])
    depth = np.full((H, W), EMPTY_DEPTH)
    valid = np.zeros((H, W), dtype=bool)
    suv = np.full((H, W, 2), np.nan)
    sz = np.full((H, W), np.nan)
    r, c = rows[ok], cols[ok]
    image[r, c] = img_vals[ok]
    depth[r, c] = Xt[ok, 2]
    valid[r, c] = True
    suv[rows, cols] = uv_s
    sz[rows, cols] = z_s
    return SynthesizedView(image, depth, valid, suv, sz)
