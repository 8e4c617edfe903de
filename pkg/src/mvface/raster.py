"""Software z-buffer rasterizer.

Coverage is decided at pixel centers (integer coordinates) with a top-left
style tie-break so that a pixel on an edge shared by two triangles belongs
to exactly one of them. Barycentric weights and depth are perspective
correct. Triangles are culled when any vertex is at or behind the near
plane or when they face away from the camera (front = outward normal
pointing towards the camera center).
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .geometry import CameraIntrinsics, PoseSE3
from .sh import sh_basis

EMPTY = -1            # triangle id of an uncovered pixel
EMPTY_DEPTH = -1.0    # depth value of an uncovered pixel
NEAR = 1e-6


@dataclass(frozen=True, eq=False)
class FragmentBuffer:
    triangle_id: np.ndarray   # (H, W) int32, EMPTY where uncovered
    weights: np.ndarray       # (H, W, 3) perspective-correct barycentrics
    depth: np.ndarray         # (H, W) camera z, EMPTY_DEPTH where uncovered

    @property
    def mask(self) -> np.ndarray:
        return self.triangle_id != EMPTY

    @property
    def shape(self):
        return self.triangle_id.shape


@dataclass(frozen=True, eq=False)
class RenderOutputs:
    image: np.ndarray              # (H, W, 3) in [0, 1], zero background
    depth: np.ndarray              # (H, W), EMPTY_DEPTH background
    fragments: FragmentBuffer
    visible_vertices: np.ndarray   # (V,) bool

    @property
    def mask(self) -> np.ndarray:
        return self.fragments.mask


@numba.njit(cache=True, nogil=True)
def _edge(ax, ay, bx, by, px, py, ia, ib):
    # evaluated in canonical vertex order so a shared edge yields exactly
    # negated values in its two triangles (watertight coverage)
    if ia < ib:
        return (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    return -((ax - bx) * (py - by) - (ay - by) * (px - bx))


@numba.njit(cache=True, nogil=True)
def _owns_tie(ax, ay, bx, by):
    dx = bx - ax
    dy = by - ay
    return dy > 0.0 or (dy == 0.0 and dx < 0.0)


@numba.njit(cache=True, nogil=True)
def _raster_kernel(cam, tris, fx, fy, cx, cy, tri_id, weights, depth):
    H, W = tri_id.shape
    for f in range(tris.shape[0]):
        i0 = tris[f, 0]
        i1 = tris[f, 1]
        i2 = tris[f, 2]
        x0, y0, z0 = cam[i0, 0], cam[i0, 1], cam[i0, 2]
        x1, y1, z1 = cam[i1, 0], cam[i1, 1], cam[i1, 2]
        x2, y2, z2 = cam[i2, 0], cam[i2, 1], cam[i2, 2]
        if z0 <= NEAR or z1 <= NEAR or z2 <= NEAR:
            continue
        # outward normal must point towards the camera center (origin)
        ex, ey, ez = x1 - x0, y1 - y0, z1 - z0
        gx, gy, gz = x2 - x0, y2 - y0, z2 - z0
        nx = ey * gz - ez * gy
        ny = ez * gx - ex * gz
        nz = ex * gy - ey * gx
        if nx * x0 + ny * y0 + nz * z0 >= 0.0:
            continue
        u0 = fx * x0 / z0 + cx
        v0 = fy * y0 / z0 + cy
        u1 = fx * x1 / z1 + cx
        v1 = fy * y1 / z1 + cy
        u2 = fx * x2 / z2 + cx
        v2 = fy * y2 / z2 + cy
        area = _edge(u0, v0, u1, v1, u2, v2, i0, i1)
        if area == 0.0:
            continue
        sign = 1.0 if area > 0.0 else -1.0
        area *= sign
        # tie-break direction follows the positively oriented traversal
        if sign > 0.0:
            t12 = _owns_tie(u1, v1, u2, v2)
            t20 = _owns_tie(u2, v2, u0, v0)
            t01 = _owns_tie(u0, v0, u1, v1)
        else:
            t12 = _owns_tie(u2, v2, u1, v1)
            t20 = _owns_tie(u0, v0, u2, v2)
            t01 = _owns_tie(u1, v1, u0, v0)
        xmin = max(0, int(np.ceil(min(u0, u1, u2))))
        xmax = min(W - 1, int(np.floor(max(u0, u1, u2))))
        ymin = max(0, int(np.ceil(min(v0, v1, v2))))
        ymax = min(H - 1, int(np.floor(max(v0, v1, v2))))
        iz0 = 1.0 / z0
        iz1 = 1.0 / z1
        iz2 = 1.0 / z2
        for py in range(ymin, ymax + 1):
            fy_ = float(py)
            for px in range(xmin, xmax + 1):
                fx_ = float(px)
                e0 = sign * _edge(u1, v1, u2, v2, fx_, fy_, i1, i2)
                e1 = sign * _edge(u2, v2, u0, v0, fx_, fy_, i2, i0)
                e2 = sign * _edge(u0, v0, u1, v1, fx_, fy_, i0, i1)
                if e0 < 0.0 or e1 < 0.0 or e2 < 0.0:
                    continue
                if (e0 == 0.0 and not t12) or (e1 == 0.0 and not t20) or (e2 == 0.0 and not t01):
                    continue
                a0 = e0 / area * iz0
                a1 = e1 / area * iz1
                a2 = e2 / area * iz2
                s = a0 + a1 + a2
                d = 1.0 / s
                cur = depth[py, px]
                if cur < 0.0 or d < cur:
                    depth[py, px] = d
                    tri_id[py, px] = f
                    weights[py, px, 0] = a0 / s
                    weights[py, px, 1] = a1 / s
                    weights[py, px, 2] = a2 / s


def rasterize(vertices, triangles, pose: PoseSE3, K: CameraIntrinsics) -> FragmentBuffer:
    V = np.asarray(vertices, dtype=float).reshape(-1, 3)
    F = np.ascontiguousarray(np.asarray(triangles, dtype=np.int64).reshape(-1, 3))
    cam = np.ascontiguousarray(pose.apply(V))
    tri_id = np.full((K.height, K.width), EMPTY, dtype=np.int32)
    weights = np.zeros((K.height, K.width, 3))
    depth = np.full((K.height, K.width), EMPTY_DEPTH)
    if F.shape[0]:
        _raster_kernel(cam, F, float(K.fx), float(K.fy), float(K.cx), float(K.cy),
                       tri_id, weights, depth)
    for a in (tri_id, weights, depth):
        a.setflags(write=False)
    return FragmentBuffer(tri_id, weights, depth)


def depth_map(fragments: FragmentBuffer) -> np.ndarray:
    return fragments.depth.copy()


def interpolate(fragments: FragmentBuffer, triangles, attribute) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric interpolation of a per-vertex attribute at covered pixels.

    Returns ``(values, (rows, cols))`` for the covered pixels in row-major order.
    """
    F = np.asarray(triangles).reshape(-1, 3)
    rows, cols = np.nonzero(fragments.mask)
    tid = fragments.triangle_id[rows, cols]
    w = fragments.weights[rows, cols]
    A = np.asarray(attribute, dtype=float)
    corners = A[F[tid]]                      # (n, 3, k)
    return np.einsum("nj,njk->nk", w, corners), (rows, cols)


def shade_fragments(fragments: FragmentBuffer, triangles, normals, albedo, theta) -> np.ndarray:
    """Per-pixel SH shading of interpolated normals and albedo, clamped to [0, 1]."""
    H, W = fragments.shape
    image = np.zeros((H, W, 3))
    if not fragments.mask.any():
        return image
    N = np.asarray(normals, dtype=float).reshape(-1, 3)
    A = np.asarray(albedo, dtype=float).reshape(-1, 3)
    attrs, (rows, cols) = interpolate(fragments, triangles, np.hstack([N, A]))
    n = attrs[:, :3]
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    alb = np.clip(attrs[:, 3:], 0.0, 1.0)
    irr = sh_basis(n) @ np.asarray(theta, dtype=float).reshape(9, 3)
    image[rows, cols] = np.clip(alb * irr, 0.0, 1.0)
    return image


def visible_vertices(fragments: FragmentBuffer, triangles, n_vertices: int) -> np.ndarray:
    """Vertices of every triangle that owns at least one pixel."""
    F = np.asarray(triangles).reshape(-1, 3)
    vis = np.zeros(n_vertices, dtype=bool)
    owners = np.unique(fragments.triangle_id[fragments.mask])
    if owners.size:
        vis[F[owners].ravel()] = True
    return vis


def render(vertices, triangles, pose: PoseSE3, K: CameraIntrinsics,
           normals, albedo, theta) -> RenderOutputs:
    V = np.asarray(vertices, dtype=float).reshape(-1, 3)
    frags = rasterize(V, triangles, pose, K)
    image = shade_fragments(frags, triangles, normals, albedo, theta)
    vis = visible_vertices(frags, triangles, V.shape[0])
    return RenderOutputs(image, depth_map(frags), frags, vis)
