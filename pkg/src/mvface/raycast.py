"""Exact ray/triangle casting, used as an independent visibility oracle.

Nothing here shares code with the rasterizer: rays go through pixel centers
and every triangle is intersected with Moller-Trumbore.
"""
from __future__ import annotations

import numpy as np

from .geometry import CameraIntrinsics, PoseSE3
from .raster import EMPTY

_EPS = 1e-12


def intersect(origins, directions, v0, v1, v2, chunk: int = 64):
    """Nearest hit of every ray against every triangle.

    Returns ``(tri, t, b1, b2)``: triangle index (EMPTY when missed), ray
    parameter, and the barycentrics of vertices 1 and 2 at the hit.
    """
    return _intersect(origins, directions, v0, v1, v2, chunk, None)


def _screen_boxes(v0, v1, v2):
    """Bounding boxes of triangles on the z=1 plane of a camera at the origin.

    Triangles reaching z <= 0 get an infinite box so they are never culled.
    """
    Z = np.stack([v0[:, 2], v1[:, 2], v2[:, 2]], axis=1)
    ok = Z.min(axis=1) > 0
    Zs = np.where(ok[:, None], Z, 1.0)
    X = np.stack([v0[:, 0], v1[:, 0], v2[:, 0]], axis=1) / Zs
    Y = np.stack([v0[:, 1], v1[:, 1], v2[:, 1]], axis=1) / Zs
    lo = np.stack([X.min(1), Y.min(1)], axis=1)
    hi = np.stack([X.max(1), Y.max(1)], axis=1)
    lo[~ok] = -np.inf
    hi[~ok] = np.inf
    return lo, hi


def intersect_from_camera(directions, v0, v1, v2, chunk: int = 256):
    """Nearest hits of rays leaving the camera center (the origin).

    Rays are grouped spatially and tested only against triangles whose
    projected bounding box overlaps the group's; the culling is conservative
    so results equal the brute-force :func:`intersect`.
    """
    D = np.asarray(directions, dtype=float)
    xy = D[:, :2] / D[:, 2:3]
    return _intersect(np.zeros(3), D, v0, v1, v2, chunk, (xy, _screen_boxes(v0, v1, v2)))


def _intersect(origins, directions, v0, v1, v2, chunk, screen):
    O = np.atleast_2d(np.asarray(origins, dtype=float))
    D = np.atleast_2d(np.asarray(directions, dtype=float))
    n = max(len(O), len(D))
    O = np.broadcast_to(O, (n, 3))
    D = np.broadcast_to(D, (n, 3))
    e1 = v1 - v0
    e2 = v2 - v0
    tri = np.full(n, EMPTY, dtype=np.int64)
    tbest = np.full(n, np.inf)
    b1best = np.zeros(n)
    b2best = np.zeros(n)
    if screen is None:
        order = np.arange(n)
    else:
        xy, (lo, hi) = screen
        order = np.lexsort((xy[:, 0], xy[:, 1]))
    for s in range(0, n, chunk):
        idx = order[s:s + chunk]
        cand = slice(None)
        if screen is not None:
            clo = xy[idx].min(axis=0) - 1e-9
            chi = xy[idx].max(axis=0) + 1e-9
            cand = np.nonzero(np.all(hi >= clo, axis=1) & np.all(lo <= chi, axis=1))[0]
            if cand.size == 0:
                continue
        a0, a1, a2 = v0[cand], e1[cand], e2[cand]
        o = O[idx, None, :]
        d = D[idx, None, :]
        h = np.cross(d, a2[None])
        a = np.einsum("rtk,tk->rt", h, a1)
        ok = np.abs(a) > _EPS
        inv = np.where(ok, 1.0 / np.where(ok, a, 1.0), 0.0)
        sv = o - a0[None]
        u = inv * np.einsum("rtk,rtk->rt", sv, h)
        q = np.cross(sv, a1[None])
        v = inv * np.einsum("rtk,rtk->rt", d, q)
        t = inv * np.einsum("tk,rtk->rt", a2, q)
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > _EPS)
        t = np.where(hit, t, np.inf)
        k = np.argmin(t, axis=1)
        rows = np.arange(len(k))
        tk = t[rows, k]
        found = np.isfinite(tk)
        ids = np.arange(len(v0))[cand]
        tri[idx] = np.where(found, ids[k], EMPTY)
        tbest[idx] = tk
        b1best[idx] = u[rows, k]
        b2best[idx] = v[rows, k]
    return tri, tbest, b1best, b2best


def cast_pixels(vertices, triangles, pose: PoseSE3, K: CameraIntrinsics, pixels=None):
    """Cast camera rays through pixel centers.

    Returns ``(owner, depth, points_world, pixels)``; the owner is the
    nearest hit triangle, or EMPTY when the nearest hit is back-facing or
    nothing is hit.
    """
    Vw = np.asarray(vertices, dtype=float).reshape(-1, 3)
    F = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if pixels is None:
        vv, uu = np.mgrid[0:K.height, 0:K.width]
        pixels = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(float)
    pixels = np.asarray(pixels, dtype=float)
    # work in camera coordinates: origin at 0
    Vc = pose.apply(Vw)
    dirs = np.stack([(pixels[:, 0] - K.cx) / K.fx, (pixels[:, 1] - K.cy) / K.fy,
                     np.ones(len(pixels))], axis=1)
    owner = np.full(len(pixels), EMPTY, dtype=np.int64)
    depth = np.full(len(pixels), np.nan)
    points = np.full((len(pixels), 3), np.nan)
    if F.shape[0] == 0 or len(pixels) == 0:
        return owner, depth, points, pixels
    v0, v1, v2 = Vc[F[:, 0]], Vc[F[:, 1]], Vc[F[:, 2]]
    tri, t, _, _ = intersect_from_camera(dirs, v0, v1, v2)
    hit = tri != EMPTY
    normals = np.cross(v1 - v0, v2 - v0)
    facing = np.zeros(len(pixels), dtype=bool)
    facing[hit] = np.einsum("ik,ik->i", normals[tri[hit]], dirs[hit]) < 0
    owner[facing] = tri[facing]
    depth[hit] = t[hit]   # direction has unit z, so t is camera z
    pc = dirs[hit] * t[hit, None]
    points[hit] = (pc - pose.translation) @ pose.rotation
    return owner, depth, points, pixels


def point_visible(points_world, point_tri, vertices, triangles, pose: PoseSE3,
                  K: CameraIntrinsics, rel_tol: float = 1e-6) -> np.ndarray:
    """Whether each surface point is seen unoccluded by the camera.

    A point is visible when it projects into the image, its triangle faces the
    camera, and no triangle intersects the open segment camera->point.
    """
    Vw = np.asarray(vertices, dtype=float).reshape(-1, 3)
    F = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    P = np.asarray(points_world, dtype=float).reshape(-1, 3)
    Vc = pose.apply(Vw)
    Pc = pose.apply(P)
    out = np.zeros(len(P), dtype=bool)
    z = Pc[:, 2]
    front = z > 0
    u = K.fx * Pc[:, 0] / np.where(front, z, 1) + K.cx
    v = K.fy * Pc[:, 1] / np.where(front, z, 1) + K.cy
    inside = front & (u >= -0.5) & (u <= K.width - 0.5) & (v >= -0.5) & (v <= K.height - 0.5)
    v0, v1, v2 = Vc[F[:, 0]], Vc[F[:, 1]], Vc[F[:, 2]]
    normals = np.cross(v1 - v0, v2 - v0)
    tri = np.asarray(point_tri, dtype=np.int64)
    facing = np.einsum("ik,ik->i", normals[tri], Pc) < 0
    cand = inside & facing
    if cand.any():
        # rays from the camera center with direction = point, so the point is at t = 1
        hit_tri, t, _, _ = intersect_from_camera(Pc[cand], v0, v1, v2)
        occluded = (hit_tri != EMPTY) & (t < 1.0 - rel_tol)
        out[cand] = ~occluded
    return out


def two_view_visibility(vertices, triangles, pose_t: PoseSE3, pose_s: PoseSE3,
                        K_t: CameraIntrinsics, K_s: CameraIntrinsics, target_mask) -> np.ndarray:
    """Exact covisibility of the target mask's pixels.

    The surface point behind each target pixel center is found by ray casting
    and then tested for an unoccluded line of sight from the source camera.
    """
    mask = np.asarray(target_mask, dtype=bool)
    rows, cols = np.nonzero(mask)
    pix = np.stack([cols, rows], axis=1).astype(float)
    owner, _, pts, _ = cast_pixels(vertices, triangles, pose_t, K_t, pix)
    hit = owner != EMPTY
    vis = np.zeros(len(owner), dtype=bool)
    if hit.any():
        vis[hit] = point_visible(pts[hit], owner[hit], vertices, triangles, pose_s, K_s)
    out = np.zeros(mask.shape, dtype=bool)
    out[rows, cols] = vis
    return out
