"""Combined objective over a multi-view rig.

:class:`Evaluator` renders every view from a :class:`ParameterVector`,
builds covisible maps and synthesized target views, and evaluates all loss
terms.  For the solver it also produces residual vectors whose squared sum
approximates the total loss, with pixel sets frozen in a :class:`Frame`.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import relative_pose
from .losses import (EmbeddingProvider, EmptyMaskError, LossReport, LossWeights, SkippedTerm,
                     combine, combine_2d, depth_consistency_loss, epipolar_distances,
                     fundamental_matrix, identity_loss, landmark_loss, null_embedding,
                     pixel_consistency_loss, regularization_loss, render_loss)
from .model import VIEW_TANGENT, MorphableModel, ParameterVector, synthesize_albedo, synthesize_shape, vertex_normals
from .raster import EMPTY_DEPTH, FragmentBuffer, rasterize, shade_fragments, visible_vertices
from .synthesis import (bilinear_sample, covisible_map, covisible_triangles, covisible_vertices,
                        synthesize_target, warp_points)

ABLATIONS = ("no-multiview", "no-covisible", "no-pixel", "no-depth", "no-epi")


@dataclass(frozen=True)
class EvalOptions:
    weights: LossWeights = LossWeights()
    target: Optional[int] = None          # None: middle view
    covisible: bool = True
    adjacency: str = "any"
    # drop warped pixels whose sampled source depth disagrees with the warped
    # depth by more than this fraction of the mean rendered target depth
    occlusion_tol_frac: Optional[float] = 0.01
    embedding: EmbeddingProvider = null_embedding
    min_baseline: float = 1e-9

    def target_index(self, n_views: int) -> int:
        t = n_views // 2 if self.target is None else self.target
        if not 0 <= t < n_views:
            raise ValueError(f"target view {t} out of range for {n_views} views")
        return t


def ablate(options: EvalOptions, names) -> EvalOptions:
    """Options with the named loss components switched off."""
    w = options.weights
    opts = options
    for name in names:
        if name == "no-multiview":
            w = w.replace(w_mul=0.0)
        elif name == "no-covisible":
            # every rendered target pixel is used, no occlusion reasoning at all
            opts = replace(opts, covisible=False, occlusion_tol_frac=None)
        elif name == "no-pixel":
            w = w.replace(w_pixel=0.0)
        elif name == "no-depth":
            w = w.replace(w_depth=0.0)
        elif name == "no-epi":
            w = w.replace(w_epi=0.0)
        else:
            raise ValueError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
    return replace(opts, weights=w)


class _LRU:
    def __init__(self, size: int):
        self.size = size
        self.data: OrderedDict = OrderedDict()

    def get(self, key, make):
        if key in self.data:
            self.data.move_to_end(key)
            return self.data[key]
        val = make()
        self.data[key] = val
        if len(self.data) > self.size:
            self.data.popitem(last=False)
        return val


def _key(*arrays) -> bytes:
    return b"|".join(np.ascontiguousarray(a, dtype=float).tobytes() for a in arrays)


@dataclass(eq=False)
class _ViewRender:
    fragments: FragmentBuffer
    visible: np.ndarray
    depth: np.ndarray


@dataclass(eq=False)
class Frame:
    """Pixel sets and reweighting factors frozen for one solver step."""
    target: int
    view_pixels: list            # per view (rows, cols) of the rendered mask
    view_base: list              # per view rendered colors at those pixels
    view_scale: list             # per view IRLS factors per pixel
    pairs: list                  # per source view: dict or None
    epi_scale: dict              # source -> IRLS factors (2L,)
    blocks: list = field(default_factory=list)
    sizes: dict = field(default_factory=dict)


class Evaluator:
    """Evaluates the combined objective for one model and observed rig."""

    # reweighting floor per term: max(floor, irls_kappa * median |residual|)
    irls_floor = {"render": 1e-3, "pixel": 1e-3, "depth": 1e-4, "epi": 1e-3}
    irls_kappa = 1.0

    def __init__(self, model: MorphableModel, rig, options: EvalOptions = EvalOptions(),
                 cache_size: int = 64):
        self.model = model
        self.rig = rig
        self.options = options
        self.n_views = rig.n_views
        self.target = options.target_index(self.n_views)
        self.sources = [s for s in range(self.n_views) if s != self.target]
        self.images = [np.asarray(im, dtype=float) for im in rig.images]
        self.landmarks = [np.asarray(q, dtype=float) for q in rig.landmarks]
        self._geometry = _LRU(8)
        self._albedo = _LRU(8)
        self._raster = _LRU(cache_size)
        self._shade = _LRU(cache_size)

    # -- cached building blocks ---------------------------------------------

    def geometry(self, params: ParameterVector):
        def make():
            S = synthesize_shape(self.model, params.alpha, params.beta).reshape(-1, 3)
            return S, vertex_normals(S, self.model.triangles)
        return self._geometry.get(_key(params.alpha, params.beta), make)

    def albedo(self, params: ParameterVector):
        return self._albedo.get(_key(params.gamma), lambda: synthesize_albedo(
            self.model, params.gamma).reshape(-1, 3))

    def raster(self, params: ParameterVector, v: int) -> _ViewRender:
        vp = params.views[v]

        def make():
            S, _ = self.geometry(params)
            frags = rasterize(S, self.model.triangles, params.pose(v), self.rig.intrinsics[v])
            vis = visible_vertices(frags, self.model.triangles, S.shape[0])
            return _ViewRender(frags, vis, frags.depth)
        return self._raster.get(_key(params.alpha, params.beta, vp.quat, vp.translation), make)

    def shade(self, params: ParameterVector, v: int) -> np.ndarray:
        vp = params.views[v]

        def make():
            _, N = self.geometry(params)
            return shade_fragments(self.raster(params, v).fragments, self.model.triangles, N,
                                   self.albedo(params), vp.sh)
        return self._shade.get(_key(params.alpha, params.beta, params.gamma, vp.quat,
                                    vp.translation, vp.sh), make)

    def project_landmarks(self, params: ParameterVector, v: int) -> np.ndarray:
        S, _ = self.geometry(params)
        K = self.rig.intrinsics[v]
        Xc = params.pose(v).apply(S[self.model.landmark_indices])
        return np.stack([K.fx * Xc[:, 0] / Xc[:, 2] + K.cx, K.fy * Xc[:, 1] / Xc[:, 2] + K.cy], axis=1)

    def covisible(self, params: ParameterVector, t: int, s: int):
        rt, rs = self.raster(params, t), self.raster(params, s)
        if not self.options.covisible:
            return rt.fragments.mask
        cv = covisible_vertices(rt.visible, rs.visible)
        ct = covisible_triangles(cv, self.model.triangles, self.options.adjacency)
        return covisible_map(ct, rt.fragments).mask

    def occlusion_tol(self, params: ParameterVector, t: int):
        frac = self.options.occlusion_tol_frac
        if frac is None:
            return None
        D = self.raster(params, t).depth
        occ = D > 0
        return frac * float(D[occ].mean()) if occ.any() else None

    def synthesize(self, params: ParameterVector, t: int, s: int):
        rel = relative_pose(params.pose(t), params.pose(s))
        return synthesize_target(self.images[s], self.raster(params, s).depth,
                                 self.raster(params, t).depth, self.covisible(params, t, s), rel,
                                 self.rig.intrinsics[t], self.rig.intrinsics[s],
                                 self.occlusion_tol(params, t))

    # -- full evaluation ------------------------------------------------------

    def report(self, params: ParameterVector) -> LossReport:
        if params.n_views != self.n_views:
            raise ValueError("parameter vector and rig have different view counts")
        w = self.options.weights
        reg = regularization_loss(params.alpha, params.beta, params.gamma, w)
        warnings = []
        per_view = []
        for v in range(self.n_views):
            rendered = self.shade(params, v)
            mask = self.raster(params, v).fragments.mask
            if not mask.any():
                raise EmptyMaskError(f"view {v} renders no face pixels")
            ren = render_loss(self.images[v], rendered, mask)
            lm = landmark_loss(self.landmarks[v], self.project_landmarks(params, v),
                               self.model.landmark_confidence)
            idv, active = identity_loss(self.options.embedding, self.images[v], rendered)
            per_view.append({"view": v, "render": ren, "landmark": lm, "identity": idv,
                             "identity_active": active, "reg": reg,
                             "l2d": combine_2d(ren, lm, idv, reg, w)})
        l2d = float(np.mean([p["l2d"] for p in per_view]))

        per_pair = []
        counts = {}
        t = self.target
        for s in self.sources:
            key = f"{t}-{s}"
            entry = {"target": t, "source": s}
            syn = self.synthesize(params, t, s)
            counts[key] = int(np.count_nonzero(syn.valid))
            try:
                entry["pixel"] = pixel_consistency_loss(syn.image, self.images[t], syn.valid)
                entry["depth"] = depth_consistency_loss(syn.depth, self.raster(params, t).depth, syn.valid)
            except SkippedTerm as exc:
                warnings.append(f"pair {key}: {exc}")
            rel = relative_pose(params.pose(t), params.pose(s))
            try:
                entry["epi"] = self._epipolar(rel, t, s)
            except SkippedTerm as exc:
                warnings.append(f"pair {key}: epipolar degenerate, skipped ({exc})")
            per_pair.append(entry)
        if self.n_views == 1:
            warnings.append("single view: multi-view terms inactive")

        def avg(name):
            vals = [p[name] for p in per_pair if name in p]
            return float(np.mean(vals)) if vals else 0.0

        terms = {"render": float(np.mean([p["render"] for p in per_view])),
                 "landmark": float(np.mean([p["landmark"] for p in per_view])),
                 "identity": float(np.mean([p["identity"] for p in per_view])),
                 "reg": reg, "l2d": l2d,
                 "pixel": avg("pixel"), "depth": avg("depth"), "epi": avg("epi")}
        return LossReport(float(combine(terms, w)), terms, per_view, per_pair, counts, warnings)

    def total_loss(self, params: ParameterVector) -> float:
        return self.report(params).total

    def _epipolar(self, rel, t, s) -> float:
        from .losses import epipolar_loss
        return epipolar_loss(self.landmarks[t], self.landmarks[s], rel, self.rig.intrinsics[t],
                             self.rig.intrinsics[s], self.options.min_baseline)

    # -- residuals for the solver ---------------------------------------------

    def _irls(self, c, e0, term):
        """Factors that make ``sum((f*e)**2)`` reproduce ``c*sum(|e|)`` near ``e0``.

        The floor follows the typical residual size, so early iterations see a
        smooth surrogate and later ones a progressively sharper one.
        """
        a = np.abs(e0)
        delta = max(self.irls_floor[term], self.irls_kappa * float(np.median(a)) if a.size else 0.0)
        return np.sqrt(c / np.maximum(a, delta))

    def frame(self, params: ParameterVector) -> Frame:
        w = self.options.weights
        nv = self.n_views
        view_pixels, view_base, view_scale = [], [], []
        for v in range(nv):
            mask = self.raster(params, v).fragments.mask
            rows, cols = np.nonzero(mask)
            if rows.size == 0:
                raise EmptyMaskError(f"view {v} renders no face pixels")
            base = self.shade(params, v)[rows, cols]
            err = np.linalg.norm(self.images[v][rows, cols] - base, axis=1)
            c = w.w_2d * w.w_render / (nv * rows.size)
            view_pixels.append((rows, cols))
            view_base.append(base)
            view_scale.append(self._irls(c, err, "render"))
        pairs = []
        epi = {}
        t = self.target
        n_pairs = len(self.sources)
        for s in self.sources:
            syn = self.synthesize(params, t, s)
            rows, cols = np.nonzero(syn.valid)
            entry = None
            if rows.size and w.w_mul > 0 and (w.w_pixel > 0 or w.w_depth > 0):
                M = rows.size
                e_pix = syn.image[rows, cols] - self.images[t][rows, cols]
                Dt = self.raster(params, t).depth[rows, cols]
                Dw = syn.depth[rows, cols]
                sc = Dt.sum() / Dw.sum()
                e_dep = sc * Dw - Dt
                entry = {"pixels": (rows, cols), "base_image": syn.image[rows, cols],
                         "base_depth": Dw, "base_target_depth": Dt,
                         "pixel_scale": self._irls(w.w_mul * w.w_pixel / (n_pairs * M * 3), e_pix,
                                                   "pixel"),
                         "depth_scale": self._irls(w.w_mul * w.w_depth / (n_pairs * M), e_dep,
                                                   "depth")}
            pairs.append(entry)
            if w.w_mul > 0 and w.w_epi > 0:
                rel = relative_pose(params.pose(t), params.pose(s))
                if np.linalg.norm(rel.translation) >= self.options.min_baseline:
                    fwd, bwd, _ = epipolar_distances(self.landmarks[t], self.landmarks[s],
                                                     fundamental_matrix(rel, self.rig.intrinsics[t],
                                                                        self.rig.intrinsics[s]))
                    epi[s] = self._irls(w.w_mul * w.w_epi / n_pairs, np.concatenate([fwd, bwd]),
                                        "epi")
        fr = Frame(t, view_pixels, view_base, view_scale, pairs, epi)
        fr.blocks = self._block_names(fr)
        return fr

    def _block_names(self, fr: Frame):
        w = self.options.weights
        names = []
        for v in range(self.n_views):
            if w.w_render > 0:
                names.append(("render", v))
            if w.w_lm > 0:
                names.append(("landmark", v))
        if w.w_reg > 0:
            names.append(("reg",))
        for i, s in enumerate(self.sources):
            if fr.pairs[i] is not None:
                names.append(("pair", s))
            if s in fr.epi_scale:
                names.append(("epi", s))
        return names

    def block_residual(self, params: ParameterVector, fr: Frame, name) -> np.ndarray:
        w = self.options.weights
        kind = name[0]
        nv = self.n_views
        if kind == "render":
            v = name[1]
            rows, cols = fr.view_pixels[v]
            img = self.shade(params, v)[rows, cols]
            covered = self.raster(params, v).fragments.mask[rows, cols]
            img = np.where(covered[:, None], img, fr.view_base[v])
            e = self.images[v][rows, cols] - img
            return (fr.view_scale[v][:, None] * e).ravel()
        if kind == "landmark":
            v = name[1]
            q = self.project_landmarks(params, v)
            c = np.sqrt(w.w_2d * w.w_lm / nv * self.model.landmark_confidence)
            return (c[:, None] * (q - self.landmarks[v])).ravel()
        if kind == "reg":
            f = np.sqrt(w.w_2d * w.w_reg)
            return f * np.concatenate([np.sqrt(w.w_id_reg) * params.alpha,
                                       np.sqrt(w.w_exp_reg) * params.beta,
                                       np.sqrt(w.w_tex_reg) * params.gamma])
        if kind == "pair":
            return self._pair_residual(params, fr, name[1])
        if kind == "epi":
            s = name[1]
            t = fr.target
            rel = relative_pose(params.pose(t), params.pose(s))
            fwd, bwd, _ = epipolar_distances(self.landmarks[t], self.landmarks[s],
                                             fundamental_matrix(rel, self.rig.intrinsics[t],
                                                                self.rig.intrinsics[s]))
            return fr.epi_scale[s] * np.concatenate([fwd, bwd])
        raise KeyError(name)

    def _pair_residual(self, params: ParameterVector, fr: Frame, s: int) -> np.ndarray:
        t = fr.target
        entry = fr.pairs[self.sources.index(s)]
        rows, cols = entry["pixels"]
        rt = self.raster(params, t)
        Dt = rt.depth[rows, cols]
        Dt = np.where(Dt > 0, Dt, entry["base_target_depth"])
        rel = relative_pose(params.pose(t), params.pose(s))
        Kt, Ks = self.rig.intrinsics[t], self.rig.intrinsics[s]
        uv = np.stack([cols, rows], axis=1).astype(float)
        uv_s, z_s = warp_points(uv, Dt, rel, Kt, Ks)
        img, ok_i = bilinear_sample(self.images[s], uv_s)
        dep, ok_d = bilinear_sample(self.raster(params, s).depth, uv_s, empty=EMPTY_DEPTH)
        ok = ok_i & ok_d & (z_s > 0)
        img = np.where(ok[:, None], img, entry["base_image"])
        Xs = np.stack([(uv_s[:, 0] - Ks.cx) / Ks.fx * dep, (uv_s[:, 1] - Ks.cy) / Ks.fy * dep, dep], axis=1)
        Dw = ((Xs - rel.translation) @ rel.rotation)[:, 2]
        Dw = np.where(ok, Dw, entry["base_depth"])
        sc = Dt.sum() / Dw.sum()
        r_pix = entry["pixel_scale"] * (img - self.images[t][rows, cols])
        r_dep = entry["depth_scale"] * (sc * Dw - Dt)
        return np.concatenate([r_pix.ravel(), r_dep])

    def residuals(self, params: ParameterVector, fr: Frame) -> np.ndarray:
        parts = [self.block_residual(params, fr, b) for b in fr.blocks]
        for b, p in zip(fr.blocks, parts):
            fr.sizes[b] = p.size
        return np.concatenate(parts) if parts else np.zeros(0)

    def block_dependencies(self, params: ParameterVector, name) -> np.ndarray:
        """Tangent coordinates that can change the residual block ``name``."""
        na, nb, ng = params.alpha.size, params.beta.size, params.gamma.size
        geo = np.arange(na + nb)
        alb = np.arange(na + nb, na + nb + ng)
        nc = params.n_coeffs

        def view(v, pose=True, sh=True):
            base = nc + v * VIEW_TANGENT
            out = []
            if pose:
                out.append(np.arange(base, base + 6))
            if sh:
                out.append(np.arange(base + 6, base + VIEW_TANGENT))
            return np.concatenate(out)

        kind = name[0]
        if kind == "render":
            return np.concatenate([geo, alb, view(name[1])])
        if kind == "landmark":
            return np.concatenate([geo, view(name[1], sh=False)])
        if kind == "reg":
            return np.arange(nc)
        if kind == "pair":
            return np.concatenate([geo, view(self.target, sh=False), view(name[1], sh=False)])
        if kind == "epi":
            return np.concatenate([view(self.target, sh=False), view(name[1], sh=False)])
        raise KeyError(name)


def pair_overlap(scene, options: EvalOptions = EvalOptions()):
    """Covisible fraction of the first view's mask for every ordered view pair."""
    ev = Evaluator(scene.model, scene.rig, options)
    out = []
    n = scene.rig.n_views
    for t in range(n):
        mask = ev.raster(scene.params, t).fragments.mask
        for s in range(n):
            if s == t:
                continue
            cov = ev.covisible(scene.params, t, s)
            out.append((t, s, float(np.count_nonzero(cov)) / max(1, int(np.count_nonzero(mask)))))
    return out


def total_loss(model, rig, params, options: EvalOptions = EvalOptions()) -> float:
    return Evaluator(model, rig, options).total_loss(params)
