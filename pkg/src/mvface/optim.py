"""Finite-difference derivatives, gradient checking and the damped least-squares fit."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .losses import EmptyMaskError
from .model import ParameterVector
from .objective import ABLATIONS, EvalOptions, Evaluator, ablate


@dataclass(frozen=True)
class FitConfig:
    max_iters: int = 40
    lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 3.0
    lambda_max: float = 1e8
    h_rotation: float = 1e-3        # radians
    h_translation: float = 1e-3     # fraction of the view's camera distance
    h_coeff: float = 1e-3
    h_sh: float = 1e-2
    tol_rel: float = 1e-6           # relative loss decrease
    tol_step: float = 1e-9          # tangent step norm
    ablations: tuple = ()
    target: Optional[int] = None

    def __post_init__(self):
        for name in ("h_rotation", "h_translation", "h_coeff", "h_sh", "lambda0", "tol_rel", "tol_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_up <= 1 or self.lambda_down <= 1:
            raise ValueError("damping factors must exceed 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        unknown = set(self.ablations) - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablations: {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablations"] = list(self.ablations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        d["ablations"] = tuple(d.get("ablations", ()))
        return cls(**d)

    def options(self, base: EvalOptions = EvalOptions()) -> EvalOptions:
        from dataclasses import replace
        return ablate(replace(base, target=self.target), self.ablations)


def step_sizes(params: ParameterVector, config: FitConfig = FitConfig()) -> np.ndarray:
    """Finite-difference step per tangent coordinate."""
    h = np.empty(params.tangent_size)
    g = params.tangent_groups()
    h[g["coeff"]] = config.h_coeff
    h[g["rotation"]] = config.h_rotation
    h[g["sh"]] = config.h_sh
    depth = np.repeat([abs(vp.translation[2]) for vp in params.views], 3)
    h[g["translation"]] = config.h_translation * depth
    return h


def params_hash(params) -> str:
    flat = params.pack() if isinstance(params, ParameterVector) else np.asarray(params, dtype=float)
    return hashlib.sha256(np.ascontiguousarray(flat, dtype="<f8").tobytes()).hexdigest()[:16]


def _move(params, j: int, step: float):
    if isinstance(params, ParameterVector):
        d = np.zeros(params.tangent_size)
        d[j] = step
        return params.retract(d)
    x = np.array(params, dtype=float)
    x.flat[j] += step
    return x


def _size(params) -> int:
    return params.tangent_size if isinstance(params, ParameterVector) else np.asarray(params).size


def _safe(objective, p) -> float:
    try:
        return float(objective(p))
    except (EmptyMaskError, FloatingPointError, ValueError):
        return float("nan")


def numeric_gradient(objective: Callable, params, h=None, return_flags: bool = False, coords=None):
    """Central-difference gradient over tangent coordinates.

    ``params`` is a :class:`ParameterVector` (rotations perturbed on the
    tangent and renormalized) or a plain array. ``h`` is a scalar or one step
    per coordinate; the default uses :func:`step_sizes`. A coordinate whose
    probe is non-finite falls back to a one-sided difference and is flagged.
    With ``coords`` only those coordinates are differentiated; the others
    are reported as zero.
    """
    f0 = _safe(objective, params)
    if not np.isfinite(f0):
        raise ValueError("objective is not finite at the expansion point")
    n = _size(params)
    if h is None:
        h = step_sizes(params) if isinstance(params, ParameterVector) else np.full(n, 1e-6)
    h = np.broadcast_to(np.asarray(h, dtype=float), (n,))
    grad = np.zeros(n)
    flags = np.zeros(n, dtype=bool)
    for j in (range(n) if coords is None else coords):
        fp = _safe(objective, _move(params, j, h[j]))
        fm = _safe(objective, _move(params, j, -h[j]))
        if np.isfinite(fp) and np.isfinite(fm):
            grad[j] = (fp - fm) / (2 * h[j])
        elif np.isfinite(fp):
            grad[j] = (fp - f0) / h[j]
            flags[j] = True
        elif np.isfinite(fm):
            grad[j] = (f0 - fm) / h[j]
            flags[j] = True
        else:
            grad[j] = np.nan
            flags[j] = True
    return (grad, flags) if return_flags else grad


@dataclass
class GradientCheck:
    gradient: np.ndarray      # at step h
    half: np.ndarray          # at step h/2
    quarter: np.ndarray       # at step h/4
    discrepancy: np.ndarray   # relative difference between h and h/2 estimates
    ratio: np.ndarray         # Richardson ratio, NaN where the estimates agree to rounding
    flagged: np.ndarray       # coordinates with discrepancy above tolerance
    tol: float
    coords: np.ndarray        # coordinates checked; the arrays above follow this order

    @property
    def passed(self) -> bool:
        return self.flagged.size == 0

    def to_dict(self) -> dict:
        return {"passed": self.passed, "tol": self.tol, "flagged": self.flagged.tolist(),
                "max_discrepancy": float(np.nanmax(self.discrepancy)) if self.discrepancy.size else 0.0,
                "ratio": [None if not np.isfinite(r) else float(r) for r in self.ratio],
                "gradient": self.gradient.tolist()}


def gradient_check(objective: Callable, params, h=None, tol: float = 1e-3,
                   floor: float = 1e-8, coords=None) -> GradientCheck:
    """Compare central differences at steps h, h/2 and h/4.

    For a smooth objective the truncation error shrinks fourfold per halving,
    so ``(g_h - g_h2) / (g_h2 - g_h4)`` is close to 4. Coordinates whose h and
    h/2 estimates differ by more than ``tol`` (relative, with an absolute
    ``floor``) are flagged; non-smooth terms are expected to flag some.
    """
    n = _size(params)
    if h is None:
        h = step_sizes(params) if isinstance(params, ParameterVector) else np.full(n, 1e-3)
    h = np.broadcast_to(np.asarray(h, dtype=float), (n,))
    idx = np.arange(n) if coords is None else np.asarray(coords, dtype=np.int64)
    g1 = numeric_gradient(objective, params, h, coords=idx)[idx]
    g2 = numeric_gradient(objective, params, h / 2, coords=idx)[idx]
    g4 = numeric_gradient(objective, params, h / 4, coords=idx)[idx]
    scale = np.maximum(np.maximum(np.abs(g1), np.abs(g2)), floor)
    disc = np.abs(g1 - g2) / scale
    d1 = g1 - g2
    d2 = g2 - g4
    # below this the differences are rounding noise and the ratio says nothing
    noise = 1e-10 * np.maximum(scale, 1.0)
    ratio = np.where((np.abs(d2) > noise) & (np.abs(d1) > noise), d1 / np.where(d2 == 0, 1, d2), np.nan)
    flagged = idx[~(disc <= tol)]
    return GradientCheck(g1, g2, g4, disc, ratio, flagged, tol, idx)


# --------------------------------------------------------------------------
# Fitting
# --------------------------------------------------------------------------

@dataclass
class FitTrace:
    reports: list = field(default_factory=list)      # LossReport dicts, one per iteration
    hashes: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    status: str = ""

    @property
    def n_iters(self) -> int:
        return len(self.step_norms)

    def to_dict(self) -> dict:
        return {"status": self.status, "reports": self.reports, "hashes": self.hashes,
                "step_norms": self.step_norms, "lambdas": self.lambdas, "accepted": self.accepted}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = sorted(self.reports[0]["terms"]) if self.reports else []
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "total"] + names + ["lambda", "step_norm", "accepted", "hash"])
        for i, rep in enumerate(self.reports):
            row = [i, repr(rep["total"])] + [repr(rep["terms"][k]) for k in names]
            if i < len(self.step_norms):
                row += [repr(self.lambdas[i]), repr(self.step_norms[i]), int(self.accepted[i])]
            else:
                row += ["", "", ""]
            w.writerow(row + [self.hashes[i]])
        return buf.getvalue()


class InitializationError(RuntimeError):
    """The initial parameters do not render the face in some view."""


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MVFACE_THREADS", "1")))
    except ValueError:
        return 1


def _block_columns(evaluator: Evaluator, params: ParameterVector, frame, h):
    """Central-difference derivative of every residual block.

    Yields ``(block, coords, D)`` with ``D[:, k]`` the derivative of the block
    along tangent coordinate ``coords[k]``; only coordinates that can change
    the block are probed.
    """
    n = params.tangent_size
    deps = {b: np.asarray(evaluator.block_dependencies(params, b), dtype=np.int64) for b in frame.blocks}
    users = [[] for _ in range(n)]
    for b in frame.blocks:
        for j in deps[b]:
            users[j].append(b)

    def column(j):
        out = {}
        if not users[j]:
            return out
        pp = _move(params, j, h[j])
        pm = _move(params, j, -h[j])
        for b in users[j]:
            rp = evaluator.block_residual(pp, frame, b)
            rm = evaluator.block_residual(pm, frame, b)
            out[b] = (rp - rm) / (2 * h[j])
        return out

    threads = _threads()
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            cols = list(ex.map(column, range(n)))
    else:
        cols = [column(j) for j in range(n)]
    for b in frame.blocks:
        D = np.zeros((frame.sizes[b], deps[b].size))
        for k, j in enumerate(deps[b]):
            D[:, k] = cols[j][b]
        yield b, deps[b], D


def jacobian(evaluator: Evaluator, params: ParameterVector, frame, h) -> tuple[np.ndarray, np.ndarray]:
    """Residuals at ``params`` and their dense central-difference Jacobian."""
    r0 = evaluator.residuals(params, frame)
    J = np.zeros((r0.size, params.tangent_size))
    o = 0
    offsets = {}
    for b in frame.blocks:
        offsets[b] = o
        o += frame.sizes[b]
    for b, coords, D in _block_columns(evaluator, params, frame, h):
        J[offsets[b]:offsets[b] + D.shape[0], coords] = D
    return r0, J


def normal_equations(evaluator: Evaluator, params: ParameterVector, frame, h):
    """``(J^T J, J^T r, r)`` accumulated block by block without forming J."""
    r0 = evaluator.residuals(params, frame)
    n = params.tangent_size
    A = np.zeros((n, n))
    g = np.zeros(n)
    o = 0
    offsets = {}
    for b in frame.blocks:
        offsets[b] = o
        o += frame.sizes[b]
    # fixed block order keeps the floating-point sums reproducible
    for b, coords, D in _block_columns(evaluator, params, frame, h):
        r = r0[offsets[b]:offsets[b] + D.shape[0]]
        A[np.ix_(coords, coords)] += D.T @ D
        g[coords] += D.T @ r
    return A, g, r0


def fit(rig, model, init: ParameterVector, config: FitConfig = FitConfig(),
        options: Optional[EvalOptions] = None, callback=None):
    """Damped Gauss-Newton on the combined objective; returns ``(params, trace)``.

    L1-type terms are reweighted each iteration so that the squared residuals
    match the loss near the current point. Masks and covisible maps are
    recomputed after every accepted step and frozen while differentiating.
    Only steps that lower the true total loss are accepted.
    """
    opts = config.options(options or EvalOptions())
    ev = Evaluator(model, rig, opts)
    for v in range(rig.n_views):
        m = ev.raster(init, v).fragments.mask
        if not m.any():
            raise InitializationError(f"initial parameters render no face pixels in view {v}")
    trace = FitTrace()
    params = init
    report = ev.report(params)
    loss = report.total
    trace.reports.append(report.to_dict())
    trace.hashes.append(params_hash(params))
    lam = config.lambda0
    status = "max_iters"
    for _ in range(config.max_iters):
        frame = ev.frame(params)
        A, g, _ = normal_equations(ev, params, frame, step_sizes(params, config))
        diag = np.diag(A).copy()
        diag = np.maximum(diag, 1e-12 * max(diag.max(), 1e-300))
        accepted = False
        while lam <= config.lambda_max:
            try:
                delta = np.linalg.solve(A + lam * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                delta = np.linalg.lstsq(A + lam * np.diag(diag), -g, rcond=None)[0]
            step = float(np.linalg.norm(delta))
            cand = params.retract(delta)
            try:
                cand_report = ev.report(cand)
                cand_loss = cand_report.total
            except EmptyMaskError:
                cand_loss = np.inf
            if np.isfinite(cand_loss) and cand_loss < loss:
                accepted = True
                break
            lam *= config.lambda_up
            if step < config.tol_step:
                break
        trace.lambdas.append(float(lam))
        trace.step_norms.append(step)
        trace.accepted.append(accepted)
        if not accepted:
            trace.reports.append(report.to_dict())
            trace.hashes.append(params_hash(params))
            status = "converged" if step < config.tol_step else "no_descent"
            break
        rel = (loss - cand_loss) / max(loss, 1e-300)
        params, report, loss = cand, cand_report, cand_loss
        lam = max(lam / config.lambda_down, 1e-12)
        trace.reports.append(report.to_dict())
        trace.hashes.append(params_hash(params))
        if callback is not None:
            callback(params, report)
        if rel < config.tol_rel or step < config.tol_step:
            status = "converged"
            break
    trace.status = status
    return params, trace
