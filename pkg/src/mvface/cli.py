"""Command-line interface: ``mvface gen|fit|eval|gradcheck``.

Exit codes
----------
0  success
1  invalid arguments or scene specification, or a failed gradient check
2  generated views do not overlap enough
3  initial parameters render an empty face in some view
4  malformed weights file
5  parameters do not match the scene's model
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io as mio
from . import metrics
from .losses import LossWeights
from .model import ContractError
from .objective import ABLATIONS, EvalOptions, Evaluator, ablate
from .optim import FitConfig, InitializationError, fit, gradient_check, step_sizes
from .synth import NoOverlapError, RigSpec, generate_model, generate_scene, perturb

EXIT_INVALID = 1
EXIT_NO_OVERLAP = 2
EXIT_EMPTY_INIT = 3
EXIT_BAD_WEIGHTS = 4
EXIT_MODEL_MISMATCH = 5

SMOOTH_TERMS = ("reg", "landmark", "epipolar")
ROUGH_TERMS = ("render", "pixel", "depth")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _ablations(values) -> tuple:
    out = []
    for v in values or ():
        out += [x for x in v.split(",") if x]
    bad = [x for x in out if x not in ABLATIONS]
    if bad:
        raise CliError(EXIT_INVALID, f"unknown --ablate value(s) {bad}; choose from {', '.join(ABLATIONS)}")
    return tuple(out)


def _weights(path) -> LossWeights:
    if path is None:
        return LossWeights()
    try:
        return LossWeights.load(path)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_BAD_WEIGHTS, f"{path}: malformed JSON at line {exc.lineno}, "
                                         f"column {exc.colno}: {exc.msg}") from exc
    except (ValueError, TypeError) as exc:
        raise CliError(EXIT_BAD_WEIGHTS, f"{path}: {exc}") from exc
    except OSError as exc:
        raise CliError(EXIT_BAD_WEIGHTS, f"{path}: {exc}") from exc


def _options(args) -> EvalOptions:
    return ablate(EvalOptions(weights=_weights(args.weights)), _ablations(args.ablate))


def _load_scene(path):
    try:
        return mio.load_scene(path)
    except (OSError, mio.FormatError, ValueError, KeyError) as exc:
        raise CliError(EXIT_INVALID, f"cannot read scene {path}: {exc}") from exc


def _check_params(params, scene):
    m = scene.model
    if (params.alpha.size, params.beta.size, params.gamma.size) != (m.n_id, m.n_exp, m.n_alb):
        raise CliError(EXIT_MODEL_MISMATCH,
                       f"parameters have (n_id, n_exp, n_alb) = "
                       f"({params.alpha.size}, {params.beta.size}, {params.gamma.size}), model has "
                       f"({m.n_id}, {m.n_exp}, {m.n_alb})")
    if params.n_views != scene.rig.n_views:
        raise CliError(EXIT_MODEL_MISMATCH,
                       f"parameters have {params.n_views} views, scene has {scene.rig.n_views}")


def _write_json(path, obj):
    mio.dump_json(path, obj)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen(args) -> int:
    try:
        spec = RigSpec(n_views=args.views, yaw_step=args.yaw, image_size=args.size, seed=args.seed,
                       focal=args.focal if args.focal else 300.0 * args.size / 128.0,
                       texture_detail=args.texture_detail, landmark_noise=args.landmark_noise,
                       model_vertices=args.vertices)
        model = generate_model(spec.model_seed, V=spec.model_vertices)
        scene = generate_scene(model, spec)
    except NoOverlapError as exc:
        raise CliError(EXIT_NO_OVERLAP, f"no overlap: {exc}") from exc
    except (ValueError, RuntimeError) as exc:
        raise CliError(EXIT_INVALID, f"invalid scene specification: {exc}") from exc
    mio.save_scene(args.out, scene)
    print(f"wrote scene with {spec.n_views} view(s) to {args.out}")
    return 0


def _render_views(ev: Evaluator, params, prefix: Path, tag: str):
    for v in range(ev.n_views):
        mio.write_png(prefix / f"render_{v}_{tag}.png", ev.shade(params, v))


def cmd_fit(args) -> int:
    scene = _load_scene(args.scene)
    base = EvalOptions(weights=_weights(args.weights))
    init = perturb(scene.params, args.init_rot, args.init_trans, args.init_coeff, seed=args.seed)
    config = FitConfig(max_iters=args.max_iters, ablations=_ablations(args.ablate))
    out = Path(args.out) if args.out else Path(args.scene) / "fit"
    out.mkdir(parents=True, exist_ok=True)
    try:
        params, trace = fit(scene.rig, scene.model, init, config, base)
    except InitializationError as exc:
        raise CliError(EXIT_EMPTY_INIT, f"initialization renders no face: {exc}") from exc
    ev = Evaluator(scene.model, scene.rig, config.options(base))
    mio.save_params(out / "params.json", params)
    mio.save_params(out / "params_init.json", init)
    if args.format == "csv":
        (out / "trace.csv").write_text(trace.to_csv())
    else:
        (out / "trace.json").write_text(trace.to_json() + "\n")
    report = ev.report(params)
    summary = {"status": trace.status, "iterations": trace.n_iters, "final_loss": report.total,
               "initial_loss": trace.reports[0]["total"], "config": config.to_dict(),
               "weights": base.weights.to_dict(), "loss": report.to_dict(),
               "metrics": metrics.evaluate(scene.model, params, scene.params, scene.rig.intrinsics),
               "initial_metrics": metrics.evaluate(scene.model, init, scene.params, scene.rig.intrinsics)}
    _write_json(out / "report.json", summary)
    _render_views(ev, init, out, "before")
    _render_views(ev, params, out, "after")
    for s in ev.sources:
        mio.write_png(out / f"covisible_{ev.target}_{s}.png", ev.covisible(params, ev.target, s))
    m = summary["metrics"]
    print(f"{trace.status} after {trace.n_iters} iterations: loss {summary['initial_loss']:.6g} -> "
          f"{report.total:.6g}; rotation error {m['rotation_error_deg']:.4f} deg, "
          f"translation error {100 * m['translation_error_frac']:.3f}%")
    return 0


def cmd_eval(args) -> int:
    scene = _load_scene(args.scene)
    try:
        params = mio.load_params(args.params)
    except (OSError, ValueError, KeyError, ContractError) as exc:
        raise CliError(EXIT_INVALID, f"cannot read parameters {args.params}: {exc}") from exc
    _check_params(params, scene)
    options = _options(args)
    ev = Evaluator(scene.model, scene.rig, options)
    report = ev.report(params)
    result = metrics.evaluate(scene.model, params, scene.params, scene.rig.intrinsics)
    result["loss"] = report.to_dict()
    result["total_loss"] = report.total
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _term_objective(ev: Evaluator, term: str):
    key = {"reg": "reg", "landmark": "landmark", "epipolar": "epi", "render": "render",
           "pixel": "pixel", "depth": "depth"}[term]
    return lambda p: ev.report(p).terms[key]


def _term_coords(params, term):
    g = params.tangent_groups()
    nc = params.n_coeffs
    geo = np.arange(params.alpha.size + params.beta.size)
    pose = np.sort(np.concatenate([g["rotation"], g["translation"]]))
    if term == "reg":
        return np.arange(nc)
    if term == "epipolar":
        return pose
    if term in ("landmark", "pixel", "depth"):
        return np.concatenate([geo, pose])
    return np.arange(params.tangent_size)


def cmd_gradcheck(args) -> int:
    scene = _load_scene(args.scene)
    options = EvalOptions(weights=_weights(args.weights))
    ev = Evaluator(scene.model, scene.rig, options)
    params = perturb(scene.params, args.init_rot, args.init_trans, args.init_coeff, seed=args.seed)
    terms = SMOOTH_TERMS + ROUGH_TERMS if args.term == "all" else (args.term,)
    steps = step_sizes(params)
    results = {}
    failed = False
    for term in terms:
        if term == "epipolar" and ev.sources:
            rep = ev.report(params)
            if any("epipolar degenerate" in w for w in rep.warnings):
                print("epipolar: degenerate, skipped (pure rotation between views)")
                results[term] = {"status": "skipped", "reason": "degenerate"}
                continue
        if term in ("epipolar", "pixel", "depth") and not ev.sources:
            print(f"{term}: single-view scene, skipped")
            results[term] = {"status": "skipped", "reason": "single view"}
            continue
        coords = _term_coords(params, term)
        chk = gradient_check(_term_objective(ev, term), params, steps, coords=coords)
        entry = chk.to_dict()
        entry["coords"] = coords.tolist()
        if chk.passed:
            entry["status"] = "pass"
        elif term in SMOOTH_TERMS:
            entry["status"] = "fail"
            failed = True
        else:
            entry["status"] = "warn"
        results[term] = entry
        note = "" if chk.passed else f" ({len(chk.flagged)} flagged coordinate(s))"
        if entry["status"] == "warn":
            note += "; expected near rasterization edges"
        print(f"{term}: {entry['status']}{note}")
    if args.out:
        _write_json(args.out, results)
    return EXIT_INVALID if failed else 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvface", description="Multi-view morphable-face fitting toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic scene directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--views", type=int, default=3)
    g.add_argument("--yaw", type=float, default=20.0, help="degrees between neighbouring views")
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--focal", type=float, default=None, help="pixels (default scales with --size)")
    g.add_argument("--vertices", type=int, default=1500)
    g.add_argument("--texture-detail", type=float, default=0.0)
    g.add_argument("--landmark-noise", type=float, default=0.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    def perturb_args(q, rot, trans, coeff):
        q.add_argument("--init-rot", type=float, default=rot, help="degrees")
        q.add_argument("--init-trans", type=float, default=trans, help="fraction of face depth")
        q.add_argument("--init-coeff", type=float, default=coeff, help="coefficient noise sigma")
        q.add_argument("--seed", type=int, default=0, help="perturbation seed")

    def loss_args(q):
        q.add_argument("--weights", default=None, help="JSON object of loss weight overrides")
        q.add_argument("--ablate", action="append", default=[],
                       help=f"comma-separated subset of {', '.join(ABLATIONS)}")

    f = sub.add_parser("fit", help="fit parameters to a scene from a perturbed start")
    f.add_argument("scene")
    perturb_args(f, 10.0, 0.05, 0.5)
    loss_args(f)
    f.add_argument("--max-iters", type=int, default=FitConfig().max_iters)
    f.add_argument("--format", choices=("json", "csv"), default="json", help="trace format")
    f.add_argument("--out", default=None)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="error metrics of fitted parameters")
    e.add_argument("params")
    e.add_argument("scene")
    loss_args(e)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks per loss term")
    c.add_argument("scene")
    c.add_argument("--term", choices=("all",) + SMOOTH_TERMS + ROUGH_TERMS, default="all")
    perturb_args(c, 3.0, 0.02, 0.3)
    c.add_argument("--weights", default=None)
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
