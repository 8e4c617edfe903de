"""File formats: PFM, PNG, the binary model container, OBJ and scene directories."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics
from .model import MorphableModel, ParameterVector

MODEL_MAGIC = b"MVFM"
MODEL_VERSION = 1


class FormatError(ValueError):
    """A file does not follow the expected layout."""


# --------------------------------------------------------------------------
# PFM / PNG
# --------------------------------------------------------------------------

def write_pfm(path, array) -> None:
    """Little-endian PFM; rows are stored bottom-to-top as the format requires."""
    a = np.asarray(array, dtype="<f4")
    if a.ndim == 2:
        header = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError("PFM holds (H, W) or (H, W, 3) arrays")
    h, w = a.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        fh.write(np.ascontiguousarray(a[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise FormatError(f"{path}: not a PFM file")
        try:
            w, h = (int(x) for x in fh.readline().split())
            scale = float(fh.readline())
        except ValueError as exc:
            raise FormatError(f"{path}: bad PFM header") from exc
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if kind == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != w * h * ch:
        raise FormatError(f"{path}: expected {w * h * ch} values, found {data.size}")
    shape = (h, w, 3) if ch == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float64)


def write_png(path, image) -> None:
    """Save a float image in [0, 1] (or a boolean mask) as 8-bit PNG."""
    a = np.asarray(image)
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    else:
        a = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(a).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 255.0


# --------------------------------------------------------------------------
# Model container
# --------------------------------------------------------------------------

_HEADER = struct.Struct("<4s7I")   # magic, version, V, n_id, n_exp, n_alb, L, n_triangles


def save_model(path, model: MorphableModel) -> None:
    V, L, T = model.n_vertices, model.n_landmarks, model.triangles.shape[0]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, V, model.n_id, model.n_exp, model.n_alb, L, T))
        for a in (model.mean_shape, model.mean_albedo, model.basis_id, model.basis_exp,
                  model.basis_albedo, model.landmark_confidence):
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
        for a in (model.triangles, model.landmark_indices):
            fh.write(np.ascontiguousarray(a, dtype="<u4").tobytes())


def load_model(path) -> MorphableModel:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated model header")
    magic, version, V, n_id, n_exp, n_alb, L, T = _HEADER.unpack_from(raw)
    if magic != MODEL_MAGIC or version != MODEL_VERSION:
        raise FormatError(f"{path}: not a model container (version {MODEL_VERSION})")
    pos = _HEADER.size

    def take(count, dtype, shape):
        nonlocal pos
        nbytes = count * 4
        if pos + nbytes > len(raw):
            raise FormatError(f"{path}: truncated model data")
        a = np.frombuffer(raw, dtype=dtype, count=count, offset=pos).reshape(shape)
        pos += nbytes
        return a

    mean_shape = take(3 * V, "<f4", (3 * V,)).astype(float)
    mean_albedo = take(3 * V, "<f4", (3 * V,)).astype(float)
    basis_id = take(3 * V * n_id, "<f4", (3 * V, n_id)).astype(float)
    basis_exp = take(3 * V * n_exp, "<f4", (3 * V, n_exp)).astype(float)
    basis_alb = take(3 * V * n_alb, "<f4", (3 * V, n_alb)).astype(float)
    conf = take(L, "<f4", (L,)).astype(float)
    tri = take(3 * T, "<u4", (T, 3)).astype(np.int64)
    lm = take(L, "<u4", (L,)).astype(np.int64)
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} unexpected trailing bytes")
    return MorphableModel(mean_shape, mean_albedo, basis_id, basis_exp, basis_alb, tri, lm, conf)


def write_obj(path, vertices, triangles) -> None:
    V = np.asarray(vertices, dtype=float).reshape(-1, 3)
    F = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    with open(path, "w") as fh:
        for x, y, z in V.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in F + 1:
            fh.write(f"f {a} {b} {c}\n")


def read_obj(path):
    """Vertices and triangles of an OBJ file (polygons are fanned into triangles)."""
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return np.asarray(verts, dtype=float).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


# --------------------------------------------------------------------------
# JSON helpers and scene directories
# --------------------------------------------------------------------------

def dump_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


def save_params(path, params: ParameterVector) -> None:
    dump_json(path, params.to_dict())


def load_params(path) -> ParameterVector:
    return ParameterVector.from_dict(load_json(path))


def save_scene(directory, scene) -> Path:
    """Write a scene directory: model, rig spec, ground truth, images, depths, landmarks."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_model(d / "model.mvfm", scene.model)
    dump_json(d / "rig.json", scene.spec.to_dict())
    save_params(d / "params_gt.json", scene.params)
    dump_json(d / "intrinsics.json", [K.to_dict() for K in scene.rig.intrinsics])
    dump_json(d / "landmarks.json", [np.asarray(q).tolist() for q in scene.rig.landmarks])
    dump_json(d / "poses.json", [{"rotation": vp.rotation.tolist(), "translation": vp.translation.tolist()}
                                 for vp in scene.params.views])
    for v in range(scene.rig.n_views):
        write_png(d / f"view_{v}.png", scene.rig.images[v])
        write_pfm(d / f"image_{v}.pfm", scene.rig.images[v])
        write_pfm(d / f"depth_{v}.pfm", scene.depths[v])
    return d


def load_scene(directory):
    """Read a scene directory back; observed images come from the exact PFM copies."""
    from .synth import RigSpec, Scene, ViewRig
    d = Path(directory)
    if not (d / "rig.json").exists():
        raise FileNotFoundError(f"{d} is not a scene directory (rig.json missing)")
    model = load_model(d / "model.mvfm")
    spec = RigSpec.from_dict(load_json(d / "rig.json"))
    params = load_params(d / "params_gt.json")
    Ks = [CameraIntrinsics.from_dict(k) for k in load_json(d / "intrinsics.json")]
    lms = [np.asarray(q, dtype=float) for q in load_json(d / "landmarks.json")]
    n = len(Ks)
    images = [read_pfm(d / f"image_{v}.pfm") for v in range(n)]
    depths = [read_pfm(d / f"depth_{v}.pfm") for v in range(n)]
    rig = ViewRig(Ks, images, lms, [dep > 0 for dep in depths])
    return Scene(model, params, rig, spec, depths)
