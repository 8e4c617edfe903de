import json

import numpy as np
import pytest

from mvface.geometry import CameraIntrinsics, PoseSE3, euler_to_matrix
from mvface.losses import (EmptyMaskError, LossWeights, SkippedTerm, combine, depth_consistency_loss,
                           depth_scale, epipolar_distances, epipolar_loss, essential_matrix,
                           identity_loss, landmark_loss, mean_rgb_embedding, null_embedding,
                           pixel_consistency_loss, regularization_loss, render_loss)
from mvface.objective import EvalOptions, Evaluator
from mvface.optim import gradient_check, numeric_gradient
from mvface.synth import perturb

from toys import EpipolarToy, LandmarkToy, RegToy, relative_error


def test_weights_defaults_and_validation(tmp_path):
    w = LossWeights()
    assert (w.w_render, w.w_lm, w.w_id, w.w_reg) == (1.9, 1e-3, 0.2, 1e-4)
    assert (w.w_id_reg, w.w_exp_reg, w.w_tex_reg) == (1.0, 0.8, 3e-3)
    assert (w.w_2d, w.w_mul, w.w_pixel, w.w_depth, w.w_epi) == (1.0, 1.0, 0.15, 1e-4, 1e-3)
    with pytest.raises(ValueError):
        LossWeights(w_pixel=-1.0)
    with pytest.raises(ValueError):
        LossWeights.from_dict({"w_bogus": 1.0})
    p = tmp_path / "w.json"
    p.write_text(json.dumps({"w_epi": 0.5}))
    assert LossWeights.load(p).w_epi == 0.5 and LossWeights.load(p).w_pixel == 0.15


def test_render_loss_examples(rng):
    img = rng.random((8, 8, 3))
    mask = np.zeros((8, 8), bool)
    mask[2:6, 1:7] = True
    assert render_loss(img, img, mask) == 0
    off = img + [0.1, 0, 0]
    assert render_loss(img, off, mask) == pytest.approx(0.1)
    assert render_loss(img, off, mask, w_skin=2.0) == pytest.approx(0.2)
    with pytest.raises(EmptyMaskError):
        render_loss(img, img, np.zeros((8, 8), bool))


def test_landmark_loss_examples():
    q = np.array([[10.0, 20.0], [30.0, 40.0]])
    assert landmark_loss(q, q, [1, 1]) == 0
    moved = q.copy()
    moved[0] += [3, 4]
    assert landmark_loss(q, moved, [1, 1]) == pytest.approx(25.0)
    assert landmark_loss(q, moved, [10, 1]) == pytest.approx(250.0)


def test_regularization_examples():
    z = np.zeros(3)
    assert regularization_loss(z, z, z) == 0
    assert regularization_loss([1.0, 0, 0], z, z) == pytest.approx(1.0)
    assert regularization_loss(z, [1.0, 0, 0], z) == pytest.approx(0.8)
    assert regularization_loss(z, z, [1.0, 0, 0]) == pytest.approx(3e-3)


def test_identity_loss_examples(rng):
    img = rng.random((4, 4, 3))
    assert identity_loss(null_embedding, img, img) == (0.0, False)
    v, active = identity_loss(mean_rgb_embedding, img, img)
    assert active and v == pytest.approx(0.0, abs=1e-12)
    mock = {0: np.array([1.0, 0.0]), 1: np.array([0.0, 2.0])}
    v, active = identity_loss(lambda im: mock[int(im)], 0, 1)
    assert active and v == pytest.approx(1.0)


def test_pixel_loss_examples(rng):
    img = rng.random((5, 5, 3))
    mask = np.ones((5, 5), bool)
    assert pixel_consistency_loss(img, img, mask) == 0
    off = img + [0.0, 0.2, 0.0]
    assert pixel_consistency_loss(off, img, mask) == pytest.approx(0.2 / 3)
    # channel-mean convention: gray and RGB with equal per-channel error agree
    g = rng.random((5, 5, 1))
    assert pixel_consistency_loss(g + 0.1, g, mask) == pytest.approx(
        pixel_consistency_loss(np.repeat(g, 3, -1) + 0.1, np.repeat(g, 3, -1), mask))
    with pytest.raises(SkippedTerm):
        pixel_consistency_loss(img, img, np.zeros((5, 5), bool))


def test_depth_loss_examples(rng):
    Dt = rng.uniform(4, 6, (6, 6))
    m = np.ones((6, 6), bool)
    assert depth_consistency_loss(2 * Dt, Dt, m) == pytest.approx(0, abs=1e-12)
    assert depth_scale(2 * Dt, Dt, m) == pytest.approx(0.5)
    assert depth_consistency_loss(Dt, Dt, m) == 0
    assert depth_consistency_loss(np.array([1.0, 3.0]), np.array([2.0, 2.0]), np.array([True, True])) == pytest.approx(1.0)
    with pytest.raises(SkippedTerm):
        depth_consistency_loss(Dt, Dt, np.zeros((6, 6), bool))
    with pytest.raises(SkippedTerm):
        depth_consistency_loss(np.zeros((6, 6)), Dt, m)


@pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
def test_depth_scale_invariance(rng, c):
    Dt = rng.uniform(4, 6, (10, 10))
    Dw = Dt * rng.uniform(0.9, 1.1, Dt.shape)
    m = rng.random(Dt.shape) < 0.7
    a, b = depth_consistency_loss(Dw, Dt, m), depth_consistency_loss(c * Dw, Dt, m)
    assert abs(a - b) / a < 1e-9


def test_epipolar_hand_example():
    E = essential_matrix(PoseSE3(np.eye(3), np.array([1.0, 0.0, 0.0])))
    assert np.allclose(E, [[0, 0, 0], [0, 0, -1], [0, 1, 0]])
    fwd, bwd, ok = epipolar_distances([[0.2, 0.1]], [[0.5, 0.3]], E)
    assert ok[0] and abs(fwd[0]) == pytest.approx(0.2)
    fwd, _, _ = epipolar_distances([[0.2, 0.1]], [[0.5, 0.1]], E)
    assert fwd[0] == pytest.approx(0.0, abs=1e-15)


def test_epipolar_symmetric_sum():
    K1 = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 1, 1)
    rel = PoseSE3(np.eye(3), np.array([1.0, 0.0, 0.0]))
    # reverse direction uses F^T: both distances are 0.2 here
    assert epipolar_loss([[0.2, 0.1]], [[0.5, 0.3]], rel, K1, K1) == pytest.approx(0.4)


def test_epipolar_zero_for_true_correspondences(rng):
    K = CameraIntrinsics(100.0, 100.0, 64.0, 64.0, 128, 128)
    rel = PoseSE3(euler_to_matrix([3.0, 20.0, -2.0]), np.array([1.5, 0.1, 0.4]))
    X = rng.uniform(-0.5, 0.5, (30, 3)) + [0, 0, 5]
    Xs = rel.apply(X)
    qt = X[:, :2] / X[:, 2:] * 100 + 64
    qs = Xs[:, :2] / Xs[:, 2:] * 100 + 64
    assert epipolar_loss(qt, qs, rel, K, K) < 1e-6


@pytest.mark.parametrize("c", [0.1, 10.0])
def test_epipolar_translation_scale_invariance(rng, c):
    K = CameraIntrinsics(100.0, 100.0, 64.0, 64.0, 128, 128)
    R = euler_to_matrix([3.0, 20.0, -2.0])
    t = np.array([1.5, 0.1, 0.4])
    qt, qs = rng.uniform(20, 100, (12, 2)), rng.uniform(20, 100, (12, 2))
    a = epipolar_loss(qt, qs, PoseSE3(R, t), K, K)
    b = epipolar_loss(qt, qs, PoseSE3(R, c * t), K, K)
    assert abs(a - b) / a < 1e-9


def test_epipolar_pure_rotation_skipped():
    K = CameraIntrinsics(100.0, 100.0, 64.0, 64.0, 128, 128)
    with pytest.raises(SkippedTerm):
        epipolar_loss([[1, 2]], [[3, 4]], PoseSE3(euler_to_matrix([0, 10, 0]), np.zeros(3)), K, K)


def test_combine_and_zero_weights():
    terms = {"l2d": 2.0, "pixel": 0.3, "depth": 0.5, "epi": 7.0}
    w = LossWeights()
    assert combine(terms, w) == pytest.approx(2.0 + 0.15 * 0.3 + 1e-4 * 0.5 + 1e-3 * 7.0)
    zero = LossWeights(**{k: 0.0 for k in w.to_dict()})
    assert combine(terms, zero) == 0


def test_report_total_matches_weighted_sum(model, scene):
    ev = Evaluator(model, scene.rig)
    p = perturb(scene.params, 2.0, 0.01, 0.1, seed=3)
    rep = ev.report(p)
    w = LossWeights()
    t = rep.terms
    l2d = w.w_render * t["render"] + w.w_lm * t["landmark"] + w.w_id * t["identity"] + w.w_reg * t["reg"]
    assert t["l2d"] == pytest.approx(l2d, rel=1e-12)
    assert abs(rep.total - combine(t, w)) < 1e-12
    json.loads(rep.to_json())


def test_ground_truth_terms_are_at_floor(model, scene):
    t = Evaluator(model, scene.rig).report(scene.params).terms
    assert t["landmark"] < 1e-9 and t["epi"] < 1e-6 and t["render"] < 1e-6
    assert t["pixel"] < 0.02 and t["depth"] < 1e-2
    assert all(v >= 0 for v in t.values())


def test_zero_weights_total_zero(model, scene):
    zero = LossWeights(**{k: 0.0 for k in LossWeights().to_dict()})
    rep = Evaluator(model, scene.rig, EvalOptions(weights=zero)).report(perturb(scene.params, 3.0, 0.02, 0.2))
    assert rep.total == 0


def rotate_target(params, seed, deg=2.0):
    axis = np.random.default_rng(seed).standard_normal(3)
    d = np.zeros(params.tangent_size)
    d[params.tangent_groups()["rotation"][3:6]] = np.radians(deg) * axis / np.linalg.norm(axis)
    return params.retract(d)


@pytest.mark.parametrize("term", ["pixel", "epi"])
def test_two_degree_probe_increases_term(model, scene, term):
    ev = Evaluator(model, scene.rig)
    gt = ev.report(scene.params).terms[term]
    for seed in range(3):
        bad = ev.report(rotate_target(scene.params, seed)).terms[term]
        assert bad > 10 * gt


@pytest.mark.xfail(strict=True, reason="both depth maps are rendered from the same shared mesh and the "
                   "warp uses the same poses, so a pose change alone leaves the depth term at its floor")
def test_two_degree_probe_increases_depth(model, scene):
    ev = Evaluator(model, scene.rig)
    gt = ev.report(scene.params).terms["depth"]
    for seed in range(3):
        assert ev.report(rotate_target(scene.params, seed)).terms["depth"] > 10 * gt


def test_single_view_has_no_multiview_terms(model, scene):
    from mvface.synth import RigSpec, generate_scene
    one = generate_scene(model, RigSpec(seed=5, n_views=1))
    rep = Evaluator(model, one.rig).report(one.params)
    assert rep.terms["pixel"] == 0 and rep.terms["epi"] == 0 and rep.per_pair == []
    assert rep.warnings


@pytest.mark.parametrize("toy", [LandmarkToy, EpipolarToy, RegToy])
def test_fd_gradient_matches_symbolic(toy):
    for seed in range(3):
        f = toy(seed)
        g = numeric_gradient(f, f.x0, h=1e-6)
        assert relative_error(g, f.gradient(f.x0)) < 1e-4


@pytest.mark.parametrize("toy", [LandmarkToy, EpipolarToy])
def test_richardson_ratio_smooth_terms(toy):
    f = toy(0)
    chk = gradient_check(f, f.x0, h=1e-3)
    assert chk.passed
    r = chk.ratio[np.isfinite(chk.ratio)]
    assert r.size >= 4 and np.all((r >= 3.5) & (r <= 4.5))


def test_regularization_is_exact_under_central_differences():
    f = RegToy(0)
    chk = gradient_check(f, f.x0, h=1e-2)
    assert chk.passed and np.max(chk.discrepancy) < 1e-9
