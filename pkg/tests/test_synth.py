import numpy as np
import pytest

from mvface.geometry import rotation_angle_deg
from mvface.model import synthesize_shape, vertex_normals
from mvface.objective import pair_overlap
from mvface.raster import render
from mvface.raycast import two_view_visibility
from mvface.synth import (NoOverlapError, RigSpec, camera_pose, generate_model, generate_scene, perturb,
                          render_params)


def test_model_is_deterministic_per_seed():
    a, b = generate_model(4, V=400), generate_model(4, V=400)
    for name in ("mean_shape", "mean_albedo", "basis_id", "basis_exp", "basis_albedo", "triangles",
                 "landmark_indices", "landmark_confidence"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    c = generate_model(5, V=400)
    assert not np.array_equal(a.basis_id, c.basis_id)


def test_too_few_vertices():
    with pytest.raises(ValueError):
        generate_model(0, V=11)


def test_basis_columns_orthogonal(model):
    for B in (np.hstack([model.basis_id, model.basis_exp]), model.basis_albedo):
        G = B.T @ B
        d = np.sqrt(np.diag(G))
        assert np.max(np.abs(G / np.outer(d, d) - np.eye(len(G)))) < 1e-8


def test_basis_spectrum_decays(model):
    norms = np.linalg.norm(model.basis_id, axis=0)
    assert np.all(np.diff(norms) < 0)


def test_landmarks_and_confidence(model):
    assert model.n_landmarks == 27
    assert len(np.unique(model.landmark_indices)) == 27
    # the first landmark is the nose tip, the most protruding vertex
    S = model.mean_shape.reshape(-1, 3)
    assert model.landmark_indices[0] == np.argmax(S[:, 2])
    assert set(np.unique(model.landmark_confidence)) == {1.0, 10.0}


def test_yaw40_self_occlusion(model):
    S = model.mean_shape.reshape(-1, 3)
    K = RigSpec().intrinsics
    front, side = camera_pose(0, 0, 5.5), camera_pose(40, 0, 5.5)
    mask = render(S, model.triangles, front, K, vertex_normals(S, model.triangles),
                  model.mean_albedo.reshape(-1, 3), np.zeros(27)).mask
    vis = two_view_visibility(S, model.triangles, front, side, K, K, mask)
    assert (mask & ~vis).sum() / mask.sum() >= 0.02


def test_scene_is_deterministic(model):
    a, b = generate_scene(model, RigSpec(seed=3)), generate_scene(model, RigSpec(seed=3))
    assert np.array_equal(a.params.pack(), b.params.pack())
    for v in range(3):
        assert np.array_equal(a.rig.images[v], b.rig.images[v])
        assert np.array_equal(a.rig.landmarks[v], b.rig.landmarks[v])
        assert np.array_equal(a.depths[v], b.depths[v])


def test_scene_landmarks_inside_image(scene):
    K = scene.rig.intrinsics[0]
    for q in scene.rig.landmarks:
        assert np.all(np.isfinite(q)) and q.min() >= 0 and q.max() <= K.width - 1


def test_zero_scale_renders_mean_face(model):
    sc = generate_scene(model, RigSpec(seed=2, coeff_scale=0.0))
    assert not sc.params.alpha.any() and not sc.params.beta.any() and not sc.params.gamma.any()
    S = synthesize_shape(model, sc.params.alpha, sc.params.beta)
    assert np.array_equal(S, model.mean_shape)
    for v in range(3):
        r = render_params(model, sc.params, sc.rig.intrinsics[v], v)
        assert np.array_equal(r.image, sc.rig.images[v])


def test_single_view_rig(model):
    sc = generate_scene(model, RigSpec(seed=1, n_views=1))
    assert sc.rig.n_views == 1 and sc.params.n_views == 1
    assert sc.rig.masks[0].any()


def test_invalid_rig_spec():
    with pytest.raises(ValueError):
        RigSpec(n_views=0)


@pytest.mark.parametrize("seed", range(3))
def test_default_rig_overlap(model, seed):
    sc = generate_scene(model, RigSpec(seed=seed))
    pairs = pair_overlap(sc)
    assert len(pairs) == 6
    assert all(frac > 0.3 for _, _, frac in pairs)


def test_wide_yaw_has_no_overlap(model):
    with pytest.raises(NoOverlapError):
        generate_scene(model, RigSpec(seed=0, yaw_step=80.0))


def test_perturb_zero_is_identity(scene):
    p = perturb(scene.params, 0.0, 0.0, 0.0, seed=9)
    assert np.array_equal(p.pack(), scene.params.pack())


def test_perturb_rotation_magnitude(scene):
    p = perturb(scene.params, 10.0, 0.0, 0.0, seed=1)
    for v in range(3):
        ang = rotation_angle_deg(p.pose(v).rotation, scene.params.pose(v).rotation)
        assert abs(ang - 10.0) < 1e-9


def test_perturb_translation_fraction(scene):
    p = perturb(scene.params, 0.0, 0.05, 0.0, seed=1)
    for a, b in zip(p.views, scene.params.views):
        assert np.linalg.norm(a.translation - b.translation) / np.linalg.norm(b.translation) == pytest.approx(0.05)


def test_perturb_seeds_differ_and_repeat(scene):
    a = perturb(scene.params, 5.0, 0.02, 0.1, seed=1)
    b = perturb(scene.params, 5.0, 0.02, 0.1, seed=2)
    c = perturb(scene.params, 5.0, 0.02, 0.1, seed=1)
    assert not np.array_equal(a.pack(), b.pack())
    assert np.array_equal(a.pack(), c.pack())
