import warnings

import numpy as np
import pytest
from scipy.spatial.distance import pdist

from pcad.augment import (
    HALVES,
    RubikMove,
    apply_move,
    eligible_instances,
    inject_synthetic_anomalies,
    instance_center,
    random_moves,
    rubik_augment,
    scale_augment,
    split_eighths,
)
from pcad.data import ClassMap, LabelSet, PointCloud, PrimitiveSpec, SceneRecipe, generate_synthetic_scene
from pcad.errors import ContractError


def test_move_validation():
    with pytest.raises(ContractError):
        RubikMove("+W", 1)
    with pytest.raises(ContractError):
        RubikMove("+X", 0)
    with pytest.raises(ContractError):
        RubikMove("+X", 4)
    for half in HALVES:
        R = RubikMove(half, 1).rotation()
        np.testing.assert_array_equal(R @ R.T, np.eye(3))
        assert np.linalg.det(R) == pytest.approx(1.0)


def test_split_eighths_cube_corners():
    pts = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
    groups = split_eighths(pts)
    assert [len(g) for g in groups] == [1] * 8
    # bit k set = positive side of axis k
    for code, g in enumerate(groups):
        p = pts[g[0]]
        assert [(p[k] > 0) for k in range(3)] == [bool(code >> k & 1) for k in range(3)]


def test_split_eighths_single_point_and_partition(rng):
    groups = split_eighths(np.array([[1.0, 2.0, 3.0]]))
    assert sorted(len(g) for g in groups) == [0] * 7 + [1]
    assert len(groups[7]) == 1  # boundary goes to the positive side
    pts = rng.normal(size=(100, 3))
    allidx = np.concatenate(split_eighths(pts))
    assert sorted(allidx.tolist()) == list(range(100))


def test_rubik_hand_example():
    pts = np.array([[1.0, 0, 1], [-1.0, 0, -1]])
    out = rubik_augment(pts, [RubikMove("+Z", 2)])
    np.testing.assert_allclose(out, [[-1.0, 0, 1], [-1.0, 0, -1]], atol=1e-15)


def test_rubik_errors():
    with pytest.raises(ContractError):
        rubik_augment(np.zeros((0, 3)), [RubikMove("+X", 1)])
    with pytest.raises(ContractError):
        rubik_augment(np.ones((3, 3)), [])


def _half_mask(pts, move, c):
    off = pts[:, move.axis] - c[move.axis]
    return off >= 0 if move.positive else off < 0


def test_rubik_is_piecewise_isometry(rng):
    for _ in range(50):
        pts = rng.normal(size=(int(rng.integers(8, 80)), 3)) * rng.uniform(0.2, 3, size=3)
        c = instance_center(pts)
        move = random_moves(rng, 1)[0]
        out = apply_move(pts, move, c)
        sel = _half_mask(pts, move, c)
        for mask in (sel, ~sel):
            if mask.sum() > 1:
                assert np.abs(pdist(out[mask]) - pdist(pts[mask])).max() < 1e-12
        axis_dist = np.delete(pts - c, move.axis, axis=1)
        axis_dist_out = np.delete(out - c, move.axis, axis=1)
        np.testing.assert_allclose(np.linalg.norm(axis_dist_out, axis=1), np.linalg.norm(axis_dist, axis=1), atol=1e-12)
        # the centre lies on the rotation axis
        np.testing.assert_allclose(c + (c - c) @ move.rotation().T, c, atol=0)


def test_rubik_seeded_determinism(rng):
    pts = rng.normal(size=(40, 3))
    np.testing.assert_array_equal(rubik_augment(pts, rng_seed=3), rubik_augment(pts, rng_seed=3))
    assert len(pts) == len(rubik_augment(pts, rng_seed=4))


def test_bbox_center_option(rng):
    pts = rng.normal(size=(30, 3))
    c = instance_center(pts, "bbox")
    np.testing.assert_allclose(c, (pts.min(0) + pts.max(0)) / 2)
    with pytest.raises(ContractError):
        instance_center(pts, "median")


def test_scale_examples(rng):
    pts = rng.normal(size=(20, 3))
    np.testing.assert_allclose(scale_augment(pts, 1.0), pts, atol=1e-15)
    c = pts.mean(0)
    np.testing.assert_allclose(np.linalg.norm(scale_augment(pts, 2.0) - c, axis=1),
                               2 * np.linalg.norm(pts - c, axis=1), atol=1e-12)
    half = scale_augment(pts, 0.5)
    diag = np.linalg.norm(pts.max(0) - pts.min(0))
    assert np.linalg.norm(half.max(0) - half.min(0)) == pytest.approx(diag / 2, abs=1e-12)
    with pytest.raises(ContractError):
        scale_augment(pts, 0.0)
    with pytest.raises(ContractError):
        scale_augment(pts, -1.0)


def test_scale_changes_spacing_by_factor(rng):
    from scipy.spatial import cKDTree

    pts = rng.normal(size=(50, 3))
    nn = cKDTree(pts).query(pts, k=2)[0][:, 1]
    big = scale_augment(pts, 3.0)
    nn_big = cKDTree(big).query(big, k=2)[0][:, 1]
    np.testing.assert_allclose(nn_big, 3.0 * nn, rtol=1e-12)


def _three_box_scene():
    recipe = SceneRecipe((PrimitiveSpec("ground", 0), PrimitiveSpec("box", 1, (3, 3), (1.5, 2.0))))
    cm = ClassMap({0, 1}, surface_classes={0})
    cloud, labels = generate_synthetic_scene(4, recipe, cm)
    return cloud, labels, cm


def test_injection_counts_and_flags():
    cloud, labels, cm = _three_box_scene()
    assert len(eligible_instances(labels, cm)) == 3
    prov = []
    c2, l2 = inject_synthetic_anomalies(cloud, labels, cm, "rubik", 1.0, 0, prov)
    assert len(prov) == 3 and c2.n == cloud.n
    assert (l2.anomaly == (labels.instance > 0)).all()
    np.testing.assert_array_equal(l2.semantic, labels.semantic)
    ground = labels.instance == 0
    np.testing.assert_array_equal(c2.positions[ground], cloud.positions[ground])


def test_injection_rate_zero_is_identity():
    cloud, labels, cm = _three_box_scene()
    c2, l2 = inject_synthetic_anomalies(cloud, labels, cm, "rubik", 0.0, 0)
    assert c2 is cloud and l2 is labels


def test_injection_deterministic_and_partial():
    cloud, labels, cm = _three_box_scene()
    p1, p2 = [], []
    a = inject_synthetic_anomalies(cloud, labels, cm, "scale", 0.5, 7, p1)
    b = inject_synthetic_anomalies(cloud, labels, cm, "scale", 0.5, 7, p2)
    assert p1 == p2 and len(p1) == 2
    np.testing.assert_array_equal(a[0].positions, b[0].positions)
    assert all(0.25 <= r["factor"] <= 0.5 or 2 <= r["factor"] <= 4 for r in p1)


def test_injection_no_eligible_warns():
    cloud = PointCloud(np.random.default_rng(0).normal(size=(10, 3)), np.full(10, 0.5))
    labels = LabelSet(np.zeros(10), np.zeros(10), np.zeros(10, bool))
    cm = ClassMap({0}, surface_classes={0})
    with pytest.warns(UserWarning):
        c2, l2 = inject_synthetic_anomalies(cloud, labels, cm, "rubik", 1.0, 0)
    assert c2 is cloud


def test_small_instances_not_eligible():
    n = 30
    cloud = PointCloud(np.random.default_rng(0).normal(size=(n, 3)), np.full(n, 0.5))
    inst = np.r_[np.ones(10), np.full(20, 2)]
    labels = LabelSet(np.ones(n), inst, np.zeros(n, bool))
    assert eligible_instances(labels, ClassMap({1})) == [2]


def test_injection_rejects_bad_arguments():
    cloud, labels, cm = _three_box_scene()
    with pytest.raises(ContractError):
        inject_synthetic_anomalies(cloud, labels, cm, "flip", 0.5, 0)
    with pytest.raises(ContractError):
        inject_synthetic_anomalies(cloud, labels, cm, "rubik", 1.5, 0)
