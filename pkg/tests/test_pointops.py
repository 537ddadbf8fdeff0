import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lidarvpr import pointops as po
from lidarvpr import simworld as sw
from tests.conftest import contour_points, rot

angles = st.floats(-10.0, 10.0, allow_nan=False)
point_sets = arrays(np.float64, st.tuples(st.integers(1, 25), st.just(2)), elements=st.floats(-50, 50))


def brute_chamfer(a, b):
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return d.min(1).mean() + d.min(0).mean()


def _scan(points, mask=None):
    points = np.asarray(points, dtype=np.float64)
    if mask is None:
        mask = np.ones(len(points), dtype=bool)
    return sw.Scan(0, points, np.asarray(mask))


# -- transforms ---------------------------------------------------------------


@settings(max_examples=100)
@given(angles, st.floats(-100, 100), st.floats(-100, 100))
def test_transform_wrap_and_inverse(a, tx, ty):
    t = po.RigidTransform2D(a, (tx, ty))
    assert -math.pi <= t.rotation < math.pi
    ident = t.compose(t.inverse())
    assert abs(po.wrap_angle(ident.rotation)) < 1e-9
    assert np.allclose(ident.translation, 0.0, atol=1e-9)


# -- rotate_scan --------------------------------------------------------------


def test_rotate_identity_and_axis(small_dataset):
    s = small_dataset.scan(5)
    r = po.rotate_scan(s, 0.0)
    assert np.array_equal(r.points, s.points) and np.array_equal(r.hit_mask, s.hit_mask)
    assert r.frame_index == s.frame_index
    one = po.rotate_scan(_scan(np.array([[1.0, 0.0]] + [[0.0, 0.0]] * 7)), math.pi / 2)
    np.testing.assert_allclose(one.points[2], [0.0, 1.0], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(angles, angles)
def test_rotate_composition(a, b):
    rng = np.random.default_rng(0)
    s = _scan(rng.normal(size=(32, 2)) * 10, rng.random(32) > 0.3)
    ab = po.rotate_scan(po.rotate_scan(s, a), b)
    direct = po.rotate_scan(s, a + b)
    # the rotated point sets agree; slot indices can differ by one where two roundings straddle a half-step
    hits_ab, hits_direct = ab.hits, direct.hits
    assert len(hits_ab) == len(hits_direct)
    expect = s.hits @ rot(a + b).T
    assert brute_chamfer(hits_ab, expect) < 1e-9 and brute_chamfer(hits_direct, expect) < 1e-9


def test_rotate_shifts_slots():
    s = _scan(np.arange(16, dtype=float).reshape(8, 2), [1, 0, 0, 0, 0, 0, 0, 0])
    r = po.rotate_scan(s, 2 * (2 * math.pi / 8))
    assert r.hit_mask.tolist() == [0, 0, 1, 0, 0, 0, 0, 0]


# -- chamfer ------------------------------------------------------------------


def test_chamfer_examples():
    x = np.random.default_rng(1).normal(size=(20, 2))
    assert po.chamfer_distance(x, x) == 0.0
    assert po.chamfer_distance([[0, 0]], [[3, 4]]) == 50.0
    assert po.chamfer_distance([[0, 0], [1, 0]], [[0, 0]]) == 0.5
    with pytest.raises(ValueError):
        po.chamfer_distance(np.zeros((0, 2)), x)


@settings(max_examples=100, deadline=None)
@given(point_sets, point_sets, angles)
def test_chamfer_properties(a, b, theta):
    ab = po.chamfer_distance(a, b)
    assert ab >= 0
    assert abs(ab - po.chamfer_distance(b, a)) <= 1e-12 * max(1.0, ab)
    np.testing.assert_allclose(ab, brute_chamfer(a, b), rtol=1e-12, atol=1e-12)
    r = rot(theta)
    assert abs(po.chamfer_distance(a @ r.T, b @ r.T) - ab) <= 1e-9 * max(1.0, ab)


# -- icp ----------------------------------------------------------------------


def test_icp_identity():
    src = contour_points(64, 0)
    t, costs, _ = po.icp_trace(src, src)
    assert abs(t.rotation) < 1e-9 and np.allclose(t.translation, 0, atol=1e-9)
    assert costs[-1] < 1e-9


def test_icp_known_transform():
    src = contour_points(64, 2)
    true = po.RigidTransform2D(math.radians(30), (5.0, 2.0))
    t = po.icp_align(src, true.apply(src))
    assert abs(t.rotation - true.rotation) < 1e-3
    assert np.allclose(t.translation, true.translation, atol=1e-2)


def test_half_turn_needs_multistart():
    src = contour_points(64, 4)
    dst = po.RigidTransform2D(math.pi).apply(src)
    plain = po.icp_align(src, dst)
    assert po.chamfer_distance(plain.apply(src), dst) > 1e-3
    assert po.verify_pair(src, dst, starts=8).chamfer < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-math.pi, math.pi), st.floats(-5, 5), st.floats(-5, 5))
def test_icp_pairing_cost_never_increases(seed, a, tx, ty):
    src = contour_points(48, seed)
    dst = po.RigidTransform2D(a, (tx, ty)).apply(contour_points(48, seed + 1))
    _, costs, _ = po.icp_trace(src, dst)
    assert np.all(np.diff(costs) <= 1e-12 * max(1.0, costs[0]))


def test_collinear_source_flagged():
    src = np.column_stack([np.arange(10.0), np.zeros(10)])
    _, _, fits = po.icp_trace(src, contour_points(30), max_iters=17)
    assert fits == 17
    with pytest.raises(ValueError):
        po.icp_align(np.zeros((1, 2)), contour_points(5))


# -- verify_pair --------------------------------------------------------------


def test_verify_self_and_rotations(small_dataset):
    s = small_dataset.scan(40)
    assert po.verify_pair(s, s).chamfer == pytest.approx(0.0, abs=1e-12)
    for k in range(16):
        score = po.verify_pair(s, po.rotate_scan(s, 2 * math.pi * k / 16), starts=8)
        assert score.chamfer < 1e-6, k
    assert po.verify_pair(s, po.rotate_scan(s, math.radians(170))).chamfer < 1e-6


def test_verify_ranks_far_pair_above_near_pair(small_dataset):
    poses = small_dataset.poses[:, :2]
    i = 20
    d = np.hypot(*(poses - poses[i]).T)
    near = int(np.argsort(d)[1])
    far = int(np.argmax(d))
    assert d[far] > 60
    near_score = po.verify_pair(small_dataset.scan(i), small_dataset.scan(near)).chamfer
    far_score = po.verify_pair(small_dataset.scan(i), small_dataset.scan(far)).chamfer
    assert far_score > near_score


def test_verify_deterministic(small_dataset):
    a, b = small_dataset.scan(3), small_dataset.scan(90)
    assert po.verify_pair(a, b) == po.verify_pair(a, b)
    with pytest.raises(ValueError):
        po.verify_pair(_scan(np.zeros((8, 2)), np.eye(8, dtype=bool)[0]), b)


# -- knn ----------------------------------------------------------------------


def test_knn_examples():
    db = np.random.default_rng(3).normal(size=(200, 16))
    assert po.knn_search(db[17], db, 5)[0] == 17
    assert po.knn_search(db[17], db, 0) == []
    q = np.random.default_rng(4).normal(size=16)
    full = np.argsort(((db - q) ** 2).sum(1), kind="stable")
    assert po.knn_search(q, db, 10) == full[:10].tolist()


def test_knn_random_trials_with_ties():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        db = rng.integers(-2, 3, size=(n, 3)).astype(float)  # many exact ties
        q = rng.integers(-2, 3, size=3).astype(float)
        k = int(rng.integers(0, n + 3))
        ex = set(rng.choice(n, size=int(rng.integers(0, n)), replace=False).tolist())
        d = ((db - q) ** 2).sum(1)
        oracle = sorted((j for j in range(n) if j not in ex), key=lambda j: (d[j], j))[:k]
        assert po.knn_search(q, db, k, ex) == oracle
