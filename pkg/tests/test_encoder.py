import hashlib
import math
import subprocess
import sys

import numpy as np
import pytest
from scipy.stats import chisquare

from lidarvpr import encoder as enc
from tests.oracles import finite_difference_check, random_grad_case


@pytest.fixture(scope="module")
def params():
    return enc.init_params(0, dim=16)


def test_embed_unit_norm_and_zero_hits(params, small_dataset):
    for i in range(0, len(small_dataset), 17):
        e = enc.embed(params, small_dataset.scan(i))
        assert abs(np.linalg.norm(e.astype(np.float64)) - 1) < 1e-6
    s = small_dataset.scan(0)
    s.hit_mask[:] = False
    with pytest.raises(ValueError):
        enc.embed(params, s)


def test_embed_permutation_invariant(small_dataset):
    p64 = enc.init_params(1, dim=16, dtype=np.float64)
    s = small_dataset.scan(11)
    base = enc.embed(p64, s)
    rng = np.random.default_rng(0)
    for _ in range(100):
        perm = rng.permutation(len(s.points))
        shuffled = type(s)(s.frame_index, s.points[perm], s.hit_mask[perm])
        np.testing.assert_allclose(enc.embed(p64, shuffled), base, atol=1e-9, rtol=0)


def test_embedding_bit_identical_across_processes():
    code = (
        "import hashlib, numpy as np\n"
        "from lidarvpr import encoder as enc\n"
        "rng = np.random.default_rng(9)\n"
        "pts = rng.normal(scale=40, size=(5, 64, 2)); mask = rng.random((5, 64)) > 0.3\n"
        "e = enc.embed_all(enc.init_params(4), pts, mask)\n"
        "print(hashlib.sha256(e.tobytes()).hexdigest())\n"
    )
    outs = {subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout for _ in range(2)}
    assert len(outs) == 1


def test_loss_examples():
    q = np.array([1.0, 0.0])
    pos = np.array([[1.0, 0.1], [1.0, -0.5]])
    neg = np.array([[1.0, 0.2]])
    loss, *_ = enc.ranking_loss_from_embeddings(q, pos, neg, margin=0.2)
    assert loss == pytest.approx(0.1, abs=1e-12)
    far = np.array([[-1.0, 0.0], [0.0, 1.0]])
    loss, gq, gp, gn = enc.ranking_loss_from_embeddings(q, pos, far, margin=0.2)
    assert loss == 0.0 and not gq.any() and not gp.any() and not gn.any()
    with pytest.raises(ValueError):
        enc.ranking_loss_from_embeddings(q, pos[:0], neg)


def test_loss_min_tie_routes_to_lowest_index():
    q = np.array([0.0, 0.0])
    pos = np.array([[0.3, 0.0], [0.0, 0.3]])
    _, _, gp, _ = enc.ranking_loss_from_embeddings(q, pos, np.array([[0.1, 0.1]]), margin=0.2)
    assert gp[0].any() and not gp[1].any()


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    worst, checked, loss = finite_difference_check(*random_grad_case(seed))
    assert loss > 0 and checked > 50
    assert worst < 1e-4


def test_loss_non_negative(small_dataset):
    p = enc.init_params(2, dim=8)
    rng = np.random.default_rng(2)
    for _ in range(30):
        idx = rng.choice(len(small_dataset), size=6, replace=False).tolist()
        tup = enc.TrainingTuple(idx[0], tuple(idx[1:3]), tuple(idx[3:]))
        loss, _ = enc.ranking_loss(p, tup, small_dataset.points, small_dataset.mask, 0.2)
        assert loss >= 0


def test_tuple_validation():
    with pytest.raises(ValueError):
        enc.TrainingTuple(1, (1, 2), (3,))
    with pytest.raises(ValueError):
        enc.TrainingTuple(0, (1, 2), (2,))


def test_augmentation(small_dataset):
    tup = enc.TrainingTuple(5, (4, 6), (50, 60, 70))
    pts, mask = small_dataset.points, small_dataset.mask
    bp, bm, ang = enc.augment_tuple(tup, pts, mask, seed=1, enabled=False)
    assert np.array_equal(bp, pts[[5, 4, 6, 50, 60, 70]]) and ang.size == 0
    a1 = enc.augmentation_angles(1, 3, tup)
    assert np.array_equal(a1, enc.augmentation_angles(1, 3, tup)) and len(a1) == 2
    assert len(enc.augmentation_angles(1, 3, tup, augment_query=True)) == 3
    bp, bm, _ = enc.augment_tuple(tup, pts, mask, seed=1, epoch=3)
    assert np.array_equal(bp[0], pts[5]) and np.array_equal(bp[3:], pts[[50, 60, 70]])
    assert not np.array_equal(bp[1], pts[4])
    bq, _, _ = enc.augment_tuple(tup, pts, mask, seed=1, epoch=3, augment_query=True)
    assert not np.array_equal(bq[0], pts[5])


def test_augmentation_angles_uniform():
    draws = np.concatenate(
        [enc.augmentation_angles(7, e, enc.TrainingTuple(q, (q + 1, q + 2), (q + 40,))) for e in range(5) for q in range(1000)]
    )
    assert draws.size == 10_000
    assert draws.min() >= 0 and draws.max() < 2 * math.pi
    counts, _ = np.histogram(draws, bins=16, range=(0, 2 * math.pi))
    assert chisquare(counts).pvalue > 0.01


def _tuples(n=12):
    return [enc.TrainingTuple(i, ((i + 1) % n,), ((i + n // 2) % n,)) for i in range(n)]


def test_lr_zero_leaves_weights(small_dataset):
    p = enc.init_params(3, dim=8)
    before = {k: v.copy() for k, v in p.weights.items()}
    enc.train_epoch(p, _tuples(), small_dataset.points, small_dataset.mask, lr=0.0)
    for k in enc.PARAM_NAMES:
        assert np.array_equal(before[k], p.weights[k])


def test_zero_loss_tuple_only_bumps_step(small_dataset):
    p = enc.init_params(3, dim=8)
    tup = enc.TrainingTuple(0, (1,), (2,))
    loss, _ = enc.ranking_loss(p, tup, small_dataset.points, small_dataset.mask, margin=0.0)
    emb = enc.embed_all(p, small_dataset.points[:3], small_dataset.mask[:3])
    d = np.linalg.norm(emb[0] - emb[1:], axis=1)
    # pick the ordering that makes the hinge inactive
    tup = enc.TrainingTuple(0, (1,), (2,)) if d[0] < d[1] else enc.TrainingTuple(0, (2,), (1,))
    before = p.copy()
    _, mean = enc.train_epoch(p, [tup], small_dataset.points, small_dataset.mask, margin=0.0)
    assert mean == 0.0 and p.step == before.step + 1
    for k in enc.PARAM_NAMES:
        assert np.array_equal(before.weights[k], p.weights[k])


def _three_clusters(per=8, points=48, seed=0):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 2 * math.pi, points, endpoint=False)
    shapes = [
        np.column_stack([20 * np.cos(t), 20 * np.sin(t)]),
        np.column_stack([np.linspace(-30, 30, points), np.zeros(points) + 5]),
        np.column_stack([10 * np.cos(t) + 15, 25 * np.sin(t) - 10]),
    ]
    pts = np.concatenate([[s + rng.normal(scale=1.0, size=s.shape) for _ in range(per)] for s in shapes])
    mask = np.ones(pts.shape[:2], dtype=bool)
    labels = np.repeat(np.arange(3), per)
    return pts.astype(np.float32), mask, labels


def test_three_cluster_convergence():
    pts, mask, labels = _three_clusters()
    rng = np.random.default_rng(1)
    tuples = []
    for i in range(len(labels)):
        same = [j for j in np.flatnonzero(labels == labels[i]) if j != i]
        other = np.flatnonzero(labels != labels[i])
        tuples.append(enc.TrainingTuple(i, tuple(int(x) for x in rng.choice(same, 2, replace=False)), tuple(int(x) for x in rng.choice(other, 6, replace=False))))
    p = enc.init_params(5, dim=16)
    losses = [enc.train_epoch(p, tuples, pts, mask, lr=1e-3, seed=0, epoch=e)[1] for e in range(50)]
    assert losses[-1] < 0.1 * losses[0]


def test_train_epoch_bit_reproducible(small_dataset):
    runs = []
    for _ in range(2):
        p = enc.init_params(6, dim=8)
        enc.train_epoch(p, _tuples(20), small_dataset.points, small_dataset.mask, seed=3, epoch=1, augment=True)
        runs.append(hashlib.sha256(p.flat().tobytes()).hexdigest())
    assert runs[0] == runs[1]


def test_train_epoch_rejects_non_finite(small_dataset):
    p = enc.init_params(6, dim=8)
    p.weights["b3"][:] = np.nan
    with pytest.raises(enc.NonFiniteLossError):
        enc.train_epoch(p, _tuples(), small_dataset.points, small_dataset.mask)
    with pytest.raises(ValueError):
        enc.train_epoch(p, [], small_dataset.points, small_dataset.mask)


def test_embed_all(params, small_dataset):
    one = enc.embed_all(params, small_dataset.points[:1], small_dataset.mask[:1])
    assert one.shape == (1, 16)
    serial = enc.embed_all(params, small_dataset.points, small_dataset.mask, chunk=16)
    parallel = enc.embed_all(params, small_dataset.points, small_dataset.mask, chunk=16, workers=4)
    assert serial.tobytes() == parallel.tobytes()
    np.testing.assert_allclose(np.linalg.norm(serial.astype(np.float64), axis=1), 1.0, atol=1e-6)


def test_checkpoint_round_trip(tmp_path, small_dataset):
    p = enc.init_params(8, dim=8)
    enc.train_epoch(p, _tuples(), small_dataset.points, small_dataset.mask)
    enc.save_checkpoint(p, tmp_path, "params_e1")
    back = enc.load_checkpoint(tmp_path, "params_e1")
    assert back.step == p.step and back.input_scale == p.input_scale
    for k in enc.PARAM_NAMES:
        assert np.array_equal(back.weights[k], p.weights[k])
        assert np.array_equal(back.m[k], p.m[k]) and np.array_equal(back.v[k], p.v[k])
    raw = (tmp_path / "params_e1.f32").read_bytes()
    (tmp_path / "params_e1.f32").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        enc.load_checkpoint(tmp_path, "params_e1")
