"""Pseudo-label mining: temporal initialisation, feature-space expansion,
geometric contraction, and the train/expand/contract epoch loop.

Training entry points take scans only. Poses are accepted solely by the
``supervised`` mode, which is an oracle upper bound.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import encoder as enc
from .pointops import verify_pair

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModeSpec:
    augment: bool
    expansion: str | None  # None, "knn" or "dynamic"
    verify: bool
    supervised: bool = False


MODES = {
    "sptm": ModeSpec(False, None, False),
    "sptm_a": ModeSpec(True, None, False),
    "sptm_f_k": ModeSpec(False, "knn", False),
    "sptm_a_f_k": ModeSpec(True, "knn", False),
    "sptm_a_f_d": ModeSpec(True, "dynamic", False),
    "tfvpr": ModeSpec(True, "dynamic", True),
    "supervised": ModeSpec(False, None, False, supervised=True),
}


class PoseAccessError(RuntimeError):
    """A mode needed poses that were not provided."""


@dataclass
class MiningConfig:
    n: int = 5
    u: int = 2
    K: int = 5
    verification_starts: int = 8
    icp_max_iters: int = 30
    icp_tol: float = 1e-9
    mutual: bool = True  # a pair must pass both frames' geometric thresholds
    gt_radius: float = 20.0  # supervised mode only

    def __post_init__(self):
        if self.n < 1 or self.u < 1 or self.K < 0:
            raise ValueError("need n >= 1, u >= 1, K >= 0")


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    margin: float = 0.2
    dim: int = 64
    hidden: tuple[int, int] = (64, 128)
    input_scale: float = 1.0 / 32.0
    positives_per_tuple: int = 2
    negatives_per_tuple: int = 18
    augment_query: bool = False
    seed: int = 0
    patience: int = 0  # 0 disables the label-stability early stop
    workers: int = 1


# --------------------------------------------------------------------------
# state
# --------------------------------------------------------------------------


@dataclass
class NeighborState:
    """Per-frame positive/negative sets as dense boolean matrices."""

    n: int
    u: int
    positives: np.ndarray
    negatives: np.ndarray
    epoch: int = 1

    def __len__(self) -> int:
        return self.positives.shape[0]

    def temporal_positives(self, i: int) -> np.ndarray:
        lo, hi = max(0, i - self.n + 1), min(len(self), i + self.n)
        idx = np.arange(lo, hi)
        return idx[idx != i]

    def pos(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.positives[i])

    def neg(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.negatives[i])

    def copy(self) -> NeighborState:
        return NeighborState(self.n, self.u, self.positives.copy(), self.negatives.copy(), self.epoch)

    def check(self) -> None:
        """Raise AssertionError if an invariant is broken."""
        diag = np.arange(len(self))
        assert not self.positives[diag, diag].any(), "frame is its own positive"
        assert not self.negatives[diag, diag].any(), "frame is its own negative"
        assert not (self.positives & self.negatives).any(), "positive/negative overlap"
        assert self.positives[_temporal_mask(len(self), self.n)].all(), "temporal positive lost"


def _temporal_mask(count: int, n: int) -> np.ndarray:
    idx = np.arange(count)
    gap = np.abs(idx[:, None] - idx[None, :])
    return (gap < n) & (gap > 0)


def init_labels(count: int, n: int = 5, u: int = 2) -> NeighborState:
    """Temporal positives |i-j| < n and negatives |i-v| > u*n."""
    if n < 1 or u < 1:
        raise ValueError("need n >= 1 and u >= 1")
    if count <= 2 * u * n:
        raise ValueError(f"{count} frames leave no temporal negatives for n={n}, u={u}")
    idx = np.arange(count)
    gap = np.abs(idx[:, None] - idx[None, :])
    return NeighborState(n, u, (gap < n) & (gap > 0), gap > u * n, epoch=1)


def supervised_labels(poses: np.ndarray | None, radius: float, u: int = 2) -> NeighborState:
    """Ground-truth labels: positives within ``radius``, negatives beyond u*radius."""
    if poses is None:
        raise PoseAccessError("supervised mode needs poses, but they are withheld")
    xy = np.asarray(poses, dtype=np.float64)[:, :2]
    d2 = ((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1)
    eye = np.eye(len(xy), dtype=bool)
    pos = (d2 <= radius * radius) & ~eye
    neg = d2 > (u * radius) ** 2
    # keep the temporal-anchor invariant meaningful: n=1 has no temporal positives
    return NeighborState(1, u, pos, neg & ~pos, epoch=1)


# --------------------------------------------------------------------------
# expansion and contraction
# --------------------------------------------------------------------------


def feature_distances(embeddings: np.ndarray) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    sq = np.einsum("ij,ij->i", e, e)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (e @ e.T)
    return np.sqrt(np.maximum(d2, 0.0))


def compute_threshold(i: int, embeddings, state: NeighborState, distances=None) -> float:
    """Largest feature distance from frame i to its temporal positives."""
    tp = state.temporal_positives(i)
    if tp.size == 0:
        raise ValueError(f"frame {i} has no temporal positives")
    if distances is not None:
        return float(distances[i, tp].max())
    e = np.asarray(embeddings, dtype=np.float64)
    return float(np.sqrt(((e[tp] - e[i]) ** 2).sum(axis=1)).max())


def expand(i: int, embeddings, state: NeighborState, K: int, dynamic: bool = True, distances=None):
    """Feature-space candidates for frame i.

    Takes the K nearest frames outside i's temporal window, keeps those
    closer than the frame's threshold when ``dynamic``, and drops frames that
    are already positives. Returns (candidate indices, their distances, tau).
    """
    if distances is None:
        e = np.asarray(embeddings, dtype=np.float64)
        row = np.sqrt(((e - e[i]) ** 2).sum(axis=1))
    else:
        row = distances[i]
    tau = compute_threshold(i, embeddings, state, distances)
    if K <= 0:
        return np.empty(0, dtype=np.int64), np.empty(0), tau
    pool = np.flatnonzero(np.abs(np.arange(len(row)) - i) >= state.n)
    order = pool[np.argsort(row[pool], kind="stable")][:K]
    if dynamic:
        order = order[row[order] < tau]
    order = order[~state.positives[i, order]]
    return order, row[order], tau


class Verifier:
    """Memoised geometric verification over one scan stream.

    Pair scores are cached by unordered frame pair; the pair is always
    aligned lower index onto higher index.
    """

    def __init__(self, hits: list[np.ndarray], starts=8, max_iters=30, tol=1e-9):
        self.hits = hits
        self.starts = starts
        self.max_iters = max_iters
        self.tol = tol
        self.cache: dict[tuple[int, int], float] = {}
        self.gamma: dict[int, float] = {}

    @classmethod
    def from_stream(cls, points, mask, cfg: MiningConfig):
        hits = [np.ascontiguousarray(points[i][mask[i]], dtype=np.float64) for i in range(len(points))]
        return cls(hits, cfg.verification_starts, cfg.icp_max_iters, cfg.icp_tol)

    def score(self, i: int, j: int) -> float:
        key = (i, j) if i < j else (j, i)
        got = self.cache.get(key)
        if got is None:
            got = verify_pair(self.hits[key[0]], self.hits[key[1]], self.starts, self.max_iters, self.tol).chamfer
            self.cache[key] = got
        return got

    def threshold(self, i: int, state: NeighborState) -> float:
        got = self.gamma.get(i)
        if got is None:
            tp = state.temporal_positives(i)
            if tp.size == 0:
                raise ValueError(f"frame {i} has no temporal positives")
            got = max(self.score(i, int(j)) for j in tp)
            self.gamma[i] = got
        return got


def geometric_threshold(i: int, verifier: Verifier, state: NeighborState) -> float:
    """Largest Chamfer-after-ICP between frame i and its temporal positives."""
    return verifier.threshold(i, state)


def verify(i: int, candidates, verifier: Verifier, state: NeighborState, mutual: bool = False) -> np.ndarray:
    """Candidates whose Chamfer-after-ICP to frame i is within i's threshold.

    With ``mutual`` the score must also be within the candidate's own
    threshold, i.e. the pair is compared against min(gamma_i, gamma_c).
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        return candidates
    gamma = verifier.threshold(i, state)
    keep = []
    for c in candidates:
        s = verifier.score(i, int(c))
        if s <= gamma and (not mutual or s <= verifier.threshold(int(c), state)):
            keep.append(c)
    return np.array(keep, dtype=np.int64)


def update_sets(state: NeighborState, i: int, verified) -> NeighborState:
    """Add verified frames to i's positives and drop them from its negatives."""
    verified = np.asarray(verified, dtype=np.int64)
    if verified.size:
        if (verified == i).any():
            raise ValueError("a frame cannot verify as its own positive")
        state.positives[i, verified] = True
        state.negatives[i, verified] = False
    return state


# --------------------------------------------------------------------------
# epoch loop
# --------------------------------------------------------------------------


def sample_tuples(state: NeighborState, rng: np.random.Generator, n_pos: int = 2, n_neg: int = 18):
    tuples = []
    for i in range(len(state)):
        pos, neg = state.pos(i), state.neg(i)
        if pos.size == 0 or neg.size == 0:
            continue
        p = rng.choice(pos, size=min(n_pos, pos.size), replace=False)
        q = rng.choice(neg, size=min(n_neg, neg.size), replace=False)
        tuples.append(enc.TrainingTuple(i, tuple(int(x) for x in p), tuple(int(x) for x in q)))
    return tuples


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    embeddings_sha256: str
    positive_sizes: list[int]
    positives: list[list[int]]
    negatives: list[list[list[int]]] = field(default_factory=list)
    tau: list[float | None] = field(default_factory=list)
    gamma: list[float | None] = field(default_factory=list)
    added: list[tuple[int, int, float, float]] = field(default_factory=list)
    labels_changed: bool = False
    seconds: float = 0.0


def index_ranges(row: np.ndarray) -> list[list[int]]:
    """Boolean row -> sorted [start, stop) runs of True entries."""
    idx = np.flatnonzero(row)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.r_[idx[0], idx[breaks + 1]]
    stops = np.r_[idx[breaks], idx[-1]] + 1
    return [[int(a), int(b)] for a, b in zip(starts, stops)]


def _digest(emb: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(emb, dtype="<f4").tobytes()).hexdigest()


def config_hash(mining: MiningConfig, train: TrainConfig, mode: str) -> str:
    import json

    blob = json.dumps({"mining": asdict(mining), "train": asdict(train), "mode": mode}, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _mine_epoch(state, emb, mining, spec, verifier, workers):
    """Expansion (and contraction) for every frame; returns per-frame results."""
    dist = feature_distances(emb)
    frames = range(len(state))

    def one(i):
        cands, dists, tau = expand(i, emb, state, mining.K, spec.expansion == "dynamic", dist)
        gamma = None
        if spec.verify:
            kept = verify(i, cands, verifier, state, mining.mutual)
            gamma = verifier.gamma.get(i)
            keep = np.isin(cands, kept)
            cands, dists = cands[keep], dists[keep]
        return cands, dists, tau, gamma

    if workers <= 1 or spec.verify:
        # the verifier cache is not shared across threads
        return [one(i) for i in frames]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(one, frames))


def run(points, mask, mining: MiningConfig, train: TrainConfig, mode: str = "tfvpr", poses=None, on_epoch=None, params=None):
    """Full label-mining training loop.

    Returns (params, state, records). ``on_epoch(record, params, state)`` is
    called at the end of each epoch. The record holds the labels the epoch
    trained on plus the frames mined for the next epoch; ``state`` already
    includes them.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {sorted(MODES)}")
    spec = MODES[mode]
    count = len(points)
    if spec.supervised:
        state = supervised_labels(poses, mining.gt_radius, mining.u)
    else:
        state = init_labels(count, mining.n, mining.u)
    if params is None:
        params = enc.init_params(train.seed, train.dim, train.hidden, train.input_scale)
    verifier = Verifier.from_stream(points, mask, mining) if spec.verify else None
    records: list[EpochRecord] = []
    stable = 0
    for e in range(1, train.epochs + 1):
        t0 = time.perf_counter()
        state.epoch = e
        rng = np.random.default_rng([train.seed, e, 0x7])
        tuples = sample_tuples(state, rng, train.positives_per_tuple, train.negatives_per_tuple)
        params, loss = enc.train_epoch(
            params, tuples, points, mask, train.lr, train.margin, train.seed, e, spec.augment, train.augment_query
        )
        emb = enc.embed_all(params, points, mask, workers=train.workers)
        rec = EpochRecord(
            epoch=e,
            mean_loss=loss,
            embeddings_sha256=_digest(emb),
            positive_sizes=state.positives.sum(axis=1).tolist(),
            positives=[state.pos(i).tolist() for i in range(count)],
            negatives=[index_ranges(state.negatives[i]) for i in range(count)],
        )
        if spec.expansion is not None:
            results = _mine_epoch(state, emb, mining, spec, verifier, train.workers)
            rec.tau = [r[2] for r in results]
            rec.gamma = [r[3] for r in results]
            before = state.positives.sum()
            for i, (cands, dists, tau, _) in enumerate(results):
                update_sets(state, i, cands)
                rec.added.extend((i, int(c), float(d), tau) for c, d in zip(cands, dists))
            rec.labels_changed = bool(state.positives.sum() > before)
        rec.seconds = time.perf_counter() - t0
        records.append(rec)
        log.info(
            "epoch=%d loss=%.5f positives=%d added=%d seconds=%.2f",
            e, loss, int(state.positives.sum()), len(rec.added), rec.seconds,
        )
        if on_epoch is not None:
            on_epoch(rec, params, state)
        stable = 0 if rec.labels_changed else stable + 1
        if train.patience and spec.expansion is not None and stable >= train.patience:
            break
    return params, state, records
