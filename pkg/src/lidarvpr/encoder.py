"""Permutation-invariant scan encoder trained with a margin ranking loss.

Architecture: shared per-point MLP 2 -> H1 -> H2 (tanh), max-pool over the
hit points, linear head H2 -> D, L2 normalisation. Gradients are written out
by hand; Adam does the updates. Training runs in float32, while float64
parameters are supported for gradient checking.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")
FORMAT_VERSION = 1
BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class NonFiniteLossError(FloatingPointError):
    """Training produced NaN or Inf."""


@dataclass
class EncoderParams:
    weights: dict[str, np.ndarray]
    input_scale: float = 1.0 / 32.0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for k in PARAM_NAMES:
            self.m.setdefault(k, np.zeros_like(self.weights[k]))
            self.v.setdefault(k, np.zeros_like(self.weights[k]))

    @property
    def dim(self) -> int:
        return self.weights["w3"].shape[1]

    @property
    def hidden(self) -> tuple[int, int]:
        return self.weights["w1"].shape[1], self.weights["w2"].shape[1]

    @property
    def dtype(self):
        return self.weights["w1"].dtype

    def copy(self) -> EncoderParams:
        cp = lambda d: {k: a.copy() for k, a in d.items()}  # noqa: E731
        return EncoderParams(cp(self.weights), self.input_scale, cp(self.m), cp(self.v), self.step)

    def astype(self, dtype) -> EncoderParams:
        cv = lambda d: {k: a.astype(dtype) for k, a in d.items()}  # noqa: E731
        return EncoderParams(cv(self.weights), self.input_scale, cv(self.m), cv(self.v), self.step)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights[k].ravel() for k in PARAM_NAMES])

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.weights.values())


def init_params(seed: int, dim: int = 64, hidden=(64, 128), input_scale: float = 1.0 / 32.0, dtype=np.float32):
    """Uniform(+-1/sqrt(fan_in)) initialisation."""
    rng = np.random.default_rng(seed)
    h1, h2 = hidden
    shapes = {"w1": (2, h1), "b1": (h1,), "w2": (h1, h2), "b2": (h2,), "w3": (h2, dim), "b3": (dim,)}
    fan_in = {"w1": 2, "b1": 2, "w2": h1, "b2": h1, "w3": h2, "b3": h2}
    weights = {}
    for k in PARAM_NAMES:
        bound = 1.0 / math.sqrt(fan_in[k])
        weights[k] = rng.uniform(-bound, bound, size=shapes[k]).astype(dtype)
    return EncoderParams(weights, input_scale)


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


def forward(params: EncoderParams, points: np.ndarray, mask: np.ndarray):
    """Embed a batch. points [B, P, 2], mask [B, P]. Returns (emb, cache)."""
    w = params.weights
    dt = params.dtype
    if not mask.any(axis=1).all():
        raise ValueError("every scan needs at least one hit point")
    x = np.asarray(points, dtype=dt) * dt.type(params.input_scale)
    h1 = np.tanh(x @ w["w1"] + w["b1"])
    # tanh is monotone, so pool the pre-activations and squash only the winners
    pooled, arg = kernels.masked_argmax(h1 @ w["w2"] + w["b2"], mask)
    g = np.tanh(pooled)
    u = g @ w["w3"] + w["b3"]
    norm = np.sqrt(np.einsum("bd,bd->b", u, u))[:, None]
    emb = u / norm
    return emb, (x, h1, arg, g, norm, emb)


def backward(params: EncoderParams, cache, d_emb: np.ndarray) -> dict[str, np.ndarray]:
    w = params.weights
    x, h1, arg, g, norm, emb = cache
    b, p, hid1 = h1.shape
    du = (d_emb - emb * np.einsum("bd,bd->b", emb, d_emb)[:, None]) / norm
    grads = {"w3": g.T @ du, "b3": du.sum(axis=0)}
    da2 = (du @ w["w3"].T) * (1.0 - g * g)  # [B, H2] at the pooled points
    grads["b2"] = da2.sum(axis=0)
    rows = (np.arange(b)[:, None] * p + arg).ravel()  # flat point index per (b, c)
    h1_pool = h1.reshape(b * p, hid1)[rows].reshape(b, -1, hid1)  # [B, H2, H1]
    grads["w2"] = np.einsum("bch,bc->hc", h1_pool, da2)
    contrib = (da2[:, :, None] * w["w2"].T[None, :, :]).reshape(-1, hid1)
    used = np.unique(rows)
    dh1 = kernels.scatter_rows(np.searchsorted(used, rows), contrib, used.size)
    da1 = dh1 * (1.0 - h1.reshape(b * p, hid1)[used] ** 2)
    grads["w1"] = x.reshape(b * p, 2)[used].T @ da1
    grads["b1"] = da1.sum(axis=0)
    return grads


def embed(params: EncoderParams, scan) -> np.ndarray:
    """Unit-norm embedding of one scan (max-pool over its hits only)."""
    emb, _ = forward(params, scan.points[None], scan.hit_mask[None])
    return emb[0]


def embed_all(params: EncoderParams, points: np.ndarray, mask: np.ndarray, chunk: int = 64, workers: int = 1):
    """Embeddings for every frame, in frame order.

    Work is split in fixed chunks, so results do not depend on ``workers``.
    """
    n = points.shape[0]
    out = np.empty((n, params.dim), dtype=params.dtype)
    starts = list(range(0, n, chunk))

    def run(s):
        out[s : s + chunk] = forward(params, points[s : s + chunk], mask[s : s + chunk])[0]

    if workers <= 1:
        for s in starts:
            run(s)
    else:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, starts))
    return out


# --------------------------------------------------------------------------
# ranking loss
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingTuple:
    query_index: int
    positive_indices: tuple[int, ...]
    negative_indices: tuple[int, ...]

    def __post_init__(self):
        pos, neg = set(self.positive_indices), set(self.negative_indices)
        if self.query_index in pos or self.query_index in neg or pos & neg:
            raise ValueError(f"inconsistent tuple {self}")


def ranking_loss_from_embeddings(q, pos, neg, margin: float = 0.2):
    """Hinge ranking loss and its gradient w.r.t. the three embedding groups.

    loss = sum_v max(min_j |q - p_j| + margin - |q - n_v|, 0). The min routes
    its subgradient through the first closest positive.
    """
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("ranking loss needs at least one positive and one negative")
    dp_vec = q[None, :] - pos
    dn_vec = q[None, :] - neg
    dp = np.sqrt(np.einsum("kd,kd->k", dp_vec, dp_vec))
    dn = np.sqrt(np.einsum("kd,kd->k", dn_vec, dn_vec))
    j = int(np.argmin(dp))
    hinge = dp[j] + margin - dn
    active = hinge > 0
    loss = float(hinge[active].sum())
    g_q = np.zeros_like(q)
    g_p = np.zeros_like(pos)
    g_n = np.zeros_like(neg)
    n_active = int(active.sum())
    if n_active:
        unit_p = dp_vec[j] / dp[j] if dp[j] > 0 else np.zeros_like(q)
        safe = np.where(dn > 0, dn, 1.0)[:, None]
        unit_n = np.where(dn[:, None] > 0, dn_vec / safe, 0.0)
        g_q += n_active * unit_p - unit_n[active].sum(axis=0)
        g_p[j] = -n_active * unit_p
        g_n[active] = unit_n[active]
    return loss, g_q, g_p, g_n


def tuple_batch(tup: TrainingTuple, points, mask):
    idx = [tup.query_index, *tup.positive_indices, *tup.negative_indices]
    return points[idx], mask[idx]


def ranking_loss(params: EncoderParams, tup: TrainingTuple, points, mask, margin: float = 0.2):
    """Loss and parameter gradients for one tuple.

    ``points``/``mask`` are either the full stream (indexed by the tuple) or
    an already assembled [1 + n_pos + n_neg, P, ...] batch.
    """
    if points.shape[0] != 1 + len(tup.positive_indices) + len(tup.negative_indices):
        points, mask = tuple_batch(tup, points, mask)
    emb, cache = forward(params, points, mask)
    npos = len(tup.positive_indices)
    loss, g_q, g_p, g_n = ranking_loss_from_embeddings(emb[0], emb[1 : 1 + npos], emb[1 + npos :], margin)
    d_emb = np.concatenate([g_q[None], g_p, g_n]).astype(params.dtype)
    return loss, backward(params, cache, d_emb)


# --------------------------------------------------------------------------
# augmentation and optimisation
# --------------------------------------------------------------------------


def augmentation_angles(seed: int, epoch: int, tup: TrainingTuple, augment_query: bool = False) -> np.ndarray:
    """Heading draws for one tuple: one per positive, then one for the query."""
    rng = np.random.default_rng([seed, epoch, tup.query_index, 0xA06])
    n = len(tup.positive_indices) + (1 if augment_query else 0)
    return rng.uniform(0.0, 2.0 * math.pi, size=n)


def _rotate_views(points, mask, angles):
    """Rotate [k, P, 2] views by ``angles`` and roll ray slots to keep bearing order."""
    p = points.shape[1]
    out_pts = np.empty_like(points)
    out_mask = np.empty_like(mask)
    for k, a in enumerate(angles):
        shift = int(round(a / (2.0 * math.pi / p)))
        c, s = math.cos(a), math.sin(a)
        rolled = np.roll(points[k], shift, axis=0)
        out_pts[k, :, 0] = c * rolled[:, 0] - s * rolled[:, 1]
        out_pts[k, :, 1] = s * rolled[:, 0] + c * rolled[:, 1]
        out_mask[k] = np.roll(mask[k], shift)
    return out_pts, out_mask


def augment_tuple(tup: TrainingTuple, points, mask, seed: int, epoch: int = 0, enabled: bool = True, augment_query: bool = False):
    """Assemble the tuple batch with positives (and optionally the query)
    randomly re-headed. Returns (points, mask, angles)."""
    bp, bm = tuple_batch(tup, points, mask)
    if not enabled:
        return bp, bm, np.empty(0)
    angles = augmentation_angles(seed, epoch, tup, augment_query)
    npos = len(tup.positive_indices)
    bp, bm = bp.copy(), bm.copy()
    bp[1 : 1 + npos], bm[1 : 1 + npos] = _rotate_views(bp[1 : 1 + npos], bm[1 : 1 + npos], angles[:npos])
    if augment_query:
        bp[:1], bm[:1] = _rotate_views(bp[:1], bm[:1], angles[npos:])
    return bp, bm, angles


def adam_step(params: EncoderParams, grads: dict[str, np.ndarray], lr: float) -> None:
    params.step += 1
    t = params.step
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for k in PARAM_NAMES:
        g = grads[k]
        m = params.m[k]
        v = params.v[k]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + ADAM_EPS)
        params.weights[k] -= update.astype(params.dtype)


def train_epoch(
    params: EncoderParams,
    tuples: list[TrainingTuple],
    points: np.ndarray,
    mask: np.ndarray,
    lr: float = 1e-3,
    margin: float = 0.2,
    seed: int = 0,
    epoch: int = 0,
    augment: bool = False,
    augment_query: bool = False,
):
    """One pass over the shuffled tuples with a per-tuple Adam update.

    Returns (params, mean_loss); ``params`` is updated in place.
    """
    if not tuples:
        raise ValueError("train_epoch needs at least one tuple")
    order = np.random.default_rng([seed, epoch, 0x5EED]).permutation(len(tuples))
    total = 0.0
    for n, t in enumerate(order):
        tup = tuples[t]
        bp, bm, _ = augment_tuple(tup, points, mask, seed, epoch, augment, augment_query)
        loss, grads = ranking_loss(params, tup, bp, bm, margin)
        if not math.isfinite(loss):
            raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, tuple {n} (query {tup.query_index})")
        total += loss
        adam_step(params, grads, lr)
        if not params.all_finite():
            raise NonFiniteLossError(f"non-finite parameters after epoch {epoch}, tuple {n}")
    return params, total / len(tuples)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(params: EncoderParams, out_dir, stem: str = "params") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blocks = [params.weights, params.m, params.v]
    flat = np.concatenate([b[k].ravel() for b in blocks for k in PARAM_NAMES]).astype("<f4")
    flat.tofile(out / f"{stem}.f32")
    meta = {
        "format_version": FORMAT_VERSION,
        "layout": "weights, adam_m, adam_v; each in order " + ",".join(PARAM_NAMES),
        "shapes": {k: list(params.weights[k].shape) for k in PARAM_NAMES},
        "dim": params.dim,
        "hidden": list(params.hidden),
        "input_scale": params.input_scale,
        "step": params.step,
        "adam": {"beta1": BETA1, "beta2": BETA2, "eps": ADAM_EPS},
    }
    (out / f"{stem}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(run_dir, stem: str = "params") -> EncoderParams:
    d = Path(run_dir)
    meta = json.loads((d / f"{stem}.json").read_text())
    flat = np.fromfile(d / f"{stem}.f32", dtype="<f4").astype(np.float32)
    blocks = []
    pos = 0
    for _ in range(3):
        block = {}
        for k in PARAM_NAMES:
            shape = tuple(meta["shapes"][k])
            size = int(np.prod(shape))
            block[k] = flat[pos : pos + size].reshape(shape).copy()
            pos += size
        blocks.append(block)
    if pos != flat.size:
        raise ValueError(f"{stem}.f32 size does not match {stem}.json")
    return EncoderParams(blocks[0], meta["input_scale"], blocks[1], blocks[2], meta["step"])
