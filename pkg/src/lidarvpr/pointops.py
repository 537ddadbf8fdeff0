"""Geometric primitives: scan rotation, Chamfer distance, ICP, exact KNN."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .simworld import Scan

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap to [-pi, pi)."""
    return (a + math.pi) % TWO_PI - math.pi


@dataclass(frozen=True)
class RigidTransform2D:
    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "rotation", wrap_angle(float(self.rotation)))
        tx, ty = self.translation
        object.__setattr__(self, "translation", (float(tx), float(ty)))

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.array([[c, -s], [s, c]])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.matrix.T + np.asarray(self.translation)

    def compose(self, other: RigidTransform2D) -> RigidTransform2D:
        """``self`` after ``other``."""
        t = self.matrix @ np.asarray(other.translation) + np.asarray(self.translation)
        return RigidTransform2D(self.rotation + other.rotation, (t[0], t[1]))

    def inverse(self) -> RigidTransform2D:
        t = -(self.matrix.T @ np.asarray(self.translation))
        return RigidTransform2D(-self.rotation, (t[0], t[1]))


@dataclass(frozen=True)
class VerificationScore:
    chamfer: float
    transform: RigidTransform2D
    iterations_used: int


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def rotate_scan(scan: Scan, angle: float) -> Scan:
    """Rotate a scan about the sensor origin.

    Ray slots are circularly shifted by round(angle / ray spacing) so that
    slot order still follows bearing.
    """
    p = scan.points.shape[0]
    shift = int(round(angle / (TWO_PI / p)))
    pts = np.roll(scan.points, shift, axis=0) @ rotation_matrix(angle).T
    return Scan(scan.frame_index, pts, np.roll(scan.hit_mask, shift))


def _as_points(x) -> np.ndarray:
    if isinstance(x, Scan):
        x = x.hits
    return np.ascontiguousarray(x, dtype=np.float64).reshape(-1, 2)


def chamfer_distance(a, b) -> float:
    """Symmetric mean of squared nearest-neighbour distances."""
    a, b = _as_points(a), _as_points(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer_distance needs two non-empty point sets")
    return float(kernels.chamfer(a, b))


def _collinear(pts: np.ndarray) -> bool:
    c = pts - pts.mean(axis=0)
    return bool(np.linalg.eigvalsh(c.T @ c / len(pts))[0] < 1e-9)


def icp_trace(src, dst, max_iters: int = 30, tol: float = 1e-9, init_rotation: float = 0.0):
    """Point-to-point ICP returning (transform, per-iteration pairing costs, fits).

    Pairing cost is the mean squared nearest-neighbour distance from the
    moved source to ``dst``. Iteration stops when it improves by less than
    ``tol`` or after ``max_iters`` fits. A collinear source reports
    ``fits = max_iters``.
    """
    src, dst = _as_points(src), _as_points(dst)
    if len(src) < 2 or len(dst) < 2:
        raise ValueError("icp needs at least 2 points per set")
    costs = np.empty(max_iters + 1)
    ang, tx, ty, n_costs, fits = kernels.icp(src, dst, init_rotation, max_iters, tol, costs)
    if _collinear(src):
        fits = max_iters
    return RigidTransform2D(ang, (tx, ty)), costs[:n_costs].copy(), int(fits)


def icp_align(src, dst, max_iters: int = 30, tol: float = 1e-9) -> RigidTransform2D:
    """Rigid transform taking ``src`` onto ``dst``, starting from identity."""
    return icp_trace(src, dst, max_iters, tol)[0]


def verify_pair(a, b, starts: int = 8, max_iters: int = 30, tol: float = 1e-9) -> VerificationScore:
    """Multi-start ICP of ``a`` onto ``b``; best exact Chamfer over the starts."""
    pa, pb = _as_points(a), _as_points(b)
    if len(pa) < 2 or len(pb) < 2:
        raise ValueError("verify_pair needs at least 2 hit points per scan")
    best = None
    for k in range(starts):
        t, _, fits = icp_trace(pa, pb, max_iters, tol, init_rotation=TWO_PI * k / starts)
        cd = chamfer_distance(t.apply(pa), pb)
        if best is None or cd < best.chamfer:
            best = VerificationScore(cd, t, fits)
    return best


def pairwise_sq_distances(query: np.ndarray, database: np.ndarray) -> np.ndarray:
    diff = query[..., None, :] - database
    return np.einsum("...k,...k->...", diff, diff)


def knn_search(query, database, k: int, exclude=()) -> list[int]:
    """Exact K nearest rows of ``database`` to ``query`` (Euclidean), skipping
    ``exclude``; ties go to the lower index."""
    if k <= 0:
        return []
    db = np.asarray(database, dtype=np.float64)
    d = pairwise_sq_distances(np.asarray(query, dtype=np.float64), db)
    order = np.argsort(d, kind="stable")
    if exclude:
        ex = np.zeros(len(db), dtype=bool)
        ex[list(exclude)] = True
        order = order[~ex[order]]
    return order[:k].tolist()
