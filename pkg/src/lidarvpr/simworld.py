"""Procedural 2D worlds, random-walk trajectories and simulated LiDAR scans.

World units are grid cells. Cell (ix, iy) covers [ix, ix+1) x [iy, iy+1) and
is stored at ``cells[iy, ix]``; True marks an obstacle.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import kernels

TWO_PI = 2.0 * math.pi
FORMAT_VERSION = 1


class WorldError(ValueError):
    """Invalid environment, trajectory or dataset."""


@dataclass(frozen=True)
class OccupancyGrid:
    cells: np.ndarray

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    def occupied(self, x: float, y: float) -> bool:
        ix, iy = int(math.floor(x)), int(math.floor(y))
        if ix < 0 or iy < 0 or ix >= self.width or iy >= self.height:
            return True
        return bool(self.cells[iy, ix])


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float


@dataclass
class Scan:
    frame_index: int
    points: np.ndarray
    hit_mask: np.ndarray

    @property
    def hits(self) -> np.ndarray:
        return self.points[self.hit_mask]


@dataclass
class Dataset:
    """Scan stream plus hidden poses.

    ``points`` is float32 [I, P, 2] in the sensor frame, ``mask`` bool [I, P]
    and ``poses`` float32 [I, 3] or None when the poses file was withheld.
    """

    points: np.ndarray
    mask: np.ndarray
    poses: np.ndarray | None
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def ray_count(self) -> int:
        return self.points.shape[1]

    def scan(self, i: int) -> Scan:
        return Scan(i, self.points[i].astype(np.float64), self.mask[i].copy())

    def scans(self) -> list[Scan]:
        return [self.scan(i) for i in range(len(self))]

    def without_poses(self) -> Dataset:
        return Dataset(self.points, self.mask, None, dict(self.manifest))


# --------------------------------------------------------------------------
# environments
# --------------------------------------------------------------------------


def _close_border(cells: np.ndarray) -> None:
    cells[0, :] = cells[-1, :] = True
    cells[:, 0] = cells[:, -1] = True


def _keep_largest_free_component(cells: np.ndarray) -> float:
    """Fill every free component but the largest; return its share of free space."""
    labels, count = ndimage.label(~cells)
    if count == 0:
        return 0.0
    sizes = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    cells[(labels != keep) & ~cells] = True
    return float(sizes[keep - 1] / sizes.sum())


def generate_environment(
    seed: int,
    width: int = 512,
    height: int = 512,
    obstacle_density: float = 0.15,
    *,
    min_block: int = 8,
    max_block: int = 48,
    attempts: int = 10,
    min_connected_share: float = 0.8,
) -> OccupancyGrid:
    """Closed world with random axis-aligned blocks covering ``obstacle_density``
    of the interior. Free space is made a single 4-connected component."""
    if width < 64 or height < 64:
        raise WorldError("grid must be at least 64x64")
    if not 0.0 <= obstacle_density <= 0.4:
        raise WorldError("obstacle_density must be in [0, 0.4]")
    interior = (width - 2) * (height - 2)
    for attempt in range(attempts):
        rng = np.random.default_rng([seed, attempt])
        cells = np.zeros((height, width), dtype=bool)
        _close_border(cells)
        filled = 0
        while filled < obstacle_density * interior:
            bw, bh = rng.integers(min_block, max_block + 1, size=2)
            x0 = int(rng.integers(1, max(2, width - 1 - bw)))
            y0 = int(rng.integers(1, max(2, height - 1 - bh)))
            cells[y0 : y0 + bh, x0 : x0 + bw] = True
            _close_border(cells)
            filled = int(cells[1:-1, 1:-1].sum())
        if _keep_largest_free_component(cells) >= min_connected_share:
            return OccupancyGrid(cells)
    raise WorldError(
        f"no connected world after {attempts} attempts (density={obstacle_density})"
    )


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        if buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif buf[pos : pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise WorldError("malformed PGM header")
    return buf[start:pos], pos


def load_environment(path) -> OccupancyGrid:
    """Read an 8-bit binary PGM (P5). Pixels below 128 are obstacles; the image's
    first row becomes grid row 0."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic != b"P5":
        raise WorldError(f"not a binary PGM (magic {magic!r})")
    try:
        w_tok, pos = _read_token(buf, pos)
        h_tok, pos = _read_token(buf, pos)
        m_tok, pos = _read_token(buf, pos)
        width, height, maxval = int(w_tok), int(h_tok), int(m_tok)
    except ValueError as exc:
        raise WorldError("malformed PGM header") from exc
    if width <= 0 or height <= 0 or not 0 < maxval < 256:
        raise WorldError("unsupported PGM dimensions or maxval")
    pos += 1  # single whitespace byte before the raster
    payload = np.frombuffer(buf, dtype=np.uint8, count=-1, offset=min(pos, len(buf)))
    if payload.size < width * height:
        raise WorldError(f"truncated PGM payload: {payload.size} < {width * height}")
    img = payload[: width * height].reshape(height, width)
    cells = img < 128
    _close_border(cells)
    if cells.all():
        raise WorldError("environment has no free space")
    return OccupancyGrid(cells)


def save_environment(grid: OccupancyGrid, path) -> None:
    img = np.where(grid.cells, 0, 255).astype(np.uint8)
    header = f"P5\n{grid.width} {grid.height}\n255\n".encode()
    Path(path).write_bytes(header + img.tobytes())


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------


def _segment_clear(clearance: np.ndarray, x0, y0, x1, y1, margin: float) -> bool:
    n = max(2, int(math.ceil(math.hypot(x1 - x0, y1 - y0) * 2)) + 1)
    xs = np.linspace(x0, x1, n)
    ys = np.linspace(y0, y1, n)
    ix = np.floor(xs).astype(int)
    iy = np.floor(ys).astype(int)
    h, w = clearance.shape
    if ix.min() < 0 or iy.min() < 0 or ix.max() >= w or iy.max() >= h:
        return False
    return bool((clearance[iy, ix] > margin).all())


def sample_trajectory(
    grid: OccupancyGrid,
    length: int,
    seed: int,
    step_mean: float = 9.6,
    rot_limit: float = math.radians(10.0),
    *,
    clearance: float = 3.0,
    resamples: int = 200,
) -> list[Pose]:
    """Random walk through free space.

    Each step turns by U(-rot_limit, rot_limit) and moves U(0.5, 1.5) *
    step_mean along the new heading. Blocked steps are redrawn; after 20
    failures the heading is drawn from the full circle so the walker can turn
    away from walls.
    """
    if length < 2:
        raise WorldError("trajectory needs at least 2 poses")
    rng = np.random.default_rng(seed)
    dist = ndimage.distance_transform_edt(~grid.cells)
    free = np.argwhere(dist > clearance + 1.0)
    if free.size == 0:
        raise WorldError("no free space with the requested clearance")
    iy, ix = free[rng.integers(len(free))]
    x, y = ix + 0.5, iy + 0.5
    theta = float(rng.uniform(0.0, TWO_PI))
    poses = [Pose(x, y, theta)]
    while len(poses) < length:
        for attempt in range(resamples):
            if attempt < 20:
                new_theta = theta + rng.uniform(-rot_limit, rot_limit)
            else:
                new_theta = rng.uniform(0.0, TWO_PI)
            step = step_mean * rng.uniform(0.5, 1.5)
            nx = x + step * math.cos(new_theta)
            ny = y + step * math.sin(new_theta)
            if _segment_clear(dist, x, y, nx, ny, clearance):
                break
        else:
            raise WorldError(f"walker boxed in at pose {len(poses)}")
        x, y, theta = nx, ny, float(new_theta % TWO_PI)
        poses.append(Pose(x, y, theta))
    return poses


# --------------------------------------------------------------------------
# LiDAR
# --------------------------------------------------------------------------


def simulate_scan(
    grid: OccupancyGrid, pose: Pose, ray_count: int = 128, max_range: float = 256.0, frame_index: int = 0
) -> Scan:
    """Cast ``ray_count`` rays at bearings theta + k * 2pi / ray_count.

    Points come back in the sensor frame; misses sit at ``max_range`` along
    their ray with ``hit_mask`` False.
    """
    if ray_count < 8:
        raise WorldError("ray_count must be >= 8")
    if grid.occupied(pose.x, pose.y):
        raise WorldError("pose is not in free space")
    rel = np.arange(ray_count) * (TWO_PI / ray_count)
    ranges, hit = kernels.raycast(grid.cells, pose.x, pose.y, pose.theta + rel, max_range)
    points = np.stack([ranges * np.cos(rel), ranges * np.sin(rel)], axis=1)
    return Scan(frame_index, points, hit)


def simulate_scans(grid, poses, ray_count=128, max_range=256.0, workers=1) -> list[Scan]:
    def one(i):
        return simulate_scan(grid, poses[i], ray_count, max_range, frame_index=i)

    out: list[Scan | None] = [None] * len(poses)
    if workers <= 1:
        for i in range(len(poses)):
            out[i] = one(i)
    else:
        with ThreadPoolExecutor(workers) as pool:
            for i, scan in zip(range(len(poses)), pool.map(one, range(len(poses)))):
                out[i] = scan
    return out  # type: ignore[return-value]


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


def mean_gt_size(poses: np.ndarray, radius: float) -> float:
    from scipy.spatial import cKDTree

    tree = cKDTree(poses[:, :2].astype(np.float64))
    counts = tree.query_ball_point(poses[:, :2].astype(np.float64), r=radius, return_length=True)
    return float(np.mean(counts) - 1.0)


def build_dataset(grid, poses, ray_count=128, max_range=256.0, manifest=None, workers=1) -> Dataset:
    scans = simulate_scans(grid, poses, ray_count, max_range, workers)
    points = np.stack([s.points for s in scans]).astype(np.float32)
    mask = np.stack([s.hit_mask for s in scans])
    pose_arr = np.array([[p.x, p.y, p.theta] for p in poses], dtype=np.float32)
    man = {
        "format_version": FORMAT_VERSION,
        "frames": len(poses),
        "ray_count": ray_count,
        "max_range": max_range,
    }
    man.update(manifest or {})
    return Dataset(points, mask, pose_arr, man)


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = dict(ds.manifest)
    man.update(
        format_version=FORMAT_VERSION,
        frames=len(ds),
        ray_count=ds.ray_count,
        files={
            "scans": "scans.f32",
            "mask": "mask.u8",
            "poses": "poses.f32 (evaluation only; never read by training)",
        },
    )
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    ds.points.astype("<f4").tofile(out / "scans.f32")
    ds.mask.astype(np.uint8).tofile(out / "mask.u8")
    if ds.poses is not None:
        ds.poses.astype("<f4").tofile(out / "poses.f32")
    return out


def load_dataset(data_dir, *, with_poses: bool = True) -> Dataset:
    """Load a dataset directory. ``with_poses=False`` never touches poses.f32."""
    d = Path(data_dir)
    try:
        man = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"{d} has no manifest.json") from exc
    n, p = int(man["frames"]), int(man["ray_count"])
    points = np.fromfile(d / "scans.f32", dtype="<f4")
    mask = np.fromfile(d / "mask.u8", dtype=np.uint8)
    if points.size != n * p * 2 or mask.size != n * p:
        raise WorldError(f"{d}: data files do not match manifest ({n} x {p})")
    poses = None
    if with_poses and (d / "poses.f32").exists():
        poses = np.fromfile(d / "poses.f32", dtype="<f4").reshape(n, 3)
    return Dataset(points.reshape(n, p, 2).astype(np.float32), mask.reshape(n, p).astype(bool), poses, man)
