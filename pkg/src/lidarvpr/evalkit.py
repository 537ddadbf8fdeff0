"""Retrieval evaluation against hidden poses: Recall@N and Heading Diversity."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

HD_EPS = 1e-9
HD_BIN_DEG = 45.0
HD_BINS = range(1, 7)  # bins 0 and 7 hold near-identical headings and are ignored
DEFAULT_TOPN = (1, 5, 10)


class PosesUnavailableError(FileNotFoundError):
    """Evaluation needs the poses file, which has been withheld."""


@dataclass
class GroundTruth:
    neighbors: list[np.ndarray]
    radius: float
    headings: np.ndarray

    def __len__(self) -> int:
        return len(self.neighbors)


def ground_truth_neighbors(poses: np.ndarray, radius: float) -> GroundTruth:
    """Frames within ``radius`` (inclusive) of each pose, excluding itself."""
    if poses is None:
        raise PosesUnavailableError("ground truth requires poses")
    xy = np.asarray(poses, dtype=np.float64)[:, :2]
    tree = cKDTree(xy)
    # inflate the ball slightly, then filter exactly so the boundary is inclusive
    lists = tree.query_ball_point(xy, r=radius * (1 + 1e-9) + 1e-12)
    neighbors = []
    for i, cand in enumerate(lists):
        cand = np.array(sorted(cand), dtype=np.int64)
        d2 = ((xy[cand] - xy[i]) ** 2).sum(axis=1)
        keep = (d2 <= radius * radius) & (cand != i)
        neighbors.append(cand[keep])
    return GroundTruth(neighbors, float(radius), np.asarray(poses, dtype=np.float64)[:, 2].copy())


def rank_retrievals(embeddings: np.ndarray, exclusion: int) -> np.ndarray:
    """Per query, all frames sorted by feature distance (ties by index), with
    self and frames within ``exclusion`` steps pushed out as -1 padding."""
    e = np.asarray(embeddings, dtype=np.float64)
    n = len(e)
    sq = np.einsum("ij,ij->i", e, e)
    d = sq[:, None] + sq[None, :] - 2.0 * (e @ e.T)
    idx = np.arange(n)
    banned = np.abs(idx[:, None] - idx[None, :]) <= exclusion
    d[banned] = np.inf
    order = np.argsort(d, axis=1, kind="stable")
    keep = n - banned.sum(axis=1)
    out = np.full((n, n), -1, dtype=np.int64)
    for i in range(n):
        out[i, : keep[i]] = order[i, : keep[i]]
    return out


def _eligible_gt(gt: GroundTruth, i: int, exclusion: int) -> np.ndarray:
    nb = gt.neighbors[i]
    return nb[np.abs(nb - i) > exclusion]


def recall_at_n(embeddings, gt: GroundTruth, n: int, exclusion: int = 10, ranking=None):
    """Fraction of eligible queries with a ground-truth neighbour in their top-n
    non-temporal retrievals.

    Returns (rate or None, per-frame flags). Flags are True/False for eligible
    queries and None otherwise; rate is None when no query is eligible.
    """
    if ranking is None:
        ranking = rank_retrievals(embeddings, exclusion)
    flags: list[bool | None] = []
    for i in range(len(gt)):
        target = _eligible_gt(gt, i, exclusion)
        if target.size == 0:
            flags.append(None)
            continue
        top = ranking[i, :n]
        flags.append(bool(np.isin(top[top >= 0], target).any()))
    scored = [f for f in flags if f is not None]
    rate = (sum(scored) / len(scored)) if scored else None
    return rate, flags


def heading_bin(delta: float) -> int:
    """Bin of a heading difference, wrapped to [0, 360) degrees."""
    deg = math.degrees(delta) % 360.0
    return min(int(deg // HD_BIN_DEG), 7)


def heading_coverage(query_heading: float, headings) -> set[int]:
    return {b for b in (heading_bin(query_heading - h) for h in headings) if b in HD_BINS}


def heading_diversity(i: int, retrieved, gt, headings, exclusion: int | None = None):
    """Heading Diversity of one query.

    ``retrieved`` are the top-|GT| retrievals and ``gt`` the ground-truth set
    (both already temporally filtered). Returns (hd, true_bins, gt_bins).
    """
    gt = np.asarray(gt, dtype=np.int64)
    retrieved = np.asarray(retrieved, dtype=np.int64)
    if exclusion is not None:
        gt = gt[np.abs(gt - i) > exclusion]
    tp = retrieved[np.isin(retrieved, gt)]
    num = heading_coverage(headings[i], headings[tp])
    den = heading_coverage(headings[i], headings[gt])
    if not den:
        return 0.0, 0, 0
    return len(num) / (HD_EPS + len(den)), len(num), len(den)


def heading_diversity_all(embeddings, gt: GroundTruth, exclusion: int = 10, ranking=None):
    """Per-frame HD (None for queries without non-temporal GT) and the mean."""
    if ranking is None:
        ranking = rank_retrievals(embeddings, exclusion)
    values: list[float | None] = []
    for i in range(len(gt)):
        target = _eligible_gt(gt, i, exclusion)
        if target.size == 0:
            values.append(None)
            continue
        top = ranking[i, : target.size]
        hd, _, _ = heading_diversity(i, top[top >= 0], target, gt.headings)
        values.append(hd)
    scored = [v for v in values if v is not None]
    return (float(np.mean(scored)) if scored else None), values


@dataclass
class MetricsReport:
    epoch: int
    recall_at: dict[int, float | None]
    hd_mean: float | None
    eligible: int
    excluded: int
    radius: float
    exclusion: int
    topn: tuple[int, ...]
    per_frame_recall: dict[int, list] = field(default_factory=dict)
    per_frame_hd: list = field(default_factory=list)
    embeddings_sha256: str = ""

    def row(self) -> dict:
        r = {"epoch": self.epoch}
        for n in self.topn:
            r[f"R@{n}"] = self.recall_at[n]
        r["HD"] = self.hd_mean
        r["eligible"] = self.eligible
        return r

    def to_json(self, per_frame: bool = True) -> dict:
        out = {
            "epoch": self.epoch,
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "hd_mean": self.hd_mean,
            "eligible_queries": self.eligible,
            "excluded_queries": self.excluded,
            "config": {"radius": self.radius, "exclusion_window": self.exclusion, "topn": list(self.topn)},
            "embeddings_sha256": self.embeddings_sha256,
        }
        if per_frame:
            out["per_frame"] = {
                "recall": {str(k): v for k, v in self.per_frame_recall.items()},
                "hd": self.per_frame_hd,
            }
        return out


def embeddings_digest(emb: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(emb, dtype="<f4").tobytes()).hexdigest()


def evaluate_embeddings(embeddings, gt: GroundTruth, exclusion: int = 10, topn=DEFAULT_TOPN, epoch: int = 0) -> MetricsReport:
    ranking = rank_retrievals(embeddings, exclusion)
    recall, flags = {}, {}
    for n in topn:
        recall[n], flags[n] = recall_at_n(embeddings, gt, n, exclusion, ranking)
    hd, hd_vals = heading_diversity_all(embeddings, gt, exclusion, ranking)
    eligible = sum(v is not None for v in hd_vals)
    return MetricsReport(
        epoch=epoch,
        recall_at=recall,
        hd_mean=hd,
        eligible=eligible,
        excluded=len(gt) - eligible,
        radius=gt.radius,
        exclusion=exclusion,
        topn=tuple(topn),
        per_frame_recall=flags,
        per_frame_hd=hd_vals,
        embeddings_sha256=embeddings_digest(embeddings),
    )


# --------------------------------------------------------------------------
# run evaluation and reports
# --------------------------------------------------------------------------

CSV_HEADER = ("epoch", "R@1", "R@5", "R@10", "HD", "eligible")

# value 0 -> red, 0.5 -> yellow, 1 -> green; linear in RGB between stops
COLOR_RAMP = ((0.0, (215, 48, 39)), (0.5, (254, 224, 84)), (1.0, (26, 152, 80)))
NA_COLOR = "#9e9e9e"


def ramp_color(value) -> str:
    """Hex colour of a value in [0, 1] on :data:`COLOR_RAMP` (grey for None)."""
    if value is None:
        return NA_COLOR
    v = min(max(float(value), 0.0), 1.0)
    for (a, ca), (b, cb) in zip(COLOR_RAMP, COLOR_RAMP[1:]):
        if v <= b:
            t = 0.0 if b == a else (v - a) / (b - a)
            rgb = [round(x + t * (y - x)) for x, y in zip(ca, cb)]
            return "#%02x%02x%02x" % tuple(rgb)
    return "#%02x%02x%02x" % COLOR_RAMP[-1][1]


def render_trajectory_svg(poses, values, out_path, title: str = "") -> Path:
    """Trajectory polyline with one colour-coded marker per frame."""
    poses = np.asarray(poses, dtype=np.float64)
    values = list(values)
    if len(values) != len(poses):
        raise ValueError(f"{len(values)} values for {len(poses)} poses")
    xy = poses[:, :2]
    lo = xy.min(axis=0) - 10.0
    span = np.maximum(xy.max(axis=0) + 10.0 - lo, 1.0)
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in xy)
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{lo[0]:.2f} {lo[1]:.2f} {span[0]:.2f} {span[1]:.2f}" '
        f'width="{max(200, int(span[0] * 2))}" height="{max(200, int(span[1] * 2))}">',
    ]
    if title:
        lines.append(f"<title>{title}</title>")
    lines.append(f'<polyline points="{pts}" fill="none" stroke="#424242" stroke-width="0.6"/>')
    lines.append('<g class="frames">')
    for i, ((x, y), v) in enumerate(zip(xy, values)):
        lines.append(f'<circle class="frame" data-frame="{i}" cx="{x:.2f}" cy="{y:.2f}" r="1.6" fill="{ramp_color(v)}"/>')
    lines.append("</g>")
    lines.append("</svg>")
    out = Path(out_path)
    out.write_text("\n".join(lines) + "\n")
    return out


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def write_metrics_csv(reports: list[MetricsReport], path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in reports:
            w.writerow([r.epoch, _fmt(r.recall_at.get(1)), _fmt(r.recall_at.get(5)), _fmt(r.recall_at.get(10)), _fmt(r.hd_mean), r.eligible])
    return Path(path)


def best_epoch(reports: list[MetricsReport], n: int = 10) -> MetricsReport | None:
    """Report with the highest R@n (earliest epoch on ties)."""
    scored = [r for r in reports if r.recall_at.get(n) is not None]
    if not scored:
        return None
    return max(scored, key=lambda r: (r.recall_at[n], -r.epoch))


def checkpoint_epochs(run_dir) -> list[int]:
    out = []
    for p in Path(run_dir).glob("params_e*.json"):
        tag = p.stem[len("params_e"):]
        if tag.isdigit():
            out.append(int(tag))
    return sorted(out)


@dataclass
class RunEvaluation:
    reports: list[MetricsReport]
    best: MetricsReport | None
    at_epoch30: MetricsReport | None

    def summary(self) -> dict:
        return {
            "best": self.best.row() if self.best else None,
            "epoch30": self.at_epoch30.row() if self.at_epoch30 else None,
        }


def evaluate_run(run_dir, data_dir, radius: float, exclusion: int = 10, topn=DEFAULT_TOPN, out_dir=None, workers: int = 1) -> RunEvaluation:
    """Score every checkpoint of a run against the dataset's hidden poses.

    Writes metrics.json, metrics.csv, traj_recall.svg and traj_hd.svg (the
    trajectory plots use the last epoch) into ``out_dir`` (default: the run
    directory). Refuses with :class:`PosesUnavailableError` when the poses
    file is missing.
    """
    from . import encoder as enc
    from .simworld import load_dataset

    data_dir, run_dir = Path(data_dir), Path(run_dir)
    if not (data_dir / "poses.f32").exists():
        raise PosesUnavailableError(
            f"{data_dir / 'poses.f32'} is missing: evaluation needs the hidden poses, training does not"
        )
    ds = load_dataset(data_dir, with_poses=True)
    epochs = checkpoint_epochs(run_dir)
    if not epochs:
        raise FileNotFoundError(f"{run_dir} holds no params_e*.json checkpoints")
    topn = tuple(sorted(set(int(n) for n in topn)))
    gt = ground_truth_neighbors(ds.poses, radius)
    reports = []
    for e in epochs:
        params = enc.load_checkpoint(run_dir, stem=f"params_e{e}")
        emb = enc.embed_all(params, ds.points, ds.mask, workers=workers)
        reports.append(evaluate_embeddings(emb, gt, exclusion, topn, epoch=e))
    key = 10 if 10 in topn else max(topn)
    ev = RunEvaluation(reports, best_epoch(reports, key), next((r for r in reports if r.epoch == 30), None))
    out = Path(out_dir) if out_dir is not None else run_dir
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "radius": float(radius),
        "exclusion_window": int(exclusion),
        "topn": list(topn),
        "mean_gt_size": float(np.mean([len(x) for x in gt.neighbors])),
        "epochs": [r.to_json(per_frame=True) for r in reports],
        **ev.summary(),
    }
    (out / "metrics.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    write_metrics_csv(reports, out / "metrics.csv")
    last = reports[-1]
    recall_vals = [None if f is None else float(f) for f in last.per_frame_recall[key]]
    render_trajectory_svg(ds.poses, recall_vals, out / "traj_recall.svg", f"recall@{key}, epoch {last.epoch}")
    render_trajectory_svg(ds.poses, last.per_frame_hd, out / "traj_hd.svg", f"heading diversity, epoch {last.epoch}")
    return ev
