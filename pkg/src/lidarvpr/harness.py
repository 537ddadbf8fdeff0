"""Run-directory plumbing behind the command-line subcommands.

Every function here writes deterministic files only: no timestamps, no
absolute paths, no timings. Wall-clock progress goes to the ``progress``
callback (stdout in the CLI) instead.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
from pathlib import Path

import numpy as np

from . import __version__
from . import encoder as enc
from . import evalkit as ev
from . import labelmine as lm
from . import simworld as sw
from ._accel import backend
from .config import RunConfig

RUN_FORMAT = 1

ABLATION_HEADER = ("seed", "mode", "epoch", "R@1", "R@5", "R@10", "HD", "eligible")
REPORT_HEADER = ("run", "mode", "row", "epoch", "R@1", "R@5", "R@10", "HD")

# full-scale published figures, shown next to desk results for orientation only
REFERENCE_ROWS = (
    ("sptm", None, 93.36, 4.25),
    ("tfvpr", None, 99.71, 93.62),
    ("pointnetvlad_supervised", None, 100.00, None),
)

MODE_COLORS = {
    "sptm": "#1f77b4",
    "sptm_a": "#ff7f0e",
    "sptm_f_k": "#8c564b",
    "sptm_a_f_k": "#2ca02c",
    "sptm_a_f_d": "#9467bd",
    "tfvpr": "#d62728",
    "supervised": "#7f7f7f",
}


def _noop(_msg: str) -> None:
    pass


def _versions() -> dict:
    import numba
    import scipy

    return {
        "lidarvpr": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "kernels": backend(),
    }


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------


def simulate(cfg: RunConfig, out_dir, progress=_noop) -> sw.Dataset:
    """Generate (or load) the world, walk it, scan it and save the dataset."""
    if cfg.env == "procedural":
        grid = sw.generate_environment(cfg.data_seed, cfg.width, cfg.height, cfg.obstacle_density,
                                       min_block=cfg.min_block, max_block=cfg.max_block)
    else:
        grid = sw.load_environment(cfg.env)
    poses = sw.sample_trajectory(grid, cfg.poses, cfg.data_seed, cfg.step_mean, math.radians(cfg.rot_limit_deg))
    pose_arr = np.array([[p.x, p.y, p.theta] for p in poses], dtype=np.float32)
    manifest = {
        "generator": {k: getattr(cfg, k) for k in
                      ("env", "width", "height", "obstacle_density", "min_block", "max_block",
                       "step_mean", "rot_limit_deg", "data_seed")},
        "data_seed": cfg.data_seed,
        "max_range": cfg.max_range,
        "dataset_hash": cfg.dataset_hash(),
        "gt_radius": cfg.radius,
        "mean_gt_size": round(float(np.mean([len(g) for g in ev.ground_truth_neighbors(pose_arr, cfg.radius).neighbors])), 4),
        "grid_shape": [grid.height, grid.width],
    }
    ds = sw.build_dataset(grid, poses, cfg.rays, cfg.max_range, manifest, cfg.workers)
    out = sw.save_dataset(ds, out_dir)
    sw.save_environment(grid, out / "world.pgm")
    progress(
        f"simulate frames={len(ds)} rays={ds.ray_count} hits_per_scan={ds.mask.sum(1).mean():.1f} "
        f"radius={cfg.radius} mean_gt_size={manifest['mean_gt_size']:.2f} out={out}"
    )
    return ds


def load_scans(data_dir) -> sw.Dataset:
    """Scans and masks only: the poses file is never opened."""
    try:
        return sw.load_dataset(data_dir, with_poses=False)
    except sw.WorldError as exc:
        raise OSError(str(exc)) from exc


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def _label_snapshot(rec: lm.EpochRecord, mode: str, cfg_hash: str) -> dict:
    return {
        "format_version": RUN_FORMAT,
        "epoch": rec.epoch,
        "mode": mode,
        "config_hash": cfg_hash,
        "positives": rec.positives,
        "negatives": rec.negatives,
        "negatives_encoding": "per frame list of [start, stop) index ranges",
        "tau": rec.tau,
        "gamma": rec.gamma,
        "added": [[i, j] for i, j, _, _ in rec.added],
        "added_distance": [d for _, _, d, _ in rec.added],
    }


def train(cfg: RunConfig, data_dir, out_dir, progress=_noop):
    """Train one mode on a dataset directory and persist every epoch.

    Only the ``supervised`` mode opens the poses file.
    """
    spec = lm.MODES[cfg.mode]
    ds = load_scans(data_dir)
    poses = None
    if spec.supervised:
        pose_file = Path(data_dir) / "poses.f32"
        if not pose_file.exists():
            raise lm.PoseAccessError(f"mode 'supervised' needs {pose_file}, which is absent")
        poses = sw.load_dataset(data_dir, with_poses=True).poses
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    cfg_hash = cfg.hash()
    run_doc = {
        "format_version": RUN_FORMAT,
        "mode": cfg.mode,
        "config_hash": cfg_hash,
        "seed": cfg.seed,
        "dataset": {
            "manifest_sha256": _sha256(Path(data_dir) / "manifest.json"),
            "scans_sha256": _sha256(Path(data_dir) / "scans.f32"),
            "frames": len(ds),
        },
        "versions": _versions(),
        "epochs_requested": cfg.epochs,
    }
    _write_json(out / "run.json", run_doc)
    loss_rows = []

    def on_epoch(rec: lm.EpochRecord, params, state):
        enc.save_checkpoint(params, out, stem=f"params_e{rec.epoch}")
        if spec.expansion is not None or rec.epoch == 1:
            _write_json(out / f"labels_e{rec.epoch}.json", _label_snapshot(rec, cfg.mode, cfg_hash))
        total = int(state.positives.sum())
        loss_rows.append((rec.epoch, f"{rec.mean_loss:.8f}", total, len(rec.added), int(rec.labels_changed)))
        progress(
            f"epoch={rec.epoch} loss={rec.mean_loss:.6f} positives={total} added={len(rec.added)} "
            f"seconds={rec.seconds:.2f}"
        )

    params, state, records = lm.run(ds.points, ds.mask, cfg.mining(), cfg.train(), cfg.mode, poses, on_epoch)
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "mean_loss", "positives", "added", "labels_changed"))
        w.writerows(loss_rows)
    run_doc["epochs_completed"] = len(records)
    _write_json(out / "run.json", run_doc)
    return params, state, records


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


def evaluate(run_dir, data_dir, radius, exclusion=10, topn=(1, 5, 10), workers=1, progress=_noop, out_dir=None):
    res = ev.evaluate_run(run_dir, data_dir, radius, exclusion, topn, out_dir=out_dir, workers=workers)
    for r in res.reports:
        progress(" ".join(f"{k}={'' if v is None else (f'{v:.4f}' if isinstance(v, float) else v)}"
                          for k, v in r.row().items()))
    if res.best is not None:
        progress(f"best epoch={res.best.epoch} R@10={res.best.recall_at.get(10)}")
    return res


# --------------------------------------------------------------------------
# ablate
# --------------------------------------------------------------------------


def _polyline(xs, ys, x0, y0, w, h, xmax, color):
    pts = []
    for x, y in zip(xs, ys):
        if y is None:
            continue
        px = x0 + w * (x - 1) / max(1, xmax - 1)
        py = y0 + h * (1.0 - y)
        pts.append(f"{px:.2f},{py:.2f}")
    return f'<polyline points="{" ".join(pts)}" fill="none" stroke="{color}" stroke-width="2"/>'


def render_curves_svg(curves: dict, epochs: int, out_path) -> Path:
    """Two panels, R@10 and HD against epoch, one line per mode (seed mean)."""
    w, h, pad = 360, 240, 50
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * (w + 2 * pad)}" height="{h + 3 * pad}">',
    ]
    for panel, (metric, label) in enumerate((("R@10", "Recall@10"), ("HD", "Heading diversity"))):
        x0 = pad + panel * (w + 2 * pad)
        y0 = pad
        parts.append(f'<g class="panel" data-metric="{metric}">')
        parts.append(f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#000"/>')
        parts.append(f'<text x="{x0 + w / 2}" y="{y0 - 15}" text-anchor="middle">{label}</text>')
        parts.append(f'<text x="{x0 + w / 2}" y="{y0 + h + 35}" text-anchor="middle">epoch</text>')
        for t in (0.0, 0.5, 1.0):
            parts.append(f'<text x="{x0 - 8}" y="{y0 + h * (1 - t) + 4:.1f}" text-anchor="end">{t:.1f}</text>')
        for mode, series in curves.items():
            ys = series[metric]
            parts.append(_polyline(range(1, len(ys) + 1), ys, x0, y0, w, h, epochs, MODE_COLORS.get(mode, "#000")))
        parts.append("</g>")
    lx = pad
    for k, mode in enumerate(curves):
        y = h + 2 * pad + 18 * (k // 4)
        x = lx + 170 * (k % 4)
        parts.append(f'<rect x="{x}" y="{y - 9}" width="12" height="12" fill="{MODE_COLORS.get(mode, "#000")}"/>')
        parts.append(f'<text x="{x + 16}" y="{y + 2}">{mode}</text>')
    parts.append("</svg>")
    out = Path(out_path)
    out.write_text("\n".join(parts) + "\n")
    return out


def ablate(cfg: RunConfig, modes, seeds, out_dir, progress=_noop, data_dirs=None) -> Path:
    """Train and evaluate every mode on every seed's dataset.

    Seed s simulates its own dataset (data_seed = s) unless ``data_dirs``
    maps seeds to existing dataset directories. Writes ablation.csv and
    ablation.svg into ``out_dir`` and returns the CSV path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    curves: dict = {}
    for seed in seeds:
        scfg = cfg.replace(seed=seed, data_seed=seed)
        if data_dirs and seed in data_dirs:
            data = Path(data_dirs[seed])
        else:
            data = out / f"data_s{seed}"
            if not (data / "manifest.json").exists():
                simulate(scfg, data, progress)
        for mode in modes:
            mcfg = scfg.replace(mode=mode)
            run_dir = out / f"run_s{seed}_{mode}"
            progress(f"ablate seed={seed} mode={mode}")
            train(mcfg, data, run_dir, progress)
            res = ev.evaluate_run(run_dir, data, mcfg.radius, mcfg.exclude_window, mcfg.topn, workers=mcfg.workers)
            for r in res.reports:
                rows.append((seed, mode, r.epoch, r.recall_at.get(1), r.recall_at.get(5), r.recall_at.get(10), r.hd_mean, r.eligible))
                c = curves.setdefault(mode, {"R@10": {}, "HD": {}})
                c["R@10"].setdefault(r.epoch, []).append(r.recall_at.get(10))
                c["HD"].setdefault(r.epoch, []).append(r.hd_mean)
    write_ablation_csv(rows, out / "ablation.csv")
    mean = {
        mode: {m: [_mean(c[m][e]) for e in sorted(c[m])] for m in ("R@10", "HD")}
        for mode, c in curves.items()
    }
    render_curves_svg(mean, cfg.epochs, out / "ablation.svg")
    return out / "ablation.csv"


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def _cell(v):
    return "" if v is None else f"{v:.6f}"


def write_ablation_csv(rows, path) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for seed, mode, epoch, r1, r5, r10, hd, elig in rows:
            w.writerow((seed, mode, epoch, _cell(r1), _cell(r5), _cell(r10), _cell(hd), elig))
    return Path(path)


def read_ablation_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            rec = {"seed": int(row["seed"]), "mode": row["mode"], "epoch": int(row["epoch"])}
            for k in ("R@1", "R@5", "R@10", "HD"):
                rec[k] = float(row[k]) if row[k] != "" else None
            rec["eligible"] = int(row["eligible"])
            out.append(rec)
        return out


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


def _pct(v):
    return "" if v is None else f"{100.0 * v:.2f}"


def report(run_dirs, out_csv=None, progress=_noop) -> list[tuple]:
    """Best-epoch and epoch-30 rows per run (percentages), plus reference rows."""
    rows = []
    for rd in run_dirs:
        rd = Path(rd)
        name = rd.name
        try:
            mode = json.loads((rd / "run.json").read_text())["mode"]
        except (OSError, ValueError, KeyError):
            mode = ""
        try:
            doc = json.loads((rd / "metrics.json").read_text())
        except (OSError, ValueError):
            rows.append((name, mode, "absent", "", "", "", "", ""))
            continue
        for tag in ("best", "epoch30"):
            r = doc.get(tag)
            if r is None:
                rows.append((name, mode, f"{tag}:absent", "", "", "", "", ""))
            else:
                rows.append((name, mode, tag, r["epoch"], _pct(r.get("R@1")), _pct(r.get("R@5")), _pct(r.get("R@10")), _pct(r.get("HD"))))
    for mode, _, r10, hd in REFERENCE_ROWS:
        rows.append(("published_full_scale", mode, "reference", "", "", "", f"{r10:.2f}", "" if hd is None else f"{hd:.2f}"))
    widths = [max(len(str(x)) for x in col) for col in zip(REPORT_HEADER, *rows)]
    for line in [REPORT_HEADER, *rows]:
        progress("  ".join(str(x).ljust(wd) for x, wd in zip(line, widths)).rstrip())
    progress("reference rows are full-scale published figures, shown for context and never asserted")
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            w.writerows(rows)
    return rows
