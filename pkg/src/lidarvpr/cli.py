"""Command-line entry point: simulate, train, eval, ablate, report.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import config as cfgmod
from . import harness
from . import labelmine as lm
from .encoder import NonFiniteLossError
from .simworld import WorldError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

ALL_ABLATION_MODES = "sptm,sptm_a,sptm_f_k,sptm_a_f_k,sptm_a_f_d,tfvpr"


def _say(msg: str) -> None:
    print(msg, flush=True)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat YAML config file (applied on top of the profile)")
    p.add_argument("--profile", default="desk", choices=sorted(cfgmod.PROFILES))
    p.add_argument("--seed", type=int, help="seed for data generation and training")
    p.add_argument("--workers", type=int, help="worker threads (results do not depend on it)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lidarvpr", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a dataset directory")
    _common(p)
    p.add_argument("--out", required=True, help="dataset directory to write")
    p.add_argument("--env", help="'procedural' or a binary PGM path")
    p.add_argument("--poses", type=int)
    p.add_argument("--rays", type=int)
    p.add_argument("--max-range", type=float, dest="max_range")
    p.add_argument("--step", type=float, dest="step_mean", help="mean walk step in cells")
    p.add_argument("--density", type=float, dest="obstacle_density")
    p.add_argument("--radius", type=float, help="ground-truth radius echoed in the manifest")

    p = sub.add_parser("train", help="train one mode on a dataset")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory to write")
    p.add_argument("--mode", choices=sorted(lm.MODES))
    p.add_argument("--epochs", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--u", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--patience", type=int)

    p = sub.add_parser("eval", help="score every checkpoint of a run")
    _common(p)
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--radius", type=float)
    p.add_argument("--exclude-window", type=int, dest="exclude_window")
    p.add_argument("--topn", help="comma list, e.g. 1,5,10")
    p.add_argument("--out", help="directory for metrics files (default: the run directory)")

    p = sub.add_parser("ablate", help="train and evaluate several modes over several seeds")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--modes", default=ALL_ABLATION_MODES)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int)
    p.add_argument("--data", help="use this dataset for every seed instead of simulating one per seed")

    p = sub.add_parser("report", help="best-epoch and epoch-30 table over evaluated runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", help="CSV path")
    return ap


def _int_list(text: str, what: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise cfgmod.ConfigError(f"--{what} expects comma-separated integers, got {text!r}") from exc


def effective_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.from_profile(args.profile)
    if args.config:
        cfg = cfgmod.load(args.config, cfg)
    changes = {}
    for item in args.set:
        if "=" not in item:
            raise cfgmod.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        changes[k.strip()] = v.strip()
    for key in ("env", "poses", "rays", "max_range", "step_mean", "obstacle_density", "radius", "mode",
                "epochs", "n", "u", "K", "dim", "lr", "margin", "patience", "exclude_window", "topn", "workers"):
        val = getattr(args, key, None)
        if val is not None:
            changes[key] = val
    if args.seed is not None:
        changes.update(seed=args.seed, data_seed=args.seed)
    return cfg.replace(**changes)


def _run(args) -> int:
    if args.command == "report":
        harness.report(args.runs, args.out, _say)
        return EXIT_OK
    cfg = effective_config(args)
    if args.command == "simulate":
        harness.simulate(cfg, args.out, _say)
        cfg.dump(f"{args.out}/config.yaml")
    elif args.command == "train":
        harness.train(cfg, args.data, args.out, _say)
    elif args.command == "eval":
        harness.evaluate(args.run, args.data, cfg.radius, cfg.exclude_window, cfg.topn, cfg.workers, _say, args.out)
    elif args.command == "ablate":
        modes = [m for m in args.modes.split(",") if m]
        bad = [m for m in modes if m not in lm.MODES]
        if bad:
            raise cfgmod.ConfigError(f"unknown modes: {', '.join(bad)}")
        seeds = _int_list(args.seeds, "seeds")
        data_dirs = {s: args.data for s in seeds} if args.data else None
        path = harness.ablate(cfg, modes, seeds, args.out, _say, data_dirs)
        _say(f"ablation table: {path}")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except NonFiniteLossError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (cfgmod.ConfigError, lm.PoseAccessError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except WorldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
