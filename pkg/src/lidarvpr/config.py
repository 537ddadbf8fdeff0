"""Run configuration: one flat, typed, versioned key-value document.

Every knob of a run lives in :class:`RunConfig`. Files are flat YAML
mappings; command-line flags override file values, and the merged result is
written back into each output directory so a run can be reproduced from its
own folder.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import yaml

from . import labelmine as lm

CONFIG_VERSION = 1

# keys that never change results and so stay out of the run hash
_UNHASHED = {"workers", "format_version"}


class ConfigError(ValueError):
    """Bad configuration value, key or file."""


@dataclass
class RunConfig:
    format_version: int = CONFIG_VERSION
    # dataset
    env: str = "procedural"  # "procedural" or a path to a binary PGM
    width: int = 512
    height: int = 512
    obstacle_density: float = 0.15
    min_block: int = 8
    max_block: int = 48
    poses: int = 1024
    step_mean: float = 2.4
    rot_limit_deg: float = 10.0
    rays: int = 128
    max_range: float = 256.0
    data_seed: int = 0
    # training
    mode: str = "tfvpr"
    epochs: int = 30
    n: int = 5
    u: int = 2
    K: int = 5
    margin: float = 0.2
    lr: float = 0.001
    dim: int = 64
    hidden1: int = 64
    hidden2: int = 128
    input_scale: float = 1.0 / 32.0
    positives_per_tuple: int = 2
    negatives_per_tuple: int = 18
    augment_query: bool = False
    seed: int = 0
    patience: int = 0
    verification_starts: int = 8
    icp_max_iters: int = 30
    icp_tol: float = 1e-9
    mutual_verification: bool = True
    # evaluation
    radius: float = 20.0
    exclude_window: int = 10
    topn: tuple[int, ...] = (1, 5, 10)
    # execution
    workers: int = 1

    def __post_init__(self):
        self.topn = tuple(int(x) for x in self.topn)
        self.validate()

    def validate(self) -> None:
        if self.format_version != CONFIG_VERSION:
            raise ConfigError(f"config format_version {self.format_version} is not {CONFIG_VERSION}")
        if self.mode not in lm.MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {sorted(lm.MODES)}")
        checks = [
            (self.poses >= 2, "poses must be >= 2"),
            (self.rays >= 8, "rays must be >= 8"),
            (self.max_range > 0, "max_range must be positive"),
            (self.step_mean > 0, "step_mean must be positive"),
            (0.0 <= self.obstacle_density <= 0.4, "obstacle_density must be in [0, 0.4]"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.n >= 1 and self.u >= 1 and self.K >= 0, "need n >= 1, u >= 1, K >= 0"),
            (self.dim >= 1 and self.hidden1 >= 1 and self.hidden2 >= 1, "layer sizes must be >= 1"),
            (self.lr >= 0 and self.margin >= 0, "lr and margin must be >= 0"),
            (self.positives_per_tuple >= 1 and self.negatives_per_tuple >= 1, "tuple sizes must be >= 1"),
            (self.radius > 0, "radius must be positive"),
            (self.exclude_window >= 0, "exclude_window must be >= 0"),
            (len(self.topn) > 0 and min(self.topn) >= 1, "topn must list integers >= 1"),
            (self.workers >= 1, "workers must be >= 1"),
            (self.verification_starts >= 1, "verification_starts must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    # -- conversions -------------------------------------------------------

    def mining(self) -> lm.MiningConfig:
        return lm.MiningConfig(
            n=self.n,
            u=self.u,
            K=self.K,
            verification_starts=self.verification_starts,
            icp_max_iters=self.icp_max_iters,
            icp_tol=self.icp_tol,
            mutual=self.mutual_verification,
            gt_radius=self.radius,
        )

    def train(self) -> lm.TrainConfig:
        return lm.TrainConfig(
            epochs=self.epochs,
            lr=self.lr,
            margin=self.margin,
            dim=self.dim,
            hidden=(self.hidden1, self.hidden2),
            input_scale=self.input_scale,
            positives_per_tuple=self.positives_per_tuple,
            negatives_per_tuple=self.negatives_per_tuple,
            augment_query=self.augment_query,
            seed=self.seed,
            patience=self.patience,
            workers=self.workers,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["topn"] = list(self.topn)
        return d

    def canonical(self, keys=None) -> str:
        d = self.to_dict()
        if keys is not None:
            d = {k: d[k] for k in keys}
        d = {k: v for k, v in d.items() if k not in _UNHASHED}
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def hash(self, keys=None) -> str:
        return hashlib.sha256(self.canonical(keys).encode()).hexdigest()[:16]

    def dataset_hash(self) -> str:
        return self.hash(DATASET_KEYS)

    def replace(self, **changes) -> RunConfig:
        return coerce(self, changes)

    def dump(self, path) -> None:
        """Write the config as flat YAML. ``workers`` is left out so output
        directories are byte-identical whatever the worker count."""
        d = {k: v for k, v in self.to_dict().items() if k != "workers"}
        Path(path).write_text(yaml.safe_dump(d, sort_keys=True, default_flow_style=None))


DATASET_KEYS = (
    "env", "width", "height", "obstacle_density", "min_block", "max_block",
    "poses", "step_mean", "rot_limit_deg", "rays", "max_range", "data_seed",
)

PROFILES = {
    "desk": {},
    # full-size setting; slower by roughly an order of magnitude
    "paper": {"width": 1024, "height": 1024, "poses": 2048, "rays": 256, "max_range": 512.0,
              "step_mean": 4.8, "dim": 512, "radius": 40.0},
}

_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, value):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            if isinstance(value, (bool, int)) and value in (0, 1):
                return bool(value)
            raise ValueError(value)
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if kind == "float":
            if isinstance(value, bool):
                raise ValueError(value)
            out = float(value)
            if not math.isfinite(out):
                raise ValueError(value)
            return out
        if kind == "str":
            return str(value)
        if key == "topn":
            if isinstance(value, str):
                value = [v for v in value.replace(" ", "").split(",") if v]
            return tuple(sorted({int(v) for v in value}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    raise ConfigError(f"unsupported config key type for {key}")


def coerce(base: RunConfig, changes: dict) -> RunConfig:
    """Apply ``changes`` (strings or native values) on top of ``base``."""
    unknown = sorted(set(changes) - set(_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    typed = {k: _convert(k, v) for k, v in changes.items() if v is not None}
    try:
        return dataclasses.replace(base, **typed)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def from_profile(name: str = "desk") -> RunConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return coerce(RunConfig(), PROFILES[name])


def load(path, base: RunConfig | None = None) -> RunConfig:
    """Read a flat YAML mapping on top of ``base`` (default: desk profile)."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a flat key-value mapping")
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"{path}: nested sections are not supported ({', '.join(map(str, nested))})")
    return coerce(base or from_profile("desk"), raw)
