"""Experiment configuration: schema, validation, serialization, hashing.

A config fully determines a run.  Reports echo the whole config plus its
hash so every results table is reproducible from its own header.
"""

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import yaml

from .client import LdpConfig
from .data import TABLE_SPLITS
from .errors import ConfigError
from .optim import check_optimizer

VARIANTS = ("full", "wo", "all")

# Hyperparameter grids used by the reproduction experiments.
GRID_LR = (0.01, 0.1)
GRID_L2 = (0.01, 0.1)
GRID_K = (5, 10, 20, 40, 80)
GRID_BATCH = (32, 64, 128, 256, 339)

BATCH_MEANINGS = ("clients", "triples")


@dataclass(frozen=True)
class RoundSchedule:
    """How many rounds to run and when to stop early."""

    total_rounds: int = 100
    clients_per_round: int | None = None  # None = every client participates
    patience: int = 10                    # 0 disables early stopping

    def __post_init__(self):
        if self.total_rounds < 1:
            raise ConfigError(f"total_rounds must be >= 1, got {self.total_rounds}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        if self.clients_per_round is not None and self.clients_per_round < 1:
            raise ConfigError("clients_per_round must be >= 1 when set")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; see README for the file schema."""

    data_path: str = ""
    split: str = "RT1"
    dim: int = 200
    lr: float = 0.01
    l2: float = 0.01
    k: int = 5
    batch: int = 128
    heads: int = 3
    variant: str = "full"
    optimizer: str = "adam"
    init_std: float = 0.01
    leaky_slope: float = 0.2
    separate_item_params: bool = False
    batch_means: str = "clients"
    neighbor_refresh_every: int = 1
    checkpoint_every: int = 0             # 0 disables periodic checkpoints
    missing_mark: float = -1.0
    stratified_split: bool = False
    strict_grid: bool = False
    seed: int = 0
    ldp: LdpConfig = field(default_factory=LdpConfig)
    schedule: RoundSchedule = field(default_factory=RoundSchedule)

    def __post_init__(self):
        if self.split not in TABLE_SPLITS:
            raise ConfigError(
                f"unknown split {self.split!r}; expected one of {sorted(TABLE_SPLITS)}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected {VARIANTS}")
        check_optimizer(self.optimizer)
        if self.batch_means not in BATCH_MEANINGS:
            raise ConfigError(f"batch_means must be one of {BATCH_MEANINGS}")
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if self.lr <= 0 or self.l2 < 0:
            raise ConfigError("lr must be > 0 and l2 >= 0")
        if self.k < 0:
            raise ConfigError(f"k must be >= 0, got {self.k}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.heads < 1:
            raise ConfigError(f"heads must be >= 1, got {self.heads}")
        if self.neighbor_refresh_every < 1:
            raise ConfigError("neighbor_refresh_every must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError("leaky_slope must be in (0, 1)")
        if self.init_std <= 0:
            raise ConfigError("init_std must be > 0")
        if self.strict_grid:
            self._check_grid()

    def _check_grid(self) -> None:
        checks = (
            ("dim", self.dim, (200,)),
            ("lr", self.lr, GRID_LR),
            ("l2", self.l2, GRID_L2),
            ("k", self.k, GRID_K),
            ("batch", self.batch, GRID_BATCH),
        )
        for name, value, grid in checks:
            if value not in grid:
                raise ConfigError(
                    f"strict grid: {name}={value!r} not in {grid}")

    def replace(self, **kwargs) -> "ExperimentConfig":
        return dataclasses.replace(self, **kwargs)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        # inf is not valid YAML/JSON across tools; keep it symbolic.
        if math.isinf(out["ldp"]["delta"]):
            out["ldp"]["delta"] = "inf"
        return out

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("ascii")).hexdigest()[:16]


def config_from_dict(raw: dict) -> ExperimentConfig:
    data = dict(raw)
    ldp_raw = dict(data.pop("ldp", {}))
    if ldp_raw.get("delta") == "inf":
        ldp_raw["delta"] = math.inf
    sched_raw = dict(data.pop("schedule", {}))
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    try:
        return ExperimentConfig(
            ldp=LdpConfig(**ldp_raw), schedule=RoundSchedule(**sched_raw), **data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path!s} must contain a mapping")
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
