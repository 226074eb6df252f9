"""Scenario configuration, YAML scenario files and the experiment presets.

Scenario files are YAML mappings whose keys are the ``ScenarioConfig`` field
names; ``attack`` is a nested mapping with the ``AttackProfile`` fields.
Unknown keys are an error.  Command-line overrides are applied after the
file, so flags win.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .fl import TrainConfig
from .incentive import DBSCAN, IncentiveConfig
from .ledger import MiningParams
from .pqc import PARAM_SETS


class ConfigError(ValueError):
    pass


@dataclass
class AttackProfile:
    mode: str = "none"          # none | rotating | fixed
    count: int = 0
    ids: list[int] = field(default_factory=list)
    scale: float = 10.0
    fraction: float = 0.1       # share of coordinates scaled per upload

    @property
    def active(self) -> bool:
        return self.mode != "none"


@dataclass
class ScenarioConfig:
    n: int = 100
    m: int = 2
    eta: float = 0.01
    epochs: int = 5
    batch: int = 10
    cap_n: int = 75             # N: local data threshold
    phi: int = 5                # aggregation threshold
    base: float = 100.0
    seed: int = 0
    data_seed: int | None = None  # dataset and partition seed; defaults to seed
    arrival_rate: float = 5.0     # mean of Poisson arrivals per client per tick
    p_drop: float = 0.05
    p_reconnect: float = 0.5
    attack: AttackProfile = field(default_factory=AttackProfile)
    difficulty: int = 2**20     # expected hashes per block
    hash_budget: int = 4096     # hashes per edge per tick
    max_txs_per_block: int = 64
    max_ticks: int = 5000
    max_aggregations: int = 100
    settle_ticks: int = 200
    dataset: str = "synthetic"  # synthetic | idx
    idx_images: str | None = None
    idx_labels: str | None = None
    samples: int = 2000
    features: int = 64
    classes: int = 10
    separation: float = 0.35
    noise: float = 1.0
    holdout: float = 0.5
    partition: str = "label-skew"
    shards_per_client: int = 2
    strategy: str = "discard-low"
    weight_mode: str = "similarity"
    eps: float | None = None
    eps_scale: float = 1.5
    min_pts: int = 3
    sig_params: str = "toy"

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(eta=self.eta, epochs=self.epochs, batch=self.batch)

    @property
    def incentive(self) -> IncentiveConfig:
        return IncentiveConfig(clustering=DBSCAN(eps=self.eps, min_pts=self.min_pts, eps_scale=self.eps_scale),
                               strategy=self.strategy, base=self.base, weight_mode=self.weight_mode)

    @property
    def mining(self) -> MiningParams:
        return MiningParams(difficulty=self.difficulty)

    def validate(self) -> "ScenarioConfig":
        problems = []
        if self.n < 1 or self.m < 1:
            problems.append("n and m must be >= 1")
        for name in ("p_drop", "p_reconnect"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in [0, 1]")
        if self.cap_n < 0 or self.phi < 0:
            problems.append("cap_n and phi must be nonnegative")
        if self.arrival_rate < 0:
            problems.append("arrival_rate must be nonnegative")
        if self.hash_budget < 1 or self.max_txs_per_block < 1:
            problems.append("hash_budget and max_txs_per_block must be >= 1")
        if self.max_ticks < 1:
            problems.append("max_ticks must be >= 1")
        if not 0.0 < self.holdout < 1.0:
            problems.append("holdout must lie in (0, 1)")
        if self.dataset not in ("synthetic", "idx"):
            problems.append(f"unknown dataset {self.dataset!r}")
        if self.dataset == "idx" and not (self.idx_images and self.idx_labels):
            problems.append("dataset=idx needs idx_images and idx_labels")
        if self.partition not in ("iid", "label-skew"):
            problems.append(f"unknown partition {self.partition!r}")
        if self.sig_params not in PARAM_SETS:
            problems.append(f"unknown sig_params {self.sig_params!r}")
        if self.samples < self.n * 2:
            problems.append("samples must be at least 2 per client")
        a = self.attack
        if a.mode not in ("none", "rotating", "fixed"):
            problems.append(f"unknown attack mode {a.mode!r}")
        if a.mode == "rotating" and not 0 <= a.count <= self.n:
            problems.append("attack count must lie in [0, n]")
        if a.mode == "fixed" and any(not 1 <= i <= self.n for i in a.ids):
            problems.append("attack ids must be client ids in 1..n")
        if not 0.0 <= a.fraction <= 1.0:
            problems.append("attack fraction must lie in [0, 1]")
        for build in (lambda: self.train, lambda: self.incentive, lambda: self.mining):
            try:
                build()
            except ValueError as exc:
                problems.append(str(exc))
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScenarioConfig":
        data = dict(data or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown scenario keys: {', '.join(unknown)}")
        attack = data.pop("attack", None) or {}
        if not isinstance(attack, dict):
            raise ConfigError("attack must be a mapping")
        a_known = {f.name for f in dataclasses.fields(AttackProfile)}
        if set(attack) - a_known:
            raise ConfigError(f"unknown attack keys: {', '.join(sorted(set(attack) - a_known))}")
        try:
            return cls(attack=AttackProfile(**attack), **data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes) -> "ScenarioConfig":
        if "attack" in changes and isinstance(changes["attack"], dict):
            changes["attack"] = AttackProfile(**changes["attack"])
        return dataclasses.replace(self, **changes)


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return ScenarioConfig.from_dict(data or {})


def dump_scenario(cfg: ScenarioConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


# Desk scale: 20 clients, 2000 samples, cheap mining.
_DESK = dict(n=20, m=2, samples=2000, difficulty=2**8, hash_budget=4096,
             max_ticks=4000, settle_ticks=100)

PRESETS: dict[str, dict[str, Any]] = {
    "paper-defaults": dict(n=100, m=2, eta=0.01, epochs=5, batch=10, base=100.0,
                           samples=10000, difficulty=2**8, max_ticks=4000),
    "desk": dict(_DESK, phi=5, cap_n=75),
    # Equal tick budget per cell so accuracy is compared over the same time.
    "threshold-sweep": dict(_DESK, phi=5, cap_n=75, max_ticks=600, max_aggregations=1000),
    "discard-vs-keep": dict(_DESK, phi=5, cap_n=75, strategy="discard-low"),
    "attack-iid": dict(_DESK, n=10, samples=1000, partition="iid", phi=5, cap_n=75,
                       max_aggregations=10, attack=dict(mode="rotating", count=3)),
    "attack-noniid": dict(_DESK, n=10, samples=1000, partition="label-skew", phi=5, cap_n=75,
                          max_aggregations=10, attack=dict(mode="rotating", count=3)),
    "attack-fixed": dict(_DESK, n=10, samples=1000, partition="label-skew", phi=5, cap_n=75,
                         max_aggregations=10, attack=dict(mode="fixed", ids=[6, 8, 9])),
}


def preset(name: str, **overrides) -> ScenarioConfig:
    try:
        values = dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}") from None
    values.update(overrides)
    return ScenarioConfig.from_dict(values)
