"""Run configuration: one YAML document per run, archived beside its outputs."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from cpgc.attack import AttackConfig
from cpgc.defenses import DEFENSES
from cpgc.encoders import ARCH_KINDS
from cpgc.errors import ContractError
from cpgc.evaluation import MODES

RUN_ROOT_ENV = "CPGC_RUN_ROOT"
CONFIG_NAME = "run_config.yaml"
BASELINES = ("gap", "random_noise")

# attack settings used by the command line unless the config overrides them
DESK_ATTACK = {"epochs": 10, "batch_pairs": 16}


def _check_keys(cls, data: dict[str, Any], section: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ContractError(f"unknown key(s) in {section}: {', '.join(unknown)}")


@dataclass
class PathsSpec:
    corpus: str = "corpus"
    zoo: str = "zoo"
    artifacts: str = "artifacts"
    reports: str = "reports"


@dataclass
class CorpusSpec:
    n_train: int = 2000
    n_test: int = 500
    m: int = 3
    domains: list[str] = field(default_factory=lambda: ["A"])

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1 or self.m < 2:
            raise ContractError("corpus needs n_train, n_test >= 1 and m >= 2")
        if not self.domains or any(d not in ("A", "B") for d in self.domains):
            raise ContractError("corpus domains must be a non-empty subset of A, B")


@dataclass
class ZooSpec:
    arch_kinds: list[str] = field(default_factory=lambda: list(ARCH_KINDS))
    seeds: list[int] = field(default_factory=lambda: [0, 1])
    surrogate: str = "mean_pool-s0"
    train_domain: str = "A"
    epochs: int = 80
    batch: int = 64
    temperature: float = 0.07
    learning_rate: float = 5e-3
    min_recall: float = 0.8

    def __post_init__(self):
        bad = [a for a in self.arch_kinds if a not in ARCH_KINDS]
        if bad or not self.arch_kinds or not self.seeds:
            raise ContractError(f"zoo needs arch kinds from {ARCH_KINDS} and at least one seed")
        if self.surrogate not in self.member_ids:
            raise ContractError(f"surrogate {self.surrogate!r} is not a zoo member {self.member_ids}")

    @property
    def members(self) -> list[tuple[str, int]]:
        return [(a, int(s)) for a in self.arch_kinds for s in self.seeds]

    @property
    def member_ids(self) -> list[str]:
        return [f"{a}-s{s}" for a, s in self.members]


@dataclass
class EvalSpec:
    ks: list[int] = field(default_factory=lambda: [1, 5, 10])
    defenses: list[str] = field(default_factory=list)
    domains: list[str] = field(default_factory=lambda: ["A"])
    mode: str = "joint"

    def __post_init__(self):
        if not self.ks or any(k < 1 for k in self.ks):
            raise ContractError("eval ks must be positive")
        if any(d not in DEFENSES for d in self.defenses):
            raise ContractError(f"eval defenses must be among {DEFENSES}")
        if self.mode not in MODES:
            raise ContractError(f"eval mode must be one of {MODES}")


@dataclass
class RunConfig:
    seed: int = 0
    root: str = ""
    paths: PathsSpec = field(default_factory=PathsSpec)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    zoo: ZooSpec = field(default_factory=ZooSpec)
    attack: dict[str, Any] = field(default_factory=dict)
    eval: EvalSpec = field(default_factory=EvalSpec)

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "RunConfig":
        data = dict(data or {})
        _check_keys(cls, data, "config")
        sections = {"paths": PathsSpec, "corpus": CorpusSpec, "zoo": ZooSpec, "eval": EvalSpec}
        kwargs: dict[str, Any] = {}
        for name, value in data.items():
            if name in sections:
                value = value or {}
                if not isinstance(value, dict):
                    raise ContractError(f"config section {name!r} must be a mapping")
                _check_keys(sections[name], value, name)
                kwargs[name] = sections[name](**value)
            else:
                kwargs[name] = value
        cfg = cls(**kwargs)
        cfg.attack_config()   # validate early
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls.from_dict({})
        with open(path) as fh:
            data = yaml.safe_load(fh)
        if data is not None and not isinstance(data, dict):
            raise ContractError(f"{path}: top level must be a mapping")
        return cls.from_dict(data)

    def attack_config(self, **overrides) -> AttackConfig:
        values = {**DESK_ATTACK, "seed": self.seed, **(self.attack or {}), **overrides}
        return AttackConfig.from_dict(values)

    def resolved_root(self, out: str | None = None) -> Path:
        """``--out`` wins, then the config's ``root``, then the environment, then ``./runs``."""
        root = out or self.root or os.environ.get(RUN_ROOT_ENV) or "runs"
        return Path(root).resolve()

    def dir(self, name: str, out: str | None = None) -> Path:
        return self.resolved_root(out) / getattr(self.paths, name)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def archive(self, directory: Path) -> Path:
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / CONFIG_NAME
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)
        return path
