"""Declarative experiment configuration.

Configs are plain JSON documents; every run is fully reconstructible from the
config plus its seed. `ExperimentConfig.from_dict` validates a parsed
document and `to_dict` round-trips it (the echo embedded in reports is this
dict).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

DATA_ROOT_ENV = "FEDCOND_DATA_ROOT"

DATASET_KINDS = ("idx", "glyphs", "synthetic")
FAMILIES = ("E1", "E2a", "E2b", "E3a", "E3b", "E4a", "E4b")


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


@dataclass
class DatasetSpec:
    kind: str = "glyphs"
    name: str = "glyphs"
    root: str | None = None          # idx: directory with the four MNIST-style files
    per_class_cap: int | None = 1000
    train_per_class: int = 1000      # glyphs
    test_per_class: int = 200        # glyphs
    invert: bool = False             # glyphs: inverted-contrast domain

    def resolved_root(self) -> Path:
        root = self.root or os.environ.get(DATA_ROOT_ENV)
        if root is None:
            raise ConfigError(f"dataset kind 'idx' needs a root path "
                              f"(config dataset.root or ${DATA_ROOT_ENV})")
        return Path(root)

    def validate(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "idx":
            from .data import MNIST_FILES
            root = self.resolved_root()
            for fname in MNIST_FILES:
                if not (root / fname).exists():
                    raise ConfigError(f"missing dataset file: {root / fname}")
        if self.per_class_cap is not None and self.per_class_cap <= 0:
            raise ConfigError("per_class_cap must be positive or null")


@dataclass
class HeterogeneitySpec:
    family: str = "E1"
    K: int = 2
    clients_per_cluster: int = 5
    sparsity: str | None = None           # named level; overrides clients_per_cluster
    superclass: str = "parity"            # E2a
    subclass_sets: list[list[int]] | None = None   # E2a
    rules: list[str] = field(default_factory=lambda: ["parity", "threshold5"])  # E3a/E4b
    covariate_clusters: int = 2           # E4b
    covariate_sets: list[list[int]] | None = None  # E4b explicit override
    dataset_b: DatasetSpec | None = None  # E4a

    def validate(self):
        from .heterogeneity import SPARSITY_LEVELS
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.sparsity is not None and self.sparsity not in SPARSITY_LEVELS:
            raise ConfigError(f"unknown sparsity level {self.sparsity!r}; "
                              f"known: {sorted(SPARSITY_LEVELS)}")
        if self.sparsity is None and self.clients_per_cluster < 1:
            raise ConfigError("clients_per_cluster must be >= 1")
        if self.family == "E4a" and self.dataset_b is None:
            raise ConfigError("family E4a needs heterogeneity.dataset_b")
        if self.family == "E4b" and len(self.rules) != 2:
            raise ConfigError("family E4b needs exactly 2 concept rules")

    def effective_clients_per_cluster(self) -> int:
        from .heterogeneity import SPARSITY_LEVELS
        if self.sparsity is not None:
            return SPARSITY_LEVELS[self.sparsity]
        return self.clients_per_cluster


@dataclass
class StatsSpec:
    l: int = 32
    extractor: str = "identity"
    method: str = "dense"  # dense | iterative

    def validate(self):
        if self.l < 1:
            raise ConfigError("stats.l must be >= 1")
        if self.extractor != "identity":
            raise ConfigError("only the identity extractor is implemented")
        if self.method not in ("dense", "iterative"):
            raise ConfigError(f"unknown stats method {self.method!r}")


@dataclass
class TrainingSpec:
    architecture: str = "mlp"  # mlp | mnist_cnn
    hidden_dim: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 10
    lr_schedule: str = "constant"  # constant | cosine; applies to all strategies

    def validate(self):
        if self.architecture not in ("mlp", "mnist_cnn"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")


@dataclass
class ExperimentConfig:
    name: str = "run"
    seed: int = 0
    out_dir: str | None = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    heterogeneity: HeterogeneitySpec = field(default_factory=HeterogeneitySpec)
    stats: StatsSpec = field(default_factory=StatsSpec)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    strategies: list[dict] = field(default_factory=list)

    def validate(self):
        from .federation import STRATEGY_KINDS
        if not self.strategies:
            raise ConfigError("strategy list is empty")
        for s in self.strategies:
            kind = s.get("kind")
            if kind not in STRATEGY_KINDS:
                raise ConfigError(f"unknown strategy kind {kind!r}")
        self.dataset.validate()
        self.heterogeneity.validate()
        self.stats.validate()
        self.training.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        known = {"name", "seed", "out_dir", "dataset", "heterogeneity",
                 "stats", "training", "strategies"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")

        def build(klass, sub):
            sub = dict(sub or {})
            names = {f for f in klass.__dataclass_fields__}
            bad = set(sub) - names
            if bad:
                raise ConfigError(f"unknown {klass.__name__} keys: {sorted(bad)}")
            return klass(**sub)

        het_doc = dict(doc.get("heterogeneity") or {})
        dataset_b = het_doc.pop("dataset_b", None)
        het = build(HeterogeneitySpec, het_doc)
        if dataset_b is not None:
            het.dataset_b = build(DatasetSpec, dataset_b)

        strategies = []
        for s in doc.get("strategies", []):
            strategies.append({"kind": s} if isinstance(s, str) else dict(s))

        cfg = cls(
            name=doc.get("name", "run"),
            seed=int(doc.get("seed", 0)),
            out_dir=doc.get("out_dir"),
            dataset=build(DatasetSpec, doc.get("dataset")),
            heterogeneity=het,
            stats=build(StatsSpec, doc.get("stats")),
            training=build(TrainingSpec, doc.get("training")),
            strategies=strategies,
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass
class SuiteConfig:
    """A Cartesian grid over a base experiment config.

    Grid keys are dotted config paths (e.g. "heterogeneity.K"); each run gets
    a distinct child seed derived from (seed, run_index).
    """

    name: str
    seed: int
    base: dict
    grid: dict[str, list]

    @classmethod
    def from_file(cls, path) -> "SuiteConfig":
        with open(path) as f:
            doc = json.load(f)
        for key in ("base", "grid"):
            if key not in doc:
                raise ConfigError(f"suite config needs a {key!r} section")
        return cls(name=doc.get("name", "suite"), seed=int(doc.get("seed", 0)),
                   base=doc["base"], grid={k: list(v) for k, v in doc["grid"].items()})

    def expand(self) -> list[dict]:
        """All grid points as full config dicts, in deterministic order."""
        keys = sorted(self.grid)
        combos: list[dict] = [{}]
        for k in keys:
            combos = [dict(c, **{k: v}) for c in combos for v in self.grid[k]]
        docs = []
        for combo in combos:
            doc = json.loads(json.dumps(self.base))  # deep copy
            for dotted, value in combo.items():
                node = doc
                parts = dotted.split(".")
                for p in parts[:-1]:
                    node = node.setdefault(p, {})
                node[parts[-1]] = value
            label = "_".join(f"{k.split('.')[-1]}={combo[k]}" for k in keys)
            doc["name"] = f"{self.name}_{label}" if label else self.name
            docs.append(doc)
        return docs
