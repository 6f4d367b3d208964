"""Experiment configuration: a versioned JSON document mapped onto dataclasses."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..model import ModelConfig
from ..pathways import SamplingPolicy
from ..pruning import PruneConfig
from ..regularization import LassoConfig
from ..training import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    context_window: int = 8
    embed_dim: int = 16
    hidden_dim: int = 256
    num_hidden_layers: int = 2

    def build(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, self.context_window, self.embed_dim, self.hidden_dim,
                           self.num_hidden_layers)


@dataclass
class TrainSection:
    lr: float = 1e-3
    warmup_steps: int = 100
    batch_size: int = 64

    def build(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, warmup_steps=self.warmup_steps, batch_size=self.batch_size)


@dataclass
class PruneSection:
    p: float = 0.20
    interval: int = 200
    interval_per_language: dict[str, int] = field(default_factory=dict)
    target_sparsity: float = 0.706

    def build(self, mode: str, language: str, finetune_steps: int) -> PruneConfig:
        t = self.interval_per_language.get(language, self.interval)
        return PruneConfig(self.p, t, self.target_sparsity, mode, finetune_steps)


@dataclass
class LassoSection:
    base_strength: float = 2e-5
    recompute_interval: int = 100

    def build(self, enabled: bool = True) -> LassoConfig:
        return LassoConfig(self.base_strength, enabled, self.recompute_interval)


@dataclass
class BudgetSection:
    dense_steps: int = 5000
    small_dense_steps: int = 5000
    pathways_steps: int = 5000
    finetune_steps: int = 2000


@dataclass
class ExperimentConfig:
    """Everything a run needs; all randomness derives from ``seed``."""

    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    out: str = "runs/default"
    model: ModelSection = field(default_factory=ModelSection)
    # about 30% of the full model's parameters
    small_model: ModelSection = field(default_factory=lambda: ModelSection(hidden_dim=112))
    train: TrainSection = field(default_factory=TrainSection)
    prune: PruneSection = field(default_factory=PruneSection)
    lasso: LassoSection = field(default_factory=LassoSection)
    sampling_alpha: float = 0.5
    budgets: BudgetSection = field(default_factory=BudgetSection)
    lasso_ablation: bool = True
    metrics_every: int = 1
    figures: bool = True

    def validate(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version} (expected {SCHEMA_VERSION})")
        for f in fields(BudgetSection):
            if getattr(self.budgets, f.name) < 1:
                raise ConfigError(f"budgets.{f.name} must be >= 1")
        if self.metrics_every < 1:
            raise ConfigError("metrics_every must be >= 1")
        try:
            self.model.build(2)
            self.small_model.build(2)
            self.prune.build("imp", "", 1)
            self.lasso.build()
            SamplingPolicy(self.sampling_alpha)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return self

    def sampling(self, stream_name: str) -> SamplingPolicy:
        return SamplingPolicy(self.sampling_alpha, sub_seed(self.seed, "sampling", stream_name))

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        sections = {"model": ModelSection, "small_model": ModelSection, "train": TrainSection,
                    "prune": PruneSection, "lasso": LassoSection, "budgets": BudgetSection}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in d.items():
            if k in sections:
                sub = sections[k]
                bad = set(v) - {f.name for f in fields(sub)}
                if bad:
                    raise ConfigError(f"unknown keys in {k}: {sorted(bad)}")
                kwargs[k] = sub(**v)
            else:
                kwargs[k] = v
        return cls(**kwargs).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        return cls.from_dict(d)

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if out is not None:
            cfg = replace(cfg, out=str(out))
        return cfg


def sub_seed(seed: int, *names: str) -> list[int]:
    """Named sub-stream of the master seed (usable as a numpy seed)."""
    return [int(seed)] + [zlib.crc32(n.encode("utf-8")) for n in names]


def stream(seed: int, *names: str) -> np.random.Generator:
    return np.random.default_rng(sub_seed(seed, *names))


def quick_config(**overrides) -> ExperimentConfig:
    """A much smaller configuration for smoke tests."""
    cfg = ExperimentConfig(
        model=ModelSection(hidden_dim=64),
        small_model=ModelSection(hidden_dim=32),
        prune=PruneSection(interval=20),
        budgets=BudgetSection(dense_steps=200, small_dense_steps=100, pathways_steps=200, finetune_steps=50),
        figures=False,
    )
    return replace(cfg, **overrides).validate()
