"""Experiment configuration files (TOML) and their translation to run configs."""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .baselines import BaselineConfig
from .cyclic import GaPConfig
from .data import Dataset, load_idx, make_synthetic
from .errors import ConfigError
from .nn import OptimizerConfig
from .sparsity import SparsityPolicy

Method = Literal["cgap", "pgap", "dense", "one-shot", "gmp", "static-random", "random-explore"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ExperimentSection(_Section):
    method: Method
    seed: int = 0
    output_dir: str = "runs/default"
    run_id: str = "run"
    model_seed: Optional[int] = None


class ModelSection(_Section):
    sizes: list[int] = Field(min_length=2)


class DataSection(_Section):
    kind: Literal["synthetic", "idx"] = "synthetic"
    teacher: Optional[list[int]] = None
    n_samples: int = Field(8000, ge=1)
    noise: float = Field(0.0, ge=0.0, le=1.0)
    val_fraction: float = Field(0.2, ge=0.0, lt=1.0)
    seed: int = 0
    images: Optional[str] = None
    labels: Optional[str] = None
    n_classes: Optional[int] = None

    @model_validator(mode="after")
    def _paths(self):
        if self.kind == "idx" and not (self.images and self.labels):
            raise ValueError("idx data needs images and labels paths")
        return self


class SparsitySection(_Section):
    ratio: float = Field(0.0, ge=0.0, lt=1.0)
    distribution: Literal["uniform", "non-uniform"] = "uniform"
    granularity: Literal["element", "block"] = "element"
    block_size: int = Field(8, ge=1)
    exempt: list[str] = []


class OptimizerSection(_Section):
    lr: float = Field(0.05, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(0.0, ge=0.0)
    schedule: Literal["constant", "cosine"] = "cosine"
    warmup_epochs: int = Field(0, ge=0)
    batch_size: int = Field(64, ge=1)


class GaPSection(_Section):
    kappa: int = Field(2, ge=1)
    steps: int = Field(6, ge=1)
    epochs_per_step: int = Field(5, ge=1)
    finetune_epochs: int = Field(10, ge=0)
    partition: Literal["contiguous", "random"] = "contiguous"
    probe_size: int = Field(512, ge=1)
    diagnostics: bool = True
    workers: Optional[int] = None
    timeout: float = Field(300.0, gt=0.0)
    checkpoint_every_step: bool = True


class BaselineSection(_Section):
    epochs: int = Field(40, ge=0)
    segments: Optional[list[int]] = None
    gmp_start: int = 0
    gmp_end: Optional[int] = None
    gmp_interval: int = Field(1, ge=1)
    explore_fraction: float = Field(0.3, gt=0.0, lt=1.0)
    dense_fraction: float = Field(0.5, ge=0.0, le=1.0)


class CoverageSection(_Section):
    n: int = Field(10, ge=1)
    per_step: int = Field(1, ge=1)
    trials: int = Field(2000, ge=1)
    seed: int = 0


class ExperimentConfig(_Section):
    experiment: ExperimentSection
    model: ModelSection
    data: DataSection = DataSection()
    sparsity: SparsitySection = SparsitySection()
    optimizer: OptimizerSection = OptimizerSection()
    gap: GaPSection = GaPSection()
    baseline: BaselineSection = BaselineSection()
    coverage: CoverageSection = CoverageSection()

    def policy(self) -> SparsityPolicy:
        s = self.sparsity
        return SparsityPolicy(s.ratio, s.distribution, s.granularity, s.block_size, frozenset(s.exempt))

    def optimizer_config(self) -> OptimizerConfig:
        o = self.optimizer
        return OptimizerConfig(o.lr, o.momentum, o.weight_decay, o.schedule, o.warmup_epochs)

    def gap_config(self) -> GaPConfig:
        g = self.gap
        return GaPConfig(
            kappa=g.kappa,
            steps=g.steps,
            epochs_per_step=g.epochs_per_step,
            finetune_epochs=g.finetune_epochs,
            policy=self.policy(),
            opt=self.optimizer_config(),
            partition=g.partition,
            seed=self.experiment.seed,
            batch_size=self.optimizer.batch_size,
            probe_size=g.probe_size,
            diagnostics=g.diagnostics,
            run_id=self.experiment.run_id,
        )

    def baseline_config(self) -> BaselineConfig:
        b = self.baseline
        return BaselineConfig(
            method=self.experiment.method,
            epochs=b.epochs,
            policy=self.policy(),
            opt=self.optimizer_config(),
            seed=self.experiment.seed,
            batch_size=self.optimizer.batch_size,
            segments=tuple(b.segments) if b.segments is not None else None,
            gmp_start=b.gmp_start,
            gmp_end=b.gmp_end,
            gmp_interval=b.gmp_interval,
            explore_fraction=b.explore_fraction,
            dense_fraction=b.dense_fraction,
            run_id=self.experiment.run_id,
        )

    def dataset(self, base_dir: Path | None = None) -> Dataset:
        d = self.data
        if d.kind == "synthetic":
            return make_synthetic(d.teacher or self.model.sizes, d.n_samples, d.noise, d.seed, d.val_fraction)
        base = base_dir or Path(".")
        return load_idx(base / d.images, base / d.labels, d.val_fraction, d.seed, d.n_classes)


def parse_config(data: dict) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(data)
        # surface cross-field errors from the run configs now, not mid-run
        if cfg.experiment.method in ("cgap", "pgap"):
            cfg.gap_config()
        else:
            cfg.baseline_config()
        return cfg
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"{where}: {first['msg']}") from exc


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    return parse_config(data)
