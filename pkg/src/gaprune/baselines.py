"""Comparator training regimes run on the same loop as GaP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cyclic import init_sparse, prune_scope
from .data import Dataset
from .errors import ConfigError
from .nn import MLP, OptimizerConfig
from .sparsity import SparsityPolicy, arg_prune_to, mask_relative_error, prunable_layers, prune_count
from .training import RunRecord, Trainer, rng_for, write_weights

METHODS = ("dense", "one-shot", "gmp", "static-random", "random-explore")


@dataclass(frozen=True)
class BaselineConfig:
    method: str
    epochs: int
    policy: SparsityPolicy
    opt: OptimizerConfig
    seed: int = 0
    batch_size: int = 64
    # dense: LR restart segments; must sum to ``epochs``
    segments: tuple[int, ...] | None = None
    gmp_start: int = 0
    gmp_end: int | None = None
    gmp_interval: int = 1
    explore_fraction: float = 0.3
    dense_fraction: float = 0.5
    run_id: str = "run"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown baseline {self.method!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.segments is not None:
            object.__setattr__(self, "segments", tuple(int(s) for s in self.segments))
            if sum(self.segments) != self.epochs or any(s < 0 for s in self.segments):
                raise ConfigError(f"segments {self.segments} do not add up to {self.epochs} epochs")
        if self.method == "gmp":
            end = self.gmp_end_epoch
            if not 0 <= self.gmp_start < end <= self.epochs or self.gmp_interval < 1:
                raise ConfigError(f"gmp needs 0 <= start < end <= epochs, got {self.gmp_start}, {end}")
        if self.method == "random-explore" and not 0.0 < self.explore_fraction < 1.0:
            raise ConfigError("explore_fraction must be in (0, 1)")
        if not 0.0 <= self.dense_fraction <= 1.0:
            raise ConfigError("dense_fraction must be in [0, 1]")

    @property
    def gmp_end_epoch(self) -> int:
        return self.gmp_end if self.gmp_end is not None else max(self.gmp_start + 1, (3 * self.epochs) // 4)


def gmp_sparsity(t: float, final: float, t0: float, t1: float) -> float:
    """Cubic ramp from 0 at ``t0`` to ``final`` at ``t1``, clamped outside."""
    frac = min(max((t - t0) / (t1 - t0), 0.0), 1.0)
    return final * (1.0 - (1.0 - frac) ** 3)


def gmp_events(config: BaselineConfig) -> list[int]:
    """Epoch boundaries at which GMP prunes (always ending at the end epoch)."""
    end = config.gmp_end_epoch
    events = list(range(config.gmp_start, end + 1, config.gmp_interval))
    if events[-1] != end:
        events.append(end)
    return events


def _start(config: BaselineConfig, model: MLP, dataset: Dataset, masks, name: str):
    record = RunRecord(config.run_id, name)
    trainer = Trainer(model, masks, dataset, config.opt, config.batch_size, rng_for(config.seed, "data"), record)
    if masks:
        record.coverage.update(masks)
    trainer.log("init", None, None)
    return trainer, record


def run_dense(config: BaselineConfig, model: MLP, dataset: Dataset):
    """Unmasked training; ``segments`` restart the LR schedule and momentum."""
    model = model.copy()
    trainer, record = _start(config, model, dataset, {}, "dense")
    for i, length in enumerate(config.segments or (config.epochs,)):
        trainer.reset_momentum()
        trainer.train(length, i, None)
    trainer.finish()
    return model, record


def run_static_random(config: BaselineConfig, model: MLP, dataset: Dataset):
    """Random sparse mask at initialization, never changed."""
    model = model.copy()
    masks = init_sparse(model, config.policy, rng_for(config.seed, "init"))
    trainer, record = _start(config, model, dataset, masks, "static-random")
    trainer.train(config.epochs)
    trainer.finish()
    return model, masks, record


def run_one_shot(config: BaselineConfig, model: MLP, dataset: Dataset):
    """Dense training, a single magnitude prune to the target, then fine-tuning."""
    model = model.copy()
    layers = prunable_layers(model, config.policy)
    masks = {n: np.ones(model.layer(n).weight.shape, dtype=bool) for n in layers}
    trainer, record = _start(config, model, dataset, masks, "one-shot")
    dense_epochs = int(round(config.dense_fraction * config.epochs))
    trainer.train(dense_epochs, 0, None)
    delta2 = prune_scope(trainer, config.policy, layers)
    trainer.reset_momentum()
    record.coverage.update(masks)
    trainer.log("prune", 1, None, delta2=delta2)
    trainer.train(config.epochs - dense_epochs, 1, None)
    trainer.finish()
    return model, masks, record


def run_gmp(config: BaselineConfig, model: MLP, dataset: Dataset):
    """Gradual magnitude pruning along the cubic schedule; masks only shrink.

    A prune event at epoch boundary ``t`` happens before epoch ``t`` trains.
    One cosine LR schedule spans the whole budget.
    """
    model = model.copy()
    policy = config.policy
    layers = prunable_layers(model, policy)
    masks = {n: np.ones(model.layer(n).weight.shape, dtype=bool) for n in layers}
    trainer, record = _start(config, model, dataset, masks, "gmp")
    t0, t1 = config.gmp_start, config.gmp_end_epoch
    events = set(gmp_events(config))
    for t in range(config.epochs + 1):
        if t in events:
            target = gmp_sparsity(t, policy.ratio, t0, t1)
            weights = {n: model.layer(n).weight for n in layers}
            pruned, new = arg_prune_to(weights, policy.with_ratio(target), layers, current=masks)
            delta2 = mask_relative_error(weights, new)
            write_weights(model, pruned)
            masks.update(new)
            trainer.reset_momentum()
            trainer.log("prune", t, None, delta2=delta2, target=target)
        if t < config.epochs:
            trainer.train(1, t, None, lr_offset=t, lr_total=config.epochs)
    trainer.finish()
    return model, masks, record


def explore_swaps(fraction: float, active: int) -> int:
    return prune_count(fraction, active)


def run_random_explore(config: BaselineConfig, model: MLP, dataset: Dataset):
    """Magnitude prune + random regrowth after every epoch but the last.

    Per layer, the lowest-magnitude ``explore_fraction`` of active weights is
    dropped and the same number of previously inactive weights is activated
    at value 0, so layer sparsity never changes.
    """
    model = model.copy()
    policy = config.policy
    masks = init_sparse(model, policy, rng_for(config.seed, "init"))
    for name, mask in masks.items():
        active = int(np.count_nonzero(mask))
        if explore_swaps(config.explore_fraction, active) >= active:
            raise ConfigError(f"explore_fraction leaves no active weight in {name}")
    trainer, record = _start(config, model, dataset, masks, "random-explore")
    rng = rng_for(config.seed, "explore")
    for t in range(config.epochs):
        trainer.train(1, t, None, lr_offset=t, lr_total=config.epochs)
        if t < config.epochs - 1:
            explore_update(model, masks, config.explore_fraction, rng)
            trainer.reset_momentum()
            record.coverage.update(masks)
            trainer.log("explore", t, None)
    trainer.finish()
    return model, masks, record


def explore_update(model: MLP, masks, fraction: float, rng: np.random.Generator):
    """One drop-and-regrow update of every masked layer, in place."""
    for name in masks:
        mask = masks[name].reshape(-1)
        w = model.layer(name).weight.reshape(-1)
        active = np.flatnonzero(mask)
        inactive = np.flatnonzero(~mask)
        g = explore_swaps(fraction, active.size)
        if g == 0:
            continue
        if g > inactive.size:
            raise ConfigError(f"not enough inactive weights in {name} to regrow {g}")
        order = np.lexsort((active, np.abs(w[active])))
        dropped = active[order[:g]]
        grown = rng.choice(inactive, size=g, replace=False)
        mask[dropped] = False
        w[dropped] = 0.0
        mask[grown] = True
    model.touch()


def run_baseline(config: BaselineConfig, model: MLP, dataset: Dataset):
    """Dispatch on ``config.method``; always returns ``(model, masks, record)``."""
    if config.method == "dense":
        model, record = run_dense(config, model, dataset)
        return model, {}, record
    runner = {
        "one-shot": run_one_shot,
        "gmp": run_gmp,
        "static-random": run_static_random,
        "random-explore": run_random_explore,
    }[config.method]
    return runner(config, model, dataset)
