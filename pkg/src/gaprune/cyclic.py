"""Cyclic grow-and-prune training (C-GaP).

One partition of layers at a time is grown to dense and trained while the
rest stay sparse; the next step prunes it back and grows the next partition.
After ``steps`` steps the last dense partition is pruned and the sparse model
is fine-tuned with frozen masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .analysis import ConvergenceReport, estimate_grad_variance, probe_gradient_norm
from .data import Dataset
from .errors import ConfigError, GaPError, StepAbort
from .nn import MLP, OptimizerConfig
from .partition import STRATEGIES, PartitionScheme, make_contiguous_partitions, make_random_partition, schedule_indices
from .sparsity import SparsityPolicy, arg_grow_to, arg_prune_to, mask_relative_error, prunable_layers, random_masks
from .training import RunRecord, StepHook, Trainer, rng_for, write_weights


@dataclass(frozen=True)
class GaPConfig:
    kappa: int
    steps: int
    epochs_per_step: int
    finetune_epochs: int
    policy: SparsityPolicy
    opt: OptimizerConfig
    partition: str = "contiguous"
    seed: int = 0
    batch_size: int = 64
    probe_size: int = 512
    diagnostics: bool = True
    run_id: str = "run"

    def __post_init__(self):
        if self.kappa < 1:
            raise ConfigError("kappa must be at least 1")
        if self.steps < 0 or self.epochs_per_step < 0 or self.finetune_epochs < 0:
            raise ConfigError("steps and epoch counts must be nonnegative")
        if self.partition not in STRATEGIES:
            raise ConfigError(f"unknown partition strategy {self.partition!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")

    @property
    def rounds(self) -> float:
        return self.steps / self.kappa

    @property
    def total_epochs(self) -> int:
        return self.steps * self.epochs_per_step + self.finetune_epochs


def init_sparse(model: MLP, policy: SparsityPolicy, seed) -> dict[str, np.ndarray]:
    """Random masks meeting the target counts; masked weights are zeroed in place."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shapes = {name: model.layer(name).weight.shape for name in prunable_layers(model, policy)}
    masks = random_masks(shapes, policy, rng)
    for name, mask in masks.items():
        w = model.layer(name).weight
        np.copyto(w, 0.0, where=~mask)
    model.touch()
    return masks


def partition_for(model: MLP, config, round_: int) -> PartitionScheme:
    """Partition used during ``round_``; random schemes are redrawn every round."""
    layers = prunable_layers(model, config.policy)
    if not layers:
        raise ConfigError("no prunable layers")
    if config.partition == "random":
        return make_random_partition(layers, config.kappa, rng_for(config.seed, "partition", round_))
    return make_contiguous_partitions({n: model.layer(n).weight.size for n in layers}, config.kappa)


def prune_scope(trainer: Trainer, policy: SparsityPolicy, scope) -> float | None:
    """Magnitude-prune ``scope`` in place; returns the mask-induced error."""
    model = trainer.model
    weights = {n: model.layer(n).weight for n in scope}
    pruned, new_masks = arg_prune_to(weights, policy, scope)
    delta2 = mask_relative_error(weights, new_masks)
    write_weights(model, pruned)
    trainer.masks.update(new_masks)
    return delta2


def run_cgap(
    config: GaPConfig,
    model: MLP,
    dataset: Dataset,
    on_step: StepHook | None = None,
) -> tuple[MLP, dict[str, np.ndarray], RunRecord]:
    """Run C-GaP on a copy of ``model``; returns ``(model, masks, record)``."""
    model = model.copy()
    policy = config.policy
    kappa = config.kappa
    record = RunRecord(config.run_id, "cgap")
    masks = init_sparse(model, policy, rng_for(config.seed, "init"))
    scheme = partition_for(model, config, 0)
    trainer = Trainer(
        model, masks, dataset, config.opt, config.batch_size,
        rng_for(config.seed, "data"), record, groups=scheme.groups,
    )
    record.coverage.update(masks)
    trainer.log("init", None, None)

    report = ConvergenceReport() if config.diagnostics else None
    probe = dataset.probe(config.probe_size, rng_for(config.seed, "probe")) if report else None
    round_delta: dict[int, list[float]] = {}

    dense: tuple[str, ...] | None = None
    for step in range(config.steps):
        round_ = step // kappa
        try:
            if step % kappa == 0:
                scheme = partition_for(model, config, round_)
                trainer.groups = scheme.groups
            grow_i, prune_j = schedule_indices(step, kappa)
            if prune_j is not None:
                delta2 = prune_scope(trainer, policy, dense)
                trainer.reset_momentum()
                round_delta.setdefault((step - 1) // kappa, []).append(delta2 or 0.0)
                trainer.log("prune", step, round_, delta2=delta2, partition=prune_j, layers=list(dense))
            dense = scheme.groups[grow_i]
            masks.update(arg_grow_to({n: masks[n] for n in dense}))
            trainer.reset_momentum()
            record.coverage.update(masks)
            trainer.log("grow", step, round_, partition=grow_i, layers=list(dense))

            trainer.train(config.epochs_per_step, step, round_)
        except GaPError as exc:
            raise StepAbort(step, str(exc)) from exc

        _, val_acc = trainer.validate()
        if record.best_val_acc is None or val_acc > record.best_val_acc:
            record.best_step, record.best_val_acc = step, val_acc
        if report is not None and ((step + 1) % kappa == 0 or step == config.steps - 1):
            report.grad_norms.append(probe_gradient_norm(model, masks, *probe))
        if on_step is not None:
            on_step(step, model, masks)

    if dense is not None:
        delta2 = prune_scope(trainer, policy, dense)
        trainer.reset_momentum()
        round_delta.setdefault((config.steps - 1) // kappa, []).append(delta2 or 0.0)
        trainer.log("prune", config.steps, None, delta2=delta2, partition="final", layers=list(dense))

    trainer.train(config.finetune_epochs, None, None)

    if report is not None:
        n_rounds = math.ceil(config.steps / kappa)
        report.delta2 = [float(np.mean(round_delta.get(q, [0.0]))) for q in range(n_rounds)]
        batches = [
            (probe[0][i:i + config.batch_size], probe[1][i:i + config.batch_size])
            for i in range(0, len(probe[1]), config.batch_size)
        ]
        report.grad_variance = estimate_grad_variance(model, masks, batches, probe)
        record.convergence = report
    trainer.finish()
    return model, masks, record
